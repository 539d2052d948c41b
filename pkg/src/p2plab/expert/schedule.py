"""Solving a model into an ExpertSchedule."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import SolverError
from ..prosumer import ACTION_DIM, ACTION_FIELDS, Action
from .compile import CompiledModel, compile_ir
from .ir import ModelIR
from .qp import kkt_residuals


@dataclass
class ExpertSchedule:
    agent: str
    actions: np.ndarray  # (T, 5) device setpoints
    p_p2p: np.ndarray  # (T,)
    objective_value: float
    kkt: dict = field(default_factory=dict)
    solution: dict = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def action(self, t: int) -> Action:
        if not 0 <= t < self.horizon:
            raise IndexError(f"step {t} outside schedule horizon {self.horizon}")
        return Action.from_array(self.actions[t])

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "actions": self.actions.tolist(),
            "p_p2p": self.p_p2p.tolist(),
            "objective_value": self.objective_value,
            "kkt": self.kkt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSchedule":
        return cls(
            agent=d["agent"],
            actions=np.array(d["actions"], dtype=float).reshape(-1, ACTION_DIM),
            p_p2p=np.array(d["p_p2p"], dtype=float),
            objective_value=float(d["objective_value"]),
            kkt=dict(d.get("kkt", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def actions_from_solution(ir: ModelIR, sol: dict[str, np.ndarray]) -> np.ndarray:
    H = ir.horizon
    out = np.zeros((H, ACTION_DIM))
    amap = ir.meta.get("action_map", {})
    for k, comp in enumerate(ACTION_FIELDS):
        for var, coef in amap.get(comp, []):
            if var in sol:
                out[:, k] += coef * sol[var]
    return out


def solve_compiled(model: CompiledModel, data: dict, warm=None) -> tuple[ExpertSchedule, tuple]:
    q, l, u = model.assemble(data)
    solver = model.solver()
    x0, y0 = (None, None) if warm is None else warm
    res = solver.solve(q, l, u, x0=x0, y0=y0)
    if warm is not None and not res.solved and res.status not in ("infeasible", "unbounded"):
        # a stale warm start can stall the splitting iteration; retry cold
        res = solver.solve(q, l, u)
    if res.status in ("infeasible", "unbounded"):
        raise SolverError("Model Infeasible or Unbounded", res.status)
    if not res.solved:
        raise SolverError("Numerical trouble encountered", res.status)
    kkt = kkt_residuals(model.P, q, model.A, l, u, res.x, res.y)
    sol = model.unpack(res.x)
    ir = model.ir
    p2p = sol.get("p_p2p", np.zeros(ir.horizon))
    sched = ExpertSchedule(
        agent=str(ir.meta.get("agent", "")),
        actions=actions_from_solution(ir, sol),
        p_p2p=np.asarray(p2p, dtype=float).copy(),
        objective_value=float(res.objective),
        kkt=kkt,
        solution=sol,
    )
    return sched, (res.x, res.y)


def solve_convex(ir: ModelIR, data: dict) -> ExpertSchedule:
    """Solve the model over its full horizon.

    Raises SolverError labelled "Model Infeasible or Unbounded" when the
    splitting iteration produces an infeasibility certificate.
    """
    sched, _ = solve_compiled(compile_ir(ir), data)
    return sched
