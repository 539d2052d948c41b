"""Independent hand-written reference model (the "human expert" of the metrics).

Written directly against cvxpy with the exact apparent-power circle, so it
shares no code with the IR pipeline beyond the data dictionary.
"""

from __future__ import annotations

import numpy as np

from ..errors import SolverError
from ..prosumer import ProsumerSpec
from .generate import TIE_BREAK
from .schedule import ExpertSchedule


def reference_schedule(spec: ProsumerSpec, data: dict, horizon: int, trade_limit: float = 10.0) -> ExpertSchedule:
    import cvxpy as cp

    H = horizon
    cost = 0
    cons = []
    zero = np.zeros(H)
    p_cdg = p_rdg = q_rdg = p_bess = p_cl = zero
    if spec.cdg is not None:
        c = spec.cdg
        p_cdg = cp.Variable(H)
        prev = cp.hstack([np.array([data["init.p_cdg"]]), p_cdg[:-1]]) if H > 1 else np.array([data["init.p_cdg"]])
        cons += [p_cdg >= c.p_min, p_cdg <= c.p_max, cp.abs(p_cdg - prev) <= c.ramp_max]
        cost += c.cost_quad * cp.sum_squares(p_cdg) + c.cost_lin * cp.sum(p_cdg)
    if spec.rdg is not None:
        p_rdg = cp.Variable(H)
        q_rdg = cp.Variable(H)
        cap = np.minimum(np.asarray(data["rdg_avail"][:H]), spec.rdg.s_max)
        cons += [p_rdg >= 0, p_rdg <= cap, cp.norm(cp.vstack([p_rdg, q_rdg]), 2, axis=0) <= spec.rdg.s_max]
        cost += TIE_BREAK * cp.sum_squares(q_rdg)
    if spec.bess is not None:
        b = spec.bess
        ch = cp.Variable(H, nonneg=True)
        dis = cp.Variable(H, nonneg=True)
        soc = cp.Variable(H)
        dt = b.dt_norm
        cons += [ch <= max(b.p_max, 0.0), dis <= max(-b.p_min, 0.0), soc >= b.soc_min, soc <= b.soc_max]
        soc_prev = cp.hstack([np.array([data["init.soc"]]), soc[:-1]]) if H > 1 else np.array([data["init.soc"]])
        cons.append(soc == soc_prev + b.eta * dt * ch - dt / b.eta * dis)
        cost += b.maint_coeff * cp.sum(ch + dis) - data["soc_value"] * soc[H - 1]
        cost += TIE_BREAK * (cp.sum_squares(ch) + cp.sum_squares(dis))
        p_bess = ch - dis
    if spec.cl is not None:
        p_cl = cp.Variable(H)
        cons += [p_cl >= 0, p_cl <= spec.cl.alpha * np.asarray(data["load_p"][:H])]
        cost += spec.cl.comp_coeff * cp.sum(p_cl)
    p2p = cp.Variable(H)
    buy = cp.Variable(H, nonneg=True)
    sell = cp.Variable(H, nonneg=True)
    load = np.asarray(data["load_p"][:H])
    p_ex = p_cdg + p_rdg + p_cl - load - p_bess
    cons += [p_ex == -(buy - sell) - p2p, cp.abs(p2p) <= trade_limit, buy <= trade_limit, sell <= trade_limit]
    cost += (np.asarray(data["lambda_buy"][:H]) @ buy - np.asarray(data["lambda_sell"][:H]) @ sell
             + data["lambda_dso"] * cp.sum(cp.abs(p2p)) + np.asarray(data["lambda_p2p"][:H]) @ p2p)
    prob = cp.Problem(cp.Minimize(cost), cons)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError("Model Infeasible or Unbounded", prob.status)

    def val(x):
        return np.zeros(H) if isinstance(x, np.ndarray) else np.asarray(x.value, dtype=float).reshape(H)

    actions = np.column_stack([val(p_cdg), val(p_rdg), val(q_rdg), val(p_bess), val(p_cl)])
    return ExpertSchedule(spec.agent_id, actions, val(p2p), float(prob.value))
