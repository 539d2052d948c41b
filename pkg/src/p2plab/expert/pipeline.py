"""The expert workflow end to end and the closed-loop receding-horizon planner.

generate -> validate/correct -> integrate trading -> compile, then one
warm-started solve per agent and step, with the DSO correction applied to the
joint first actions before the state advances.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, SolverError
from ..market.env import clear_p2p
from ..market.scenario import PriceSchedule, Scenario, ScenarioData
from ..netmodel import Network, build_admittance
from ..prosumer import (
    STEP_HOURS,
    Action,
    DeviceState,
    ProsumerSpec,
    advance_state,
    grid_exchange,
    initial_state,
    operational_cost,
    project_action,
)
from .compile import CompiledModel, compile_ir
from .correct import CorrectionReport, validate_and_correct
from .dso import MAX_ROUNDS, DsoReport, dso_correct_step
from .generate import DEFAULT_HORIZON, GeneratorBackend, generate_model
from .ir import ModelIR
from .schedule import ExpertSchedule, solve_compiled
from .trading import integrate_trading

log = logging.getLogger(__name__)


def _pad(x: np.ndarray, start: int, H: int) -> np.ndarray:
    """x[start:start+H], repeating the last value past the end."""
    idx = np.minimum(np.arange(start, start + H), len(x) - 1)
    return np.asarray(x, dtype=float)[idx]


def soc_value(spec: ProsumerSpec, prices: PriceSchedule) -> float:
    """Worth of one unit of state of charge at the end of a planning window.

    Stored energy is valued at the day's mean P2P price, discounted by one
    conversion loss.
    """
    if spec.bess is None:
        return 0.0
    energy_steps = spec.bess.e_cap / STEP_HOURS
    return float(energy_steps * np.mean(prices.lambda_p2p) * spec.bess.eta)


def window_data(
    spec: ProsumerSpec, data: ScenarioData, prices: PriceSchedule, start: int, H: int,
    state: DeviceState | None = None, terminal_value: float | None = None,
) -> dict:
    """Data dictionary for a model window starting at ``start``."""
    a = spec.agent_id
    state = state or initial_state(spec)
    return {
        "rdg_avail": _pad(data.rdg_avail[a], start, H),
        "load_p": _pad(data.load_p[a], start, H),
        "lambda_buy": _pad(prices.lambda_buy, start, H),
        "lambda_sell": _pad(prices.lambda_sell, start, H),
        "lambda_p2p": _pad(prices.lambda_p2p, start, H),
        "lambda_dso": float(prices.lambda_dso),
        "init.p_cdg": float(state.p_cdg_prev),
        "init.soc": float(state.soc_prev),
        "soc_value": soc_value(spec, prices) if terminal_value is None else terminal_value,
    }


@dataclass
class WorkflowRun:
    """Outcome of one pass of the four-stage workflow for one prosumer."""

    agent: str
    ir: ModelIR | None
    report: CorrectionReport
    schedule: ExpertSchedule | None = None
    status: str = "ok"
    tokens: int = 0  # no language model is involved in the deterministic backend

    @property
    def passed(self) -> bool:
        return self.report.passed and self.schedule is not None


def build_model(
    spec: ProsumerSpec, data: dict, prices: PriceSchedule | None = None,
    backend: GeneratorBackend | None = None, horizon: int = DEFAULT_HORIZON,
) -> tuple[ModelIR, CorrectionReport]:
    """Generate, validate/correct and integrate trading for one prosumer."""
    ir = generate_model(spec, backend, horizon)
    ir, report = validate_and_correct(ir, data)
    if not report.passed:
        return ir, report
    return integrate_trading(ir, prices), report


def run_workflow(
    spec: ProsumerSpec, data: ScenarioData, prices: PriceSchedule,
    backend: GeneratorBackend | None = None, horizon: int | None = None, start: int = 0,
) -> WorkflowRun:
    """Open-loop workflow over ``horizon`` steps (default: the whole window)."""
    H = horizon or data.horizon
    d = window_data(spec, data, prices, start, H)
    try:
        ir, report = build_model(spec, d, prices, backend, H)
    except Exception as exc:  # generator failures count as failed trials
        log.warning("workflow for %s failed at generation: %s", spec.agent_id, exc)
        return WorkflowRun(spec.agent_id, None, CorrectionReport(), status=f"generation: {exc}")
    if not report.passed:
        return WorkflowRun(spec.agent_id, ir, report, status="correction failed")
    try:
        sched, _ = solve_compiled(compile_ir(ir), d)
    except SolverError as exc:
        return WorkflowRun(spec.agent_id, ir, report, status=str(exc))
    return WorkflowRun(spec.agent_id, ir, report, sched)


class AgentPlanner:
    """Receding-horizon planner for one prosumer with a cached factorisation."""

    def __init__(
        self, spec: ProsumerSpec, data: ScenarioData, prices: PriceSchedule,
        backend: GeneratorBackend | None = None, horizon: int = DEFAULT_HORIZON,
    ):
        self.spec = spec
        self.data = data
        self.prices = prices
        self.horizon = horizon
        self.terminal_value = soc_value(spec, prices)
        d0 = window_data(spec, data, prices, 0, horizon, terminal_value=self.terminal_value)
        ir, self.report = build_model(spec, d0, prices, backend, horizon)
        if not self.report.passed:
            raise SolverError(f"model for {spec.agent_id} failed validation", "invalid")
        self.ir = ir
        self.model: CompiledModel = compile_ir(ir)
        self._warm = None

    def plan(self, t: int, state: DeviceState) -> ExpertSchedule:
        d = window_data(self.spec, self.data, self.prices, t, self.horizon, state, self.terminal_value)
        sched, self._warm = solve_compiled(self.model, d, self._warm)
        return sched


def plan_day(
    network: Network, prosumers: list[ProsumerSpec], data: ScenarioData, prices: PriceSchedule,
    backend: GeneratorBackend | None = None, horizon: int = DEFAULT_HORIZON,
    soc_init: float | None = None, dso: bool = True, max_rounds: int = MAX_ROUNDS,
) -> tuple[dict[str, ExpertSchedule], DsoReport]:
    """Closed-loop expert schedules for one day.

    Each step every agent solves its window from the current state, the first
    actions are projected, checked by the DSO against the AC power flow and
    corrected if needed, P2P positions are cleared and the state advances.
    """
    T = data.horizon
    planners = [AgentPlanner(p, data, prices, backend, horizon) for p in prosumers]
    Y = build_admittance(network)
    v0 = network.v_base
    states = [initial_state(p, v0[p.bus_id], soc_init) for p in prosumers]
    n = len(prosumers)
    acts_out = np.zeros((n, T, 5))
    p2p_out = np.zeros((n, T))
    cost_out = np.zeros(n)
    kkt_max = 0.0
    report = DsoReport()
    for t in range(T):
        inputs = [(float(data.rdg_avail[p.agent_id][t]), float(data.load_p[p.agent_id][t]),
                   float(data.load_q[p.agent_id][t])) for p in prosumers]
        acts = []
        for i, (pl, p, s) in enumerate(zip(planners, prosumers, states)):
            sched = pl.plan(t, s)
            kkt_max = max(kkt_max, sched.kkt.get("max", 0.0))
            acts.append(project_action(sched.action(0), p, s, inputs[i][0], inputs[i][1]))
        if dso:
            _, _, viol0, _ = dso_correct_step(network, prosumers, states, acts, inputs, Y, max_rounds=0)
            acts, v, viol, rounds = dso_correct_step(network, prosumers, states, acts, inputs, Y, max_rounds)
            report.violations_before += int(np.sum(viol0 > 0))
            report.violations_after += int(np.sum(viol > 0))
            if rounds:
                report.corrected_steps.append(t)
                report.rounds[t] = rounds
            for b in np.flatnonzero(viol > 0):
                report.residual_violations.append((t, int(b), float(viol[b])))
        else:
            v = None
        p_ex = np.array([grid_exchange(a, inp[1], inp[2], 0.0)[0] for a, inp in zip(acts, inputs)])
        trades = clear_p2p(-p_ex, prices.at(t).p2p)
        for i, (p, a) in enumerate(zip(prosumers, acts)):
            acts_out[i, t] = a.to_array()
            p2p_out[i, t] = trades[i]
            _, _, p_grid = grid_exchange(a, inputs[i][1], inputs[i][2], trades[i])
            cost_out[i] += operational_cost(p, a, p_grid, trades[i], prices.at(t)).total
            vb = float(v[p.bus_id]) if v is not None else float(v0[p.bus_id])
            states[i] = advance_state(states[i], a, p, float(trades[i]), vb)
    schedules = {
        p.agent_id: ExpertSchedule(p.agent_id, acts_out[i], p2p_out[i], float(cost_out[i]),
                                   {"max": kkt_max})
        for i, p in enumerate(prosumers)
    }
    return schedules, report


def expert_action(agent: str, t: int, schedule: ExpertSchedule) -> Action:
    """The expert's (Dirac) action for ``agent`` at step ``t``."""
    if schedule.agent and schedule.agent != agent:
        raise DataError(f"schedule belongs to {schedule.agent}, not {agent}")
    return schedule.action(t)


class ExpertLibrary:
    """Per-day expert schedules for a scenario, cached on disk as JSON."""

    def __init__(self, scenario: Scenario, backend: GeneratorBackend | None = None,
                 horizon: int = DEFAULT_HORIZON, cache_dir=None, soc_init: float | None = None):
        self.scenario = scenario
        self.backend = backend
        self.horizon = horizon
        self.soc_init = soc_init
        if cache_dir is None and scenario.root is not None:
            cache_dir = Path(scenario.root) / "expert"
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._days: dict[int, dict[str, ExpertSchedule]] = {}
        self.reports: dict[int, DsoReport] = {}

    def _path(self, d: int) -> Path | None:
        return None if self.cache_dir is None else self.cache_dir / f"day_{d:02d}.json"

    def day(self, d: int) -> dict[str, ExpertSchedule]:
        if d in self._days:
            return self._days[d]
        path = self._path(d)
        if path is not None and path.exists():
            raw = json.loads(path.read_text())
            if raw.get("horizon") == self.horizon:
                scheds = {k: ExpertSchedule.from_dict(v) for k, v in raw["schedules"].items()}
                self._days[d] = scheds
                return scheds
        data, prices = self.scenario.day(d)
        scheds, report = plan_day(self.scenario.network, self.scenario.prosumers, data, prices,
                                  self.backend, self.horizon, self.soc_init)
        self._days[d] = scheds
        self.reports[d] = report
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            payload = {"day": d, "horizon": self.horizon, "dso": report.to_dict(),
                       "schedules": {k: s.to_dict() for k, s in scheds.items()}}
            path.write_text(json.dumps(payload, sort_keys=True))
        return scheds

    def action(self, d: int, agent: str, t: int) -> Action:
        return expert_action(agent, t, self.day(d)[agent])


@dataclass
class ExpertPolicy:
    """Replays expert schedules as a policy for ``evaluate_rollout``."""

    schedules: dict[str, ExpertSchedule]
    agents: list[str] = field(default_factory=list)

    def __call__(self, obs, t: int) -> list[Action]:
        return [self.schedules[a].action(t) for a in self.agents]
