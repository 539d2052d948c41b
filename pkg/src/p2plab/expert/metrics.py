"""Similarity of workflow schedules to a reference: deviation, gap, accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..market.scenario import PriceSchedule, ScenarioData
from ..prosumer import Action, ProsumerSpec, grid_exchange, operational_cost
from .schedule import ExpertSchedule

GAP_FLOOR = 1e-3
TRIAL_HORIZON = 24  # six hours keeps the dense trial solves cheap


def schedule_cost(spec: ProsumerSpec, schedule: ExpertSchedule, data: ScenarioData,
                  prices: PriceSchedule, start: int = 0) -> float:
    """Operating cost of a single-prosumer schedule with its own P2P quantities."""
    a_id = spec.agent_id
    total = 0.0
    for t in range(schedule.horizon):
        tt = start + t
        a = Action.from_array(schedule.actions[t])
        p2p = float(schedule.p_p2p[t])
        _, _, p_grid = grid_exchange(a, float(data.load_p[a_id][tt]), float(data.load_q[a_id][tt]), p2p)
        total += operational_cost(spec, a, p_grid, p2p, prices.at(tt)).total
    return total


def deviation(cost: float, ref_cost: float) -> float:
    """|C - C_ref| / |C_ref| in percent."""
    if ref_cost == 0:
        raise DataError("reference cost is zero; deviation is undefined")
    return abs(cost - ref_cost) / abs(ref_cost) * 100.0


def action_gap(actions, ref_actions, gap_floor: float = GAP_FLOOR) -> float:
    """Mean relative action difference in percent over reference entries above the floor."""
    a = np.asarray(actions, dtype=float)
    r = np.asarray(ref_actions, dtype=float)
    if a.shape != r.shape:
        raise DataError(f"action arrays differ in shape: {a.shape} vs {r.shape}")
    mask = np.abs(r) > gap_floor
    if not mask.any():
        return 0.0
    return float(np.mean(np.abs(a[mask] - r[mask]) / np.abs(r[mask])) * 100.0)


@dataclass
class Trial:
    """One workflow run reduced to what the metrics need."""

    agent: str
    passed: bool
    corrections: int
    cost: float | None = None
    actions: np.ndarray | None = None


def workflow_metrics(trials: list[Trial], reference: dict[str, Trial], gap_floor: float = GAP_FLOOR) -> dict:
    """Pass rate, mean deviation/gap/accuracy over passed trials, mean corrections."""
    if not trials:
        raise DataError("no trials to score")
    devs, gaps = [], []
    for tr in trials:
        if not tr.passed:
            continue
        ref = reference[tr.agent]
        devs.append(deviation(tr.cost, ref.cost))
        gaps.append(action_gap(tr.actions, ref.actions, gap_floor))
    dev = float(np.mean(devs)) if devs else float("nan")
    gap = float(np.mean(gaps)) if gaps else float("nan")
    return {
        "pass_rate": 100.0 * sum(t.passed for t in trials) / len(trials),
        "deviation": dev,
        "gap": gap,
        "accuracy": 100.0 - (gap + dev) / 2.0,
        "mean_corrections": float(np.mean([t.corrections for t in trials])),
        "n_trials": len(trials),
    }


def run_trials(scenario, day: int = 0, backend=None, n_trials: int = 1, horizon: int | None = TRIAL_HORIZON):
    """Workflow trials for every prosumer of a scenario day plus the reference runs.

    Each trial solves the prosumer's whole day open loop; the reference is the
    independent hand-written model over the same data.
    """
    from .pipeline import run_workflow, window_data
    from .reference import reference_schedule

    data, prices = scenario.day(day)
    H = horizon or data.horizon
    trials, refs = [], {}
    for spec in scenario.prosumers:
        for _ in range(n_trials):
            run = run_workflow(spec, data, prices, backend, H)
            cost = schedule_cost(spec, run.schedule, data, prices) if run.passed else None
            acts = run.schedule.actions if run.passed else None
            trials.append(Trial(spec.agent_id, run.passed, run.report.iterations, cost, acts))
        ref = reference_schedule(spec, window_data(spec, data, prices, 0, H), H)
        refs[spec.agent_id] = Trial(spec.agent_id, True, 0, schedule_cost(spec, ref, data, prices), ref.actions)
    return trials, refs
