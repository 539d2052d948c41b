"""DSO security verification: global power flow check and minimal correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError
from ..market.scenario import ScenarioData
from ..netmodel import Network, ac_power_flow, build_admittance, lindistflow_sensitivity, voltage_violation
from ..prosumer import (
    ACTION_DIM,
    Action,
    ProsumerSpec,
    action_bounds,
    advance_state,
    device_mask,
    initial_state,
    net_export,
    project_action,
)
from .qp import solve_qp
from .schedule import ExpertSchedule

MAX_ROUNDS = 3
VOLTAGE_MARGIN = 1e-3
SLACK_WEIGHT = 1e4
# injection sign of each action component: p_cdg, p_rdg, q_rdg, p_bess, p_cl
P_SIGN = np.array([1.0, 1.0, 0.0, -1.0, 1.0])
Q_SIGN = np.array([0.0, 0.0, 1.0, 0.0, 0.0])


@dataclass
class DsoReport:
    corrected_steps: list[int] = field(default_factory=list)
    rounds: dict[int, int] = field(default_factory=dict)
    residual_violations: list[tuple[int, int, float]] = field(default_factory=list)
    violations_before: int = 0
    violations_after: int = 0

    def to_dict(self) -> dict:
        return {
            "corrected_steps": self.corrected_steps,
            "rounds": {str(k): v for k, v in self.rounds.items()},
            "residual_violations": [list(r) for r in self.residual_violations],
            "violations_before": self.violations_before,
            "violations_after": self.violations_after,
        }


def adjustment_qp(v, network: Network, bus_of, actions, lo, hi, masks, sens, margin=VOLTAGE_MARGIN):
    """Minimum-norm setpoint change that restores linearised voltage bounds.

    Returns an (n_agents, 5) array of changes. Voltage rows carry penalised
    slacks so the program is always feasible.
    """
    n_ag = len(actions)
    nb = network.n_bus
    cols = [(i, k) for i in range(n_ag) for k in range(ACTION_DIM) if masks[i][k]]
    nd = len(cols)
    n = nd + 2 * nb
    P = np.zeros((n, n))
    P[:nd, :nd] = 2.0 * np.eye(nd)
    q = np.zeros(n)
    q[nd:] = SLACK_WEIGHT
    # dV = S_p @ dp_inj + S_q @ dq_inj
    G = np.zeros((nb, nd))
    for c, (i, k) in enumerate(cols):
        b = bus_of[i]
        G[:, c] = sens.dv_dp[:, b] * P_SIGN[k] + sens.dv_dq[:, b] * Q_SIGN[k]
    I = np.eye(nb)
    Z = np.zeros((nb, nb))
    A_v_lo = np.hstack([G, I, Z])  # v + G d + s_lo >= v_min + margin
    A_v_hi = np.hstack([G, Z, -I])  # v + G d - s_hi <= v_max - margin
    A_box = np.hstack([np.eye(nd), np.zeros((nd, 2 * nb))])
    A_s = np.hstack([np.zeros((2 * nb, nd)), np.eye(2 * nb)])
    A = np.vstack([A_v_lo, A_v_hi, A_box, A_s])
    d_lo = np.array([lo[i][k] - actions[i][k] for i, k in cols])
    d_hi = np.array([hi[i][k] - actions[i][k] for i, k in cols])
    l = np.concatenate([network.v_min + margin - v, np.full(nb, -np.inf), np.minimum(d_lo, 0.0), np.zeros(2 * nb)])
    u = np.concatenate([np.full(nb, np.inf), network.v_max - margin - v, np.maximum(d_hi, 0.0), np.full(2 * nb, np.inf)])
    res = solve_qp(P, q, A, l, u)
    delta = np.zeros((n_ag, ACTION_DIM))
    if res.status not in ("solved", "max_iter"):
        return delta
    for c, (i, k) in enumerate(cols):
        delta[i, k] = res.x[c]
    return delta


def _count(viol) -> int:
    return int(np.sum(viol > 0))


def dso_correct_step(network, prosumers, states, actions, inputs, Y=None, max_rounds=MAX_ROUNDS):
    """Check one step's power flow and correct device setpoints if needed.

    ``inputs[i]`` is (rdg_avail, load_p, load_q). Returns (actions, v,
    violation, rounds). The returned violation count never exceeds the input's.
    """
    if Y is None:
        Y = build_admittance(network)
    bus_of = [p.bus_id for p in prosumers]

    def flow(acts):
        p = np.zeros(network.n_bus)
        qv = np.zeros(network.n_bus)
        for i, a in enumerate(acts):
            pe, qe = net_export(a, inputs[i][1], inputs[i][2])
            p[bus_of[i]] += pe
            qv[bus_of[i]] += qe
        try:
            sol = ac_power_flow(network, p, qv, Y=Y)
        except DivergenceError:
            return None, np.full(network.n_bus, np.inf)
        return sol.v, voltage_violation(sol.v, network)

    v, viol = flow(actions)
    best = (actions, v, viol)
    if v is None or _count(viol) == 0:
        return actions, v, viol, 0
    bounds = [action_bounds(p, s, inp[0], inp[1]) for p, s, inp in zip(prosumers, states, inputs)]
    lo = [b[0] for b in bounds]
    hi = [b[1] for b in bounds]
    masks = [device_mask(p) for p in prosumers]
    cur = actions
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        sens = lindistflow_sensitivity(network, v=v)
        arr = [a.to_array() for a in cur]
        delta = adjustment_qp(v, network, bus_of, arr, lo, hi, masks, sens,
                              margin=VOLTAGE_MARGIN * rounds)
        cur = [
            project_action(Action.from_array(arr[i] + delta[i]), p, s, inp[0], inp[1])
            for i, (p, s, inp) in enumerate(zip(prosumers, states, inputs))
        ]
        v, viol = flow(cur)
        if v is None:
            break
        key = (_count(viol), float(np.sum(viol)))
        if key < (_count(best[2]), float(np.sum(best[2]))):
            best = (cur, v, viol)
        if _count(viol) == 0:
            break
    return best[0], best[1], best[2], rounds


def dso_verify(
    schedules: dict[str, ExpertSchedule],
    network: Network,
    prosumers: list[ProsumerSpec],
    data: ScenarioData,
    soc_init: float | None = None,
    max_rounds: int = MAX_ROUNDS,
):
    """Verify and correct all schedules step by step, propagating device state.

    P2P quantities are left untouched; only device setpoints move.
    """
    T = min(s.horizon for s in schedules.values())
    Y = build_admittance(network)
    v0 = network.v_base
    states = [initial_state(p, v0[p.bus_id], soc_init) for p in prosumers]
    out = {k: ExpertSchedule(s.agent, s.actions.copy(), s.p_p2p.copy(), s.objective_value, dict(s.kkt))
           for k, s in schedules.items()}
    report = DsoReport()
    for t in range(T):
        inputs = [(float(data.rdg_avail[p.agent_id][t]), float(data.load_p[p.agent_id][t]),
                   float(data.load_q[p.agent_id][t])) for p in prosumers]
        acts = [
            project_action(schedules[p.agent_id].action(t), p, s, inp[0], inp[1])
            for p, s, inp in zip(prosumers, states, inputs)
        ]
        # violations of the schedule as submitted (after feasibility projection)
        _, _, viol0, _ = dso_correct_step(network, prosumers, states, acts, inputs, Y, max_rounds=0)
        acts, v, viol, rounds = dso_correct_step(network, prosumers, states, acts, inputs, Y, max_rounds)
        report.violations_before += _count(viol0)
        report.violations_after += _count(viol)
        if rounds:
            report.corrected_steps.append(t)
            report.rounds[t] = rounds
        for b in np.flatnonzero(viol > 0):
            report.residual_violations.append((t, int(b), float(viol[b])))
        for i, p in enumerate(prosumers):
            out[p.agent_id].actions[t] = acts[i].to_array()
            vb = float(v[p.bus_id]) if v is not None else float(v0[p.bus_id])
            states[i] = advance_state(states[i], acts[i], p, float(out[p.agent_id].p_p2p[t]), vb)
    return out, report
