"""Dec-POMDP market environment with embedded AC power flow."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import DivergenceError
from ..netmodel import Network, ac_power_flow, build_admittance, voltage_violation
from ..prosumer import (
    ACTION_DIM,
    Action,
    CostBreakdown,
    DeviceState,
    ProsumerSpec,
    advance_state,
    grid_exchange,
    initial_state,
    net_export,
    operational_cost,
    project_action,
)
from .scenario import PriceSchedule, ScenarioData

OBS_DIM = 9
OBS_FIELDS = ("t_norm", "lambda_buy", "lambda_sell", "rdg_avail", "load_p",
              "p_cdg_prev", "soc_prev", "p_p2p_prev", "v_prev")


@dataclass(frozen=True)
class RewardConfig:
    delta: float = -0.001
    a_pen: float = -1.0
    c_pen: float = -1000.0
    terminate_on_violation: bool = True
    violation_threshold: float = 0.02
    divergence_penalty: float = -100.0

    def __post_init__(self):
        if self.delta >= 0:
            raise ValueError("delta must be negative (reward maximisation)")
        if self.c_pen >= 0:
            raise ValueError("c_pen must be negative (reward maximisation)")


@dataclass
class StepResult:
    next_obs: list[np.ndarray]
    reward: float
    done: bool
    info: dict = field(default_factory=dict)

    @property
    def rewards(self) -> list[float]:
        # one shared global reward per agent
        return [self.reward] * len(self.next_obs)


def clear_p2p(desired, lambda_p2p_t: float | None = None) -> np.ndarray:
    """Pro-rata clearing of desired net positions (+ buy, - sell).

    The short side is served in full and the long side is scaled down so
    that trades sum to zero. With no counterparty every trade is zero.
    """
    x = np.asarray(desired, dtype=float)
    buy = np.where(x > 0, x, 0.0)
    sell = np.where(x < 0, -x, 0.0)
    tb, ts = buy.sum(), sell.sum()
    if tb <= 0.0 or ts <= 0.0:
        return np.zeros_like(x)
    if tb >= ts:
        buy = buy * (ts / tb)
        tb = buy.sum()
    else:
        sell = sell * (tb / ts)
        ts = sell.sum()
    trades = buy - sell
    # push residual rounding error onto the largest trade so the sum is exactly balanced
    resid = trades.sum()
    if resid != 0.0:
        k = int(np.argmax(np.abs(trades)))
        trades[k] -= resid
    return trades


def build_observation(t: int, horizon: int, price, rdg: float, load: float, state: DeviceState) -> np.ndarray:
    return np.array(
        [t / horizon, price.buy, price.sell, rdg, load,
         state.p_cdg_prev, state.soc_prev, state.p_p2p_prev, state.v_prev]
    )


class MarketEnv:
    """One trading day of the multi-prosumer market.

    ``step`` accepts device-unit actions (possibly infeasible); they are
    projected per agent before entering the balance, market and power flow.
    """

    def __init__(
        self,
        network: Network,
        prosumers: list[ProsumerSpec],
        data: ScenarioData,
        prices: PriceSchedule,
        reward: RewardConfig | None = None,
        soc_init: float | None = None,
        obs_noise: float = 0.0,
    ):
        self.network = network
        self.prosumers = list(prosumers)
        self.data = data
        self.prices = prices
        self.reward_cfg = reward or RewardConfig()
        self.soc_init = soc_init
        self.obs_noise = obs_noise
        self.horizon = data.horizon
        if len(prices) < self.horizon:
            raise ValueError("price schedule shorter than scenario horizon")
        self.Y = build_admittance(network)
        self.agent_ids = [p.agent_id for p in self.prosumers]
        self.bus_of = np.array([p.bus_id for p in self.prosumers])
        self._load_p = np.stack([data.load_p[a] for a in self.agent_ids])
        self._load_q = np.stack([data.load_q[a] for a in self.agent_ids])
        self._rdg = np.stack([data.rdg_avail[a] for a in self.agent_ids])
        self.t = 0
        self.states: list[DeviceState] = []
        self._rng = np.random.default_rng(0)
        self.done = True

    @property
    def n_agents(self) -> int:
        return len(self.prosumers)

    def with_reward(self, **changes) -> "MarketEnv":
        env = copy.copy(self)
        env.reward_cfg = replace(self.reward_cfg, **changes)
        env.states = list(self.states)
        return env

    def observe(self, i: int) -> np.ndarray:
        t = min(self.t, self.horizon - 1)
        obs = build_observation(
            self.t, self.horizon, self.prices.at(t),
            float(self._rdg[i, t]), float(self._load_p[i, t]), self.states[i],
        )
        if self.obs_noise > 0:
            obs[3:5] += self.obs_noise * self._rng.standard_normal(2)
        return obs

    def observations(self) -> list[np.ndarray]:
        return [self.observe(i) for i in range(self.n_agents)]

    def global_state(self) -> np.ndarray:
        return np.stack(self.observations())

    def reset(self, seed: int | None = None) -> list[np.ndarray]:
        self._rng = np.random.default_rng(seed)
        self.t = 0
        v0 = self.network.v_base
        self.states = [initial_state(p, v0[p.bus_id], self.soc_init) for p in self.prosumers]
        self.done = False
        return self.observations()

    def current_inputs(self, i: int) -> tuple[float, float, float]:
        """(rdg_avail, load_p, load_q) of agent i at the current step."""
        t = self.t
        return float(self._rdg[i, t]), float(self._load_p[i, t]), float(self._load_q[i, t])

    def project(self, joint_action) -> list[Action]:
        out = []
        for i, (spec, raw) in enumerate(zip(self.prosumers, joint_action)):
            rdg, load_p, _ = self.current_inputs(i)
            out.append(project_action(raw, spec, self.states[i], rdg, load_p))
        return out

    def bus_injections(self, actions) -> tuple[np.ndarray, np.ndarray]:
        n = self.network.n_bus
        p = np.zeros(n)
        q = np.zeros(n)
        for i, a in enumerate(actions):
            _, load_p, load_q = self.current_inputs(i)
            p_ex, q_ex = net_export(a, load_p, load_q)
            p[self.bus_of[i]] += p_ex
            q[self.bus_of[i]] += q_ex
        return p, q

    def step(self, joint_action) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if len(joint_action) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(joint_action)}")
        cfg = self.reward_cfg
        t = self.t
        price = self.prices.at(t)
        actions = self.project(joint_action)

        p_ex = np.empty(self.n_agents)
        for i, a in enumerate(actions):
            _, load_p, load_q = self.current_inputs(i)
            p_ex[i] = net_export(a, load_p, load_q)[0]
        trades = clear_p2p(-p_ex, price.p2p)

        costs: list[CostBreakdown] = []
        p_grid = np.empty(self.n_agents)
        for i, (spec, a) in enumerate(zip(self.prosumers, actions)):
            _, load_p, load_q = self.current_inputs(i)
            _, _, p_grid[i] = grid_exchange(a, load_p, load_q, trades[i])
            costs.append(operational_cost(spec, a, p_grid[i], trades[i], price))
        total_cost = float(sum(c.total for c in costs))

        p_inj, q_inj = self.bus_injections(actions)
        info = {"t": t, "actions": actions, "costs": costs, "total_cost": total_cost,
                "p2p": trades, "p_grid": p_grid, "diverged": False}
        try:
            sol = ac_power_flow(self.network, p_inj, q_inj, Y=self.Y)
        except DivergenceError as exc:
            info.update(diverged=True, residual=exc.residual, violation=None, v=None, violated=True)
            self.done = True
            self.t += 1
            reward = cfg.delta * total_cost + cfg.divergence_penalty
            return StepResult(self.observations(), float(reward), True, info)

        viol = voltage_violation(sol.v, self.network)
        mask = viol > 0
        r_cost = cfg.delta * total_cost
        r_pen = float(np.sum(cfg.a_pen + cfg.c_pen * viol[mask]))
        reward = r_cost + r_pen
        info.update(v=sol.v, violation=viol, violated=bool(mask.any()), r_cost=r_cost, r_pen=r_pen)

        self.states = [
            advance_state(s, a, spec, float(trades[i]), float(sol.v[spec.bus_id]))
            for i, (s, a, spec) in enumerate(zip(self.states, actions, self.prosumers))
        ]
        self.t += 1
        terminated = cfg.terminate_on_violation and bool(np.any(viol > cfg.violation_threshold))
        self.done = self.t >= self.horizon or terminated
        info["terminated"] = terminated
        return StepResult(self.observations(), float(reward), self.done, info)


class ActionScaler:
    """Squash unbounded policy outputs onto per-agent device ranges.

    ``u -> lo + (tanh(u) + 1) / 2 * (hi - lo)`` where the static range is the
    device box widened by ``margin`` of its width on both sides, so the
    projection can still reach the exact bounds.
    """

    def __init__(self, lo, hi, margin: float = 0.05):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        width = hi - lo
        fixed = width <= 0
        self.lo = np.where(fixed, lo - 1.0, lo - margin * width)
        self.hi = np.where(fixed, hi + 1.0, hi + margin * width)
        self.fixed = fixed

    @classmethod
    def for_prosumer(cls, spec: ProsumerSpec, peak_load: float, margin: float = 0.05) -> "ActionScaler":
        lo = np.zeros(ACTION_DIM)
        hi = np.zeros(ACTION_DIM)
        if spec.cdg is not None:
            lo[0], hi[0] = spec.cdg.p_min, spec.cdg.p_max
        if spec.rdg is not None:
            hi[1] = spec.rdg.s_max
            lo[2], hi[2] = -spec.rdg.s_max, spec.rdg.s_max
        if spec.bess is not None:
            lo[3], hi[3] = spec.bess.p_min, spec.bess.p_max
        if spec.cl is not None:
            hi[4] = spec.cl.alpha * peak_load
        return cls(lo, hi, margin)

    def to_unit(self, a) -> np.ndarray:
        """Device units -> [-1, 1]."""
        return 2.0 * (np.asarray(a, float) - self.lo) / (self.hi - self.lo) - 1.0

    def from_unit(self, y) -> np.ndarray:
        return self.lo + 0.5 * (np.asarray(y, float) + 1.0) * (self.hi - self.lo)

    def squash(self, u) -> np.ndarray:
        return self.from_unit(np.tanh(u))

    def unsquash(self, a, clip: float = 1.0 - 1e-6) -> np.ndarray:
        y = np.clip(self.to_unit(a), -clip, clip)
        y = np.where(self.fixed, 0.0, y)
        return np.arctanh(y)


def make_scalers(prosumers, data: ScenarioData, margin: float = 0.05) -> list[ActionScaler]:
    return [ActionScaler.for_prosumer(p, float(np.max(data.load_p[p.agent_id])), margin) for p in prosumers]


def evaluate_rollout(policy, env: MarketEnv, seed: int = 0) -> dict:
    """Run one full day with a deterministic policy.

    ``policy(obs_list, t)`` returns one device-unit Action per agent.
    Voltage-violation termination is disabled so every (bus, t) is scored.
    """
    env = env.with_reward(terminate_on_violation=False)
    obs = env.reset(seed)
    total_cost = 0.0
    reward = 0.0
    viol_sum = 0.0
    viol_count = 0
    per_step_costs = []
    actions = []
    diverged = False
    while not env.done:
        t = env.t
        joint = policy(obs, t)
        res = env.step(joint)
        obs = res.next_obs
        step_cost = [c.total for c in res.info["costs"]]
        per_step_costs.append(step_cost)
        actions.append([a.to_array() for a in res.info["actions"]])
        total_cost += res.info["total_cost"]
        reward += res.reward
        if res.info["diverged"]:
            diverged = True
            viol_sum += float(env.network.n_bus)  # unsolvable step scored as 1 p.u. per bus
            viol_count += env.network.n_bus
        else:
            viol_sum += float(np.sum(res.info["violation"]))
            viol_count += len(res.info["violation"])
    return {
        "mean_cost": total_cost,
        "violation_rate": viol_sum / max(viol_count, 1),
        "reward": reward,
        "step_costs": np.array(per_step_costs),
        "actions": np.array(actions),
        "diverged": diverged,
    }
