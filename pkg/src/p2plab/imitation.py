"""Expert-constrained multi-agent imitation learning.

Actors are diagonal Gaussians over raw (pre-tanh) actions. Each agent's
policy is pushed towards higher min-Q while a Lagrange multiplier keeps the
Wasserstein-2 distance between the policy and the expert's Dirac action
near a tolerance epsilon. Critics are centralised; actors see their own
observation only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .errors import ConfigError, NumericalError
from .market.env import OBS_DIM, ActionScaler, MarketEnv, RewardConfig, evaluate_rollout, make_scalers
from .market.scenario import Scenario
from .nets import Adam, CriticBundle, DiffAttnConfig, GaussianPolicy, polyak_update, tile_input
from .prosumer import ACTION_DIM, Action, device_mask

log = logging.getLogger(__name__)

PRIORITY_FLOOR = 1e-6
DESK_CONFIG = Path(__file__).parent / "configs" / "desk.toml"


# ---------------------------------------------------------------- configuration


@dataclass
class HyperParams:
    lr: float = 1e-4
    episodes: int = 200
    gamma: float = 0.99
    buffer_size: int = 100_000
    batch: int = 128
    lambda_init: float = 0.02
    epsilon: float = 0.05
    k: float = 0.8
    tau: float = 0.005
    per_alpha: float = 0.6
    eval_every: int = 10
    lambda_lr: float = 1e-3
    epsilon_hold: float = 0.4  # fraction of episodes at the initial epsilon
    epsilon_growth: float = 3.0  # epsilon reaches this multiple by the last episode
    update_every: int = 8  # environment steps between update rounds
    updates_per_round: int = 1
    warmup_steps: int = 256
    hidden: int = 64
    critic_heads: int = 4
    critic_d_model: int = 64
    critic_d_k: int = 8
    critic_xi_init: float = 0.2
    imitation: bool = True  # False gives the lambda = 0 ablation
    terminate_on_violation: bool = True
    train_days: list = field(default_factory=list)  # empty: the scenario's train split

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 < self.k <= 1.0:
            raise ConfigError("k must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.lambda_init < 0:
            raise ConfigError("lambda_init must be non-negative")
        if self.batch <= 0 or self.buffer_size <= 0 or self.episodes < 0:
            raise ConfigError("batch, buffer_size and episodes must be positive")
        if self.critic_heads > 0 and self.critic_d_model % 2 != 0:
            raise ConfigError("critic.d_model must be even")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_TOML_ALIASES = {"critic.heads": "critic_heads", "critic.d_model": "critic_d_model",
                 "critic.d_k": "critic_d_k", "critic.xi_init": "critic_xi_init"}


def load_config(path=None, overrides: dict | None = None) -> HyperParams:
    """HyperParams from a TOML file (flat keys or [critic]/[train] tables)."""
    raw: dict = {}
    if path is not None:
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for key, val in doc.items():
            if isinstance(val, dict):
                for sub, v in val.items():
                    name = f"{key}.{sub}"
                    raw[_TOML_ALIASES.get(name, sub if key != "critic" else f"critic_{sub}")] = v
            else:
                raw[key] = val
    raw.update(overrides or {})
    known = {f.name for f in fields(HyperParams)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return HyperParams(**raw)


def epsilon_at(hp: HyperParams, episode: int) -> float:
    """Constant for the first ``epsilon_hold`` share of episodes, then a linear ramp."""
    total = max(hp.episodes, 1)
    hold = hp.epsilon_hold * total
    if episode < hold or total - hold <= 1:
        return hp.epsilon
    frac = min((episode - hold) / (total - 1 - hold), 1.0)
    return hp.epsilon * (1.0 + (hp.epsilon_growth - 1.0) * frac)


# ---------------------------------------------------------------- W2


def w2_gaussian_dirac(mu, sigma, a_llm, mask=None) -> float:
    """sqrt(sum_d (mu_d - a_d)^2 + sigma_d^2) between N(mu, diag sigma^2) and a point mass."""
    mu, sigma, a = (np.asarray(x, dtype=float) for x in (mu, sigma, a_llm))
    if mu.shape != sigma.shape or mu.shape != a.shape:
        raise ValueError(f"dimension mismatch: {mu.shape}, {sigma.shape}, {a.shape}")
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    terms = (mu - a) ** 2 + sigma**2
    if mask is not None:
        terms = terms * np.asarray(mask, dtype=float)
    return float(np.sqrt(np.sum(terms, axis=-1)))


def w2_tensor(mu: ad.Tensor, sigma: ad.Tensor, a_llm: ad.Tensor, mask: ad.Tensor) -> ad.Tensor:
    """Batched W2 over the last axis; result has the leading shape."""
    diff = ad.sub(mu, a_llm)
    terms = ad.mul(ad.add(ad.square(diff), ad.square(sigma)), mask)
    return ad.sqrt(ad.add_scalar(ad.sum_(terms, axis=-1), 1e-12))


# ---------------------------------------------------------------- replay


class SumTree:
    """Binary sum tree over ``capacity`` leaves for proportional sampling."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.capacity = capacity
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def update(self, idx, priority) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        pr = np.broadcast_to(np.asarray(priority, dtype=float), idx.shape)
        for i, p in zip(idx, pr):
            node = i + self.size
            self.tree[node] = p
            node //= 2
            while node >= 1:
                self.tree[node] = self.tree[2 * node] + self.tree[2 * node + 1]
                node //= 2

    def get(self, idx) -> np.ndarray:
        return self.tree[np.asarray(idx) + self.size]

    def find(self, values: np.ndarray) -> np.ndarray:
        """Leaf index whose cumulative range contains each value."""
        v = np.array(values, dtype=float)
        node = np.ones(len(v), dtype=int)
        while node[0] < self.size:
            left = 2 * node
            lv = self.tree[left]
            go_right = v >= lv
            v = np.where(go_right, v - lv, v)
            node = np.where(go_right, left + 1, left)
        return node - self.size


@dataclass
class Transition:
    state: np.ndarray  # (n, obs)
    action: np.ndarray  # (n, act) normalised to [-1, 1]
    reward: float
    next_state: np.ndarray
    expert: np.ndarray  # (n, act) raw-space expert action
    done: bool = False
    violation: bool = False


class ReplayBuffer:
    """Ring buffer with sum-tree priorities."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int = OBS_DIM, act_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.s = np.zeros((capacity, n_agents, obs_dim))
        self.a = np.zeros((capacity, n_agents, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, n_agents, obs_dim))
        self.e = np.zeros((capacity, n_agents, act_dim))
        self.d = np.zeros(capacity)
        self.tree = SumTree(capacity)
        self.pos = 0
        self.count = 0
        self.max_priority = 1.0

    def __len__(self):
        return self.count

    def push(self, tr: Transition, priority: float) -> int:
        i = self.pos
        self.s[i], self.a[i], self.r[i] = tr.state, tr.action, tr.reward
        self.s2[i], self.e[i], self.d[i] = tr.next_state, tr.expert, float(tr.done)
        self.tree.update(i, priority)
        self.max_priority = max(self.max_priority, priority)
        self.pos = (self.pos + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        return i

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Priority-proportional indices, stratified over the total mass."""
        total = self.tree.total
        u = (np.arange(k) + rng.random(k)) * (total / k)
        idx = self.tree.find(np.minimum(u, np.nextafter(total, 0)))
        return np.minimum(idx, self.count - 1)

    def update_priorities(self, idx, priorities) -> None:
        self.tree.update(idx, priorities)
        self.max_priority = max(self.max_priority, float(np.max(priorities)))


def priority_of(loss_value: float, alpha: float) -> float:
    return float((abs(loss_value) + PRIORITY_FLOOR) ** alpha)


class DualReplay:
    """Normal-operation and constraint-violation buffers."""

    def __init__(self, capacity: int, n_agents: int, alpha: float = 0.6):
        self.normal = ReplayBuffer(capacity, n_agents)
        self.violation = ReplayBuffer(capacity, n_agents)
        self.alpha = alpha

    def __len__(self):
        return len(self.normal) + len(self.violation)


def per_push(replay: DualReplay, tr: Transition, loss_value: float) -> tuple[str, int]:
    buf_name = "violation" if tr.violation else "normal"
    buf = getattr(replay, buf_name)
    return buf_name, buf.push(tr, priority_of(loss_value, replay.alpha))


def split_counts(batch: int, k: float, n_normal: int, n_violation: int) -> tuple[int, int]:
    """ceil(k B) normal draws and the rest from the violation buffer."""
    if n_normal == 0 and n_violation == 0:
        raise ValueError("both replay buffers are empty")
    if n_violation == 0:
        return batch, 0
    if n_normal == 0:
        return 0, batch
    nn = min(batch, math.ceil(k * batch - 1e-12))
    return nn, batch - nn


def per_sample(replay: DualReplay, batch: int, k: float, rng: np.random.Generator) -> dict:
    nn, nv = split_counts(batch, k, len(replay.normal), len(replay.violation))
    parts = [(replay.normal, nn, 0), (replay.violation, nv, 1)]
    out = {key: [] for key in ("s", "a", "r", "s2", "e", "d", "buf", "idx")}
    for buf, m, tag in parts:
        if m == 0:
            continue
        idx = buf.sample(m, rng)
        out["s"].append(buf.s[idx])
        out["a"].append(buf.a[idx])
        out["r"].append(buf.r[idx])
        out["s2"].append(buf.s2[idx])
        out["e"].append(buf.e[idx])
        out["d"].append(buf.d[idx])
        out["buf"].append(np.full(m, tag))
        out["idx"].append(idx)
    return {key: np.concatenate(v) for key, v in out.items()}


# ---------------------------------------------------------------- observation scaling


@dataclass
class ObsNormalizer:
    offset: np.ndarray  # (n, obs)
    scale: np.ndarray

    @classmethod
    def for_scenario(cls, scenario: Scenario) -> "ObsNormalizer":
        n = len(scenario.prosumers)
        price_max = float(np.max(scenario.prices.lambda_buy))
        off = np.zeros((n, OBS_DIM))
        sc = np.ones((n, OBS_DIM))
        for i, p in enumerate(scenario.prosumers):
            peak = float(np.max(scenario.data.load_p[p.agent_id])) or 1.0
            s_max = p.rdg.s_max if p.rdg is not None else 1.0
            cdg = p.cdg.p_max if p.cdg is not None and p.cdg.p_max > 0 else 1.0
            off[i] = [0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 1.0]
            sc[i] = [0.5, price_max, price_max, s_max, peak, cdg, 0.5, peak, 0.05]
        return cls(off, sc)

    def __call__(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=float) - self.offset) / self.scale


# ---------------------------------------------------------------- agent state


class Learner:
    """Policies, critics, optimisers and multipliers of all agents."""

    def __init__(self, n_agents: int, masks: np.ndarray, hp: HyperParams, seed: int = 0):
        self.hp = hp
        self.n = n_agents
        rng = np.random.default_rng([seed, 1])
        attn = DiffAttnConfig(n_agents, hp.critic_d_model, hp.critic_heads, hp.critic_d_k, hp.critic_xi_init)
        self.policy = GaussianPolicy(n_agents, OBS_DIM, ACTION_DIM, (hp.hidden, hp.hidden), rng)
        self.critics = CriticBundle.create(n_agents, OBS_DIM, ACTION_DIM, attn, hp.hidden, rng)
        self.opt_pi = Adam(self.policy, hp.lr)
        self.opt_q = Adam(self.critics.q, hp.lr)
        self.opt_v = Adam(self.critics.v, hp.lr)
        self.lam = np.full(n_agents, hp.lambda_init if hp.imitation else 0.0)
        self.masks = np.asarray(masks, dtype=float)  # (n, act)
        self.rng = np.random.default_rng([seed, 2])

    # -- losses; each builds its own tape and returns (loss, grads, extras)

    def _critic_input(self, tape, s, a, L):
        return tile_input(tape, np.concatenate([s, a], axis=-1), L)

    def q_loss(self, batch: dict, gamma: float | None = None):
        gamma = self.hp.gamma if gamma is None else gamma
        n = self.n
        s = np.swapaxes(batch["s"], 0, 1)  # (n, B, obs)
        a = np.swapaxes(batch["a"], 0, 1)
        s2 = np.swapaxes(batch["s2"], 0, 1)
        tape = ad.Tape()
        vt = self.critics.v_target
        v_next = vt.forward(vt.bind(tape, False), tile_input(tape, s2, n)).data  # (n, B)
        y = td_target(batch["r"][None, :], batch["d"][None, :], v_next, gamma)
        P = self.critics.q.bind(tape, True)
        q = self.critics.q.forward(P, self._critic_input(tape, s, a, 2 * n))
        loss = regression_loss(q, np.concatenate([y, y], axis=0))
        g = ad.backward(tape, loss)
        td = np.abs(q.data[:n] - y).mean(axis=0)
        return loss.item(), self.critics.q.grads(P, g), {"td": td, "y": y, "q": q.data}

    def _sample_actions(self, tape, s, P=None):
        """Reparameterised raw actions; returns (u, mu, sigma, z) tensors."""
        P = P if P is not None else self.policy.bind(tape, False)
        mu, sigma = self.policy.forward(P, tape.const(s))
        z = self.rng.standard_normal(mu.shape)
        u = ad.add(mu, ad.mul(sigma, tape.const(z)))
        return u, mu, sigma

    def v_loss(self, batch: dict):
        n = self.n
        s = np.swapaxes(batch["s"], 0, 1)
        tape = ad.Tape()
        u, _, _ = self._sample_actions(tape, s)
        a_new = np.tanh(u.data)
        qv = self.critics.q.forward(self.critics.q.bind(tape, False), self._critic_input(tape, s, a_new, 2 * n)).data
        target = np.minimum(qv[:n], qv[n:])
        P = self.critics.v.bind(tape, True)
        v = self.critics.v.forward(P, tile_input(tape, s, n))
        loss = ad.scale(regression_loss(v, target), 2.0)
        g = ad.backward(tape, loss)
        return loss.item(), self.critics.v.grads(P, g), {"v": v.data, "target": target}

    def actor_loss(self, batch: dict, lam=None, epsilon: float | None = None, noise=None, others=None):
        """Mean over the batch of -min_z Q + lambda (W2 - eps), summed over agents.

        Each agent's critic sees that agent's fresh action with gradient and
        the other agents' fresh actions as constants (``others`` pins those
        constants, shape (n, B, act), for finite-difference checks).
        """
        n = self.n
        lam = self.lam if lam is None else np.asarray(lam, dtype=float)
        epsilon = self.hp.epsilon if epsilon is None else epsilon
        s = np.swapaxes(batch["s"], 0, 1)
        e = np.swapaxes(batch["e"], 0, 1)
        B = s.shape[1]
        tape = ad.Tape()
        P = self.policy.bind(tape, True)
        mu, sigma = self.policy.forward(P, tape.const(s))
        z = self.rng.standard_normal(mu.shape) if noise is None else noise
        u = ad.add(mu, ad.mul(sigma, tape.const(z)))
        a = ad.tanh(u)  # (n, B, act)
        L = 2 * n
        own = np.zeros((L, n, 1, 1))
        own[np.arange(L), np.arange(L) % n] = 1.0
        own = np.broadcast_to(own, (L, n, B, ACTION_DIM))
        a_live = ad.mul(ad.broadcast_to(a, (L, n, B, ACTION_DIM)), ad.Tensor(own, tape))
        fixed = a.data if others is None else np.asarray(others, dtype=float)
        a_mix = ad.add(a_live, tape.const((1.0 - own) * fixed[None]))
        s_l = tape.const(np.broadcast_to(s, (L,) + s.shape))
        q = self.critics.q.forward(self.critics.q.bind(tape, False), ad.concat([s_l, a_mix], axis=-1))
        qmin = ad.minimum(q[:n], q[n:])  # (n, B)
        mask = tape.const(np.broadcast_to(self.masks[:, None, :], mu.shape))
        w2 = w2_tensor(mu, sigma, tape.const(e), mask)  # (n, B)
        lam_b = tape.const(np.broadcast_to(lam[:, None], (n, B)))
        per = ad.add(ad.scale(qmin, -1.0), ad.mul(lam_b, ad.add_scalar(w2, -epsilon)))
        loss = ad.scale(ad.sum_(per), 1.0 / B)
        g = ad.backward(tape, loss)
        return loss.item(), self.policy.grads(P, g), {"w2": w2.data.mean(axis=1), "qmin": qmin.data,
                                                      "actions": a.data}

    def lambda_update(self, w2_mean, epsilon: float) -> np.ndarray:
        if self.hp.imitation:
            self.lam = lambda_update(self.lam, w2_mean, epsilon, self.hp.lambda_lr)
        return self.lam

    def update(self, batch: dict, epsilon: float) -> dict:
        lq, gq, xq = self.q_loss(batch)
        lv, gv, _ = self.v_loss(batch)
        lp, gp, xp = self.actor_loss(batch, epsilon=epsilon)
        for name, val in (("q", lq), ("v", lv), ("pi", lp)):
            if not math.isfinite(val):
                raise NumericalError(f"non-finite {name} loss {val}")
        self.opt_q.step(gq)
        self.opt_v.step(gv)
        self.opt_pi.step(gp)
        self.lambda_update(xp["w2"], epsilon)
        polyak_update(self.critics.v_target, self.critics.v, self.hp.tau)
        return {"q": lq, "v": lv, "pi": lp, "w2": xp["w2"], "td": xq["td"]}

    # -- acting

    def act(self, obs_n: np.ndarray, deterministic: bool = False) -> np.ndarray:
        return self.policy.act(obs_n, None if deterministic else self.rng, deterministic)

    # -- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.policy.state("policy"))
        out.update(self.critics.q.state("q"))
        out.update(self.critics.v.state("v"))
        out.update(self.critics.v_target.state("v_target"))
        out["lambda"] = self.lam.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.policy.load_state(arrays, "policy")
        self.critics.q.load_state(arrays, "q")
        self.critics.v.load_state(arrays, "v")
        self.critics.v_target.load_state(arrays, "v_target")
        self.lam = arrays["lambda"].copy()


def td_target(r, done, v_next, gamma: float):
    """y = r + gamma (1 - done) V_target(s'); terminal transitions give y = r."""
    return np.asarray(r, float) + gamma * (1.0 - np.asarray(done, float)) * np.asarray(v_next, float)


def regression_loss(pred: ad.Tensor, target) -> ad.Tensor:
    """1/2 mean over the batch (last axis) of (pred - target)^2, summed over leading rows.

    Rows belong to independent networks, so summing keeps their gradients separate.
    """
    err = ad.sub(pred, pred.tape.const(np.broadcast_to(target, pred.shape)))
    return ad.scale(ad.sum_(ad.square(err)), 0.5 / pred.shape[-1])


def lambda_update(lam, w2_mean, epsilon: float, lr_lambda: float) -> np.ndarray:
    """Projected ascent: lambda <- max(0, lambda + lr (W2 - eps))."""
    lam = np.asarray(lam, dtype=float)
    return np.maximum(0.0, lam + lr_lambda * (np.asarray(w2_mean, dtype=float) - epsilon))


# ---------------------------------------------------------------- rollouts


class PolicyAdapter:
    """Bridge from a Learner to ``evaluate_rollout``'s policy interface."""

    def __init__(self, learner: Learner, scalers: list[ActionScaler], norm: ObsNormalizer):
        self.learner, self.scalers, self.norm = learner, scalers, norm
        self.last_raw: np.ndarray | None = None

    def raw(self, obs) -> np.ndarray:
        return self.learner.act(self.norm(np.stack(obs)), deterministic=True)

    def __call__(self, obs, t: int) -> list[Action]:
        u = self.raw(obs)
        self.last_raw = u
        return [Action.from_array(sc.squash(u[i])) for i, sc in enumerate(self.scalers)]


def expert_raw(scalers, expert_actions: np.ndarray) -> np.ndarray:
    """Device-unit expert actions (n, act) -> raw policy space."""
    return np.stack([sc.unsquash(expert_actions[i]) for i, sc in enumerate(scalers)])


def validation_w2(learner: Learner, env: MarketEnv, scalers, norm, expert: dict, agents) -> tuple[float, dict]:
    """Mean W2 to the expert over the states of a deterministic validation rollout."""
    adapter = PolicyAdapter(learner, scalers, norm)
    w2s = []

    def policy(obs, t):
        o = norm(np.stack(obs))
        mu, sigma = _policy_stats(learner, o)
        e = expert_raw(scalers, np.stack([expert[a].actions[t] for a in agents]))
        for i in range(learner.n):
            w2s.append(w2_gaussian_dirac(mu[i], sigma[i], e[i], learner.masks[i]))
        return adapter(obs, t)

    res = evaluate_rollout(policy, env)
    return float(np.mean(w2s)), res


def _policy_stats(learner: Learner, o: np.ndarray):
    tape = ad.Tape()
    mu, sigma = learner.policy.forward(learner.policy.bind(tape, False), tape.const(o[:, None, :]))
    return mu.data[:, 0], sigma.data[:, 0]


# ---------------------------------------------------------------- training


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, list):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


@dataclass
class TrainResult:
    learner: Learner
    records: list[dict]
    checkpoint: Path | None
    metrics_path: Path | None


def train(scenario: Scenario, hp: HyperParams, seed: int = 0, out_dir=None, library=None,
          log_every_episode: bool = True) -> TrainResult:
    """Train all agents on the scenario's training days.

    Writes ``metrics.jsonl`` (header record first) and ``checkpoint.bin`` to
    ``out_dir`` when given. Deterministic for a fixed seed.
    """
    from .expert.pipeline import ExpertLibrary

    library = library or ExpertLibrary(scenario)
    prosumers = scenario.prosumers
    agents = [p.agent_id for p in prosumers]
    n = len(prosumers)
    masks = np.stack([device_mask(p) for p in prosumers]).astype(float)
    learner = Learner(n, masks, hp, seed)
    scalers = make_scalers(prosumers, scenario.data)
    norm = ObsNormalizer.for_scenario(scenario)
    replay = DualReplay(hp.buffer_size, n, hp.per_alpha)
    rng = np.random.default_rng([seed, 3])
    days = list(hp.train_days) or scenario.split("train")
    val_day = scenario.split("validation")[0]

    def make_env(d):
        data, prices = scenario.day(d)
        return MarketEnv(scenario.network, prosumers, data, prices,
                         RewardConfig(terminate_on_violation=hp.terminate_on_violation))

    envs = {d: make_env(d) for d in sorted(set(days) | {val_day})}
    val_expert = library.day(val_day)
    expert_by_day = {d: library.day(d) for d in days}

    header = {"type": "header", "seed": seed, "config_hash": hp.config_hash(), "version": __version__,
              "config": asdict(hp)}
    records = [header]
    metrics_path = None
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        fh = open(metrics_path, "w")
        fh.write(json.dumps(_jsonable(header), sort_keys=True) + "\n")

    def emit(rec):
        records.append(rec)
        if fh is not None:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
            fh.flush()

    step = 0
    n_updates = 0
    try:
        for ep in range(hp.episodes):
            d = days[int(rng.integers(len(days)))]
            env = envs[d]
            sched = expert_by_day[d]
            eps = epsilon_at(hp, ep)
            obs = env.reset(int(rng.integers(2**31)))
            ep_reward, ep_stats = 0.0, []
            while not env.done:
                t = env.t
                o = norm(np.stack(obs))
                u = learner.act(o)
                joint = [Action.from_array(scalers[i].squash(u[i])) for i in range(n)]
                res = env.step(joint)
                executed = np.stack([scalers[i].to_unit(a.to_array()) for i, a in enumerate(res.info["actions"])])
                executed = np.where(masks > 0, np.clip(executed, -1.0, 1.0), 0.0)
                e_dev = np.stack([sched[a].actions[t] for a in agents])
                tr = Transition(o, executed, res.reward, norm(np.stack(res.next_obs)),
                                expert_raw(scalers, e_dev),
                                bool(res.info.get("terminated", False) or res.info["diverged"]),
                                bool(res.info["violated"]))
                buf = replay.violation if tr.violation else replay.normal
                per_push(replay, tr, buf.max_priority ** (1.0 / hp.per_alpha) - PRIORITY_FLOOR)
                obs = res.next_obs
                ep_reward += res.reward
                step += 1
                if step >= hp.warmup_steps and step % hp.update_every == 0:
                    for _ in range(hp.updates_per_round):
                        batch = per_sample(replay, hp.batch, hp.k, rng)
                        st = learner.update(batch, eps)
                        n_updates += 1
                        pr = np.array([priority_of(x, hp.per_alpha) for x in st["td"]])
                        for tag, bufx in ((0, replay.normal), (1, replay.violation)):
                            sel = batch["buf"] == tag
                            if sel.any():
                                bufx.update_priorities(batch["idx"][sel], pr[sel])
                        ep_stats.append(st)
            rec = {"type": "train", "episode": ep, "day": d, "steps": step, "updates": n_updates,
                   "reward": ep_reward, "epsilon": eps, "lambda": learner.lam.copy()}
            if ep_stats:
                rec.update(q_loss=float(np.mean([s["q"] for s in ep_stats])),
                           v_loss=float(np.mean([s["v"] for s in ep_stats])),
                           pi_loss=float(np.mean([s["pi"] for s in ep_stats])),
                           w2_batch=float(np.mean([np.mean(s["w2"]) for s in ep_stats])))
            if log_every_episode:
                emit(rec)
            if (ep + 1) % hp.eval_every == 0 or ep + 1 == hp.episodes:
                w2, res = validation_w2(learner, envs[val_day], scalers, norm, val_expert, agents)
                emit({"type": "eval", "episode": ep, "w2_mean": w2, "eval_cost": res["mean_cost"],
                      "violation_rate": res["violation_rate"], "reward": res["reward"]})
    except NumericalError as exc:
        if out_dir is not None:
            dump = {"error": str(exc), "step": step, "updates": n_updates, "lambda": learner.lam.tolist(),
                    "last_record": _jsonable(records[-1])}
            (out_dir / "diagnostic.json").write_text(json.dumps(dump, indent=2, sort_keys=True))
        raise
    finally:
        if fh is not None:
            fh.close()
    ckpt = None
    if out_dir is not None:
        ckpt = ad.save_arrays(learner.state_arrays(), out_dir / "checkpoint.bin",
                              {"seed": seed, "config_hash": hp.config_hash(), "version": __version__,
                               "config": asdict(hp), "agents": agents})
    return TrainResult(learner, records, ckpt, metrics_path)


def load_learner(path, scenario: Scenario) -> Learner:
    arrays, meta = ad.load_arrays(path)
    hp = HyperParams(**meta.get("config", {}))
    masks = np.stack([device_mask(p) for p in scenario.prosumers]).astype(float)
    learner = Learner(len(scenario.prosumers), masks, hp, int(meta.get("seed", 0)))
    learner.load_arrays(arrays)
    return learner


# ---------------------------------------------------------------- evaluation


def evaluate_policy(learner: Learner, scenario: Scenario, day: int, expert=None) -> dict:
    """Deterministic rollout on one day, with W2 and similarity to the expert if given."""
    from .expert.metrics import action_gap, deviation

    prosumers = scenario.prosumers
    agents = [p.agent_id for p in prosumers]
    data, prices = scenario.day(day)
    env = MarketEnv(scenario.network, prosumers, data, prices)
    scalers = make_scalers(prosumers, scenario.data)
    norm = ObsNormalizer.for_scenario(scenario)
    out: dict = {}
    if expert is not None:
        w2, res = validation_w2(learner, env, scalers, norm, expert, agents)
        out["w2_mean"] = w2
    else:
        res = evaluate_rollout(PolicyAdapter(learner, scalers, norm), env)
    out.update(mean_cost=res["mean_cost"], violation_rate=res["violation_rate"], reward=res["reward"])
    if expert is not None:
        from .expert.pipeline import ExpertPolicy

        ref = evaluate_rollout(ExpertPolicy(expert, agents), env)
        out["expert_cost"] = ref["mean_cost"]
        out["deviation"] = deviation(res["mean_cost"], ref["mean_cost"])
        out["gap"] = action_gap(res["actions"], ref["actions"])
        out["accuracy"] = 100.0 - (out["gap"] + out["deviation"]) / 2.0
    return out


def aggregate(results: list[dict]) -> dict:
    """Mean and standard deviation across runs (seeds) of every numeric metric."""
    keys = sorted({k for r in results for k, v in r.items() if isinstance(v, (int, float))})
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in results if k in r], dtype=float)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["n_runs"] = len(results)
    return out
