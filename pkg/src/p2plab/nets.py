"""Policy and critic networks on top of the autodiff tape.

Parameters live in plain dicts of float64 arrays. Every network is stored as
a stack of ``L`` independent copies along a leading axis (one per agent, or
per agent and Q index), so all agents run through a single batched op while
keeping separate weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError
from .prosumer import ACTION_DIM

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_STD_BIAS = -1.0


# ---------------------------------------------------------------- parameters


class Module:
    """Named parameter arrays plus binding onto a tape."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def bind(self, tape: ad.Tape, trainable: bool = True) -> dict[str, ad.Tensor]:
        make = tape.param if trainable else tape.const
        return {k: make(v) for k, v in self.params.items()}

    def grads(self, bound: dict[str, ad.Tensor], g: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: g[t.node] for k, t in bound.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy_from(self, other: "Module") -> None:
        self.params = {k: v.copy() for k, v in other.params.items()}

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        for k in self.params:
            key = f"{prefix}.{k}"
            if key not in arrays:
                raise DimensionError(f"checkpoint lacks {key}")
            if arrays[key].shape != self.params[k].shape:
                raise DimensionError(f"{key}: shape {arrays[key].shape} != {self.params[k].shape}")
            self.params[k] = arrays[key].copy()


def _uniform(rng, shape, fan_in):
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def polyak_update(target: Module, online: Module, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    if set(target.params) != set(online.params):
        raise DimensionError("polyak_update: parameter names differ")
    for k, v in online.params.items():
        if target.params[k].shape != v.shape:
            raise DimensionError(f"polyak_update: {k} shapes differ")
        target.params[k] = tau * v + (1.0 - tau) * target.params[k]


class Adam:
    def __init__(self, module: Module, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in module.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in module.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.module.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- MLP


@dataclass
class MlpConfig:
    widths: list[int]
    final_activation: bool = False  # tanh on the last layer too

    def __post_init__(self):
        if len(self.widths) < 3:
            raise DimensionError("an MLP needs at least one hidden layer")


def init_mlp(cfg: MlpConfig, rng, lead: tuple = (), prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for k, (a, b) in enumerate(zip(cfg.widths[:-1], cfg.widths[1:])):
        out[f"{prefix}W{k}"] = _uniform(rng, lead + (a, b), a)
        out[f"{prefix}b{k}"] = _uniform(rng, lead + (b,), a)
    return out


def mlp_forward(cfg: MlpConfig, P: dict[str, ad.Tensor], x: ad.Tensor, prefix: str = "") -> ad.Tensor:
    """Affine-tanh stack; the last layer is linear unless ``final_activation``."""
    if x.shape[-1] != cfg.widths[0]:
        raise DimensionError(f"MLP expects input width {cfg.widths[0]}, got {x.shape[-1]}")
    n_layers = len(cfg.widths) - 1
    h = x
    for k in range(n_layers):
        h = ad.add_bias(ad.matmul(h, P[f"{prefix}W{k}"]), P[f"{prefix}b{k}"])
        if k < n_layers - 1 or cfg.final_activation:
            h = ad.tanh(h)
    return h


class MLP(Module):
    def __init__(self, cfg: MlpConfig, rng, lead: tuple = ()):
        super().__init__()
        self.cfg = cfg
        self.params = init_mlp(cfg, rng, lead)

    def forward(self, P, x):
        return mlp_forward(self.cfg, P, x)


# ---------------------------------------------------------------- policy


class GaussianPolicy(Module):
    """Diagonal Gaussian over raw (pre-squash) actions, one copy per agent.

    Input (n_agents, B, obs_dim) -> mean and std of shape (n_agents, B, act_dim).
    """

    def __init__(self, n_agents: int, obs_dim: int, act_dim: int = ACTION_DIM,
                 hidden=(64, 64), rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_agents, self.obs_dim, self.act_dim = n_agents, obs_dim, act_dim
        self.trunk = MlpConfig([obs_dim, *hidden], final_activation=True)
        lead = (n_agents,)
        self.params = init_mlp(self.trunk, rng, lead, "trunk.")
        h = hidden[-1]
        self.params["mu.W"] = _uniform(rng, lead + (h, act_dim), h) * 0.1
        self.params["mu.b"] = np.zeros(lead + (act_dim,))
        self.params["ls.W"] = _uniform(rng, lead + (h, act_dim), h) * 0.1
        self.params["ls.b"] = np.full(lead + (act_dim,), LOG_STD_BIAS)

    def forward(self, P, obs: ad.Tensor):
        if obs.shape[-1] != self.obs_dim:
            raise DimensionError(f"policy expects observations of width {self.obs_dim}")
        h = mlp_forward(self.trunk, P, obs, "trunk.")
        mu = ad.add_bias(ad.matmul(h, P["mu.W"]), P["mu.b"])
        log_std = ad.clip(ad.add_bias(ad.matmul(h, P["ls.W"]), P["ls.b"]), LOG_STD_MIN, LOG_STD_MAX)
        return mu, ad.exp(log_std)

    def act(self, obs: np.ndarray, rng=None, deterministic: bool = False) -> np.ndarray:
        """Numpy forward for rollouts: obs (n_agents, obs_dim) -> raw actions."""
        tape = ad.Tape()
        mu, sigma = self.forward(self.bind(tape, False), tape.const(obs[:, None, :]))
        if deterministic:
            return mu.data[:, 0, :]
        z = rng.standard_normal(mu.data.shape[::2]) if rng is not None else 0.0
        return mu.data[:, 0, :] + sigma.data[:, 0, :] * z


def policy_forward(policy: GaussianPolicy, obs) -> tuple[np.ndarray, np.ndarray]:
    tape = ad.Tape()
    mu, sigma = policy.forward(policy.bind(tape, False), tape.const(np.asarray(obs, float)))
    return mu.data, sigma.data


# ---------------------------------------------------------------- differential attention


@dataclass
class DiffAttnConfig:
    n_agents: int
    d_model: int = 64
    heads: int = 4
    d_k: int = 8
    xi_init: float = 0.2

    def __post_init__(self):
        if self.d_k <= 0 or self.heads <= 0:
            raise DimensionError("heads and d_k must be positive")

    @property
    def width(self) -> int:
        """Projection width h * 2 d_k shared by queries, keys and values."""
        return self.heads * 2 * self.d_k


def init_diff_attention(cfg: DiffAttnConfig, rng, lead: tuple = ()) -> dict[str, np.ndarray]:
    d, w, h = cfg.d_model, cfg.width, cfg.heads
    p = {
        "Wq": _uniform(rng, lead + (d, w), d),
        "Wk": _uniform(rng, lead + (d, w), d),
        "Wv": _uniform(rng, lead + (d, w), d),
        "Wo": _uniform(rng, lead + (w, d), w),
    }
    for name in ("xi_q1", "xi_k1", "xi_q2", "xi_k2"):
        p[name] = rng.normal(0.0, 0.1, size=lead + (h, cfg.d_k))
    return p


def lambda_scale(xi_q1, xi_k1, xi_q2, xi_k2, xi_init: float) -> ad.Tensor:
    """exp(xi_q1 . xi_k1) - exp(xi_q2 . xi_k2) + xi_init, dot over the last axis."""
    d1 = ad.sum_(ad.mul(xi_q1, xi_k1), axis=-1)
    d2 = ad.sum_(ad.mul(xi_q2, xi_k2), axis=-1)
    return ad.add_scalar(ad.sub(ad.exp(d1), ad.exp(d2)), xi_init)


def _split_heads(x: ad.Tensor, L: int, B: int, n: int, h: int, parts: int, dk: int) -> ad.Tensor:
    # (L, B*n, h*parts*dk) -> (L, B, h, parts, n, dk)
    x = ad.reshape(x, (L, B, n, h, parts, dk))
    return ad.transpose(x, (0, 1, 3, 4, 2, 5))


def diff_attention(E: ad.Tensor, cfg: DiffAttnConfig, P: dict[str, ad.Tensor], xi: ad.Tensor | None = None,
                   return_maps: bool = False):
    """Multi-head differential attention over agents.

    E has shape (L, B, n, d_model) with L stacked parameter copies. Per head,
    [Q1, Q2] = E Wq, [K1, K2] = E Wk, V = E Wv and
    head = (softmax(Q1 K1'/sqrt(d_k)) - xi_h softmax(Q2 K2'/sqrt(d_k))) V.
    The heads are concatenated and mapped back by Wo. ``xi`` (L, h) overrides
    the learned scale.
    """
    if E.ndim != 4 or E.shape[-1] != cfg.d_model:
        raise DimensionError(f"diff_attention expects (L, B, n, {cfg.d_model}), got {E.shape}")
    L, B, n, d = E.shape
    h, dk = cfg.heads, cfg.d_k
    flat = ad.reshape(E, (L, B * n, d))
    Q = _split_heads(ad.matmul(flat, P["Wq"]), L, B, n, h, 2, dk)
    K = _split_heads(ad.matmul(flat, P["Wk"]), L, B, n, h, 2, dk)
    V = _split_heads(ad.matmul(flat, P["Wv"]), L, B, n, h, 1, 2 * dk)[:, :, :, 0]
    inv = 1.0 / math.sqrt(dk)

    def attn(part):
        q = Q[:, :, :, part]
        kt = ad.transpose(K[:, :, :, part], (0, 1, 2, 4, 3))
        return ad.softmax(ad.scale(ad.matmul(q, kt), inv))

    s1, s2 = attn(0), attn(1)
    if xi is None:
        xi = lambda_scale(P["xi_q1"], P["xi_k1"], P["xi_q2"], P["xi_k2"], cfg.xi_init)
    xi_b = ad.broadcast_to(ad.reshape(xi, (L, 1, h, 1, 1)), (L, B, h, n, n))
    diff = ad.sub(s1, ad.mul(xi_b, s2))
    heads = ad.matmul(diff, V)  # (L, B, h, n, 2dk)
    cat = ad.reshape(ad.transpose(heads, (0, 1, 3, 2, 4)), (L, B * n, h * 2 * dk))
    X = ad.reshape(ad.matmul(cat, P["Wo"]), (L, B, n, d))
    if return_maps:
        return X, {"s1": s1, "s2": s2, "diff": diff, "xi": xi}
    return X


def standard_attention(E: ad.Tensor, cfg: DiffAttnConfig, P: dict[str, ad.Tensor]) -> ad.Tensor:
    """Plain multi-head attention using only the first query/key halves."""
    L, B, n, d = E.shape
    h, dk = cfg.heads, cfg.d_k
    flat = ad.reshape(E, (L, B * n, d))
    Q = _split_heads(ad.matmul(flat, P["Wq"]), L, B, n, h, 2, dk)[:, :, :, 0]
    K = _split_heads(ad.matmul(flat, P["Wk"]), L, B, n, h, 2, dk)[:, :, :, 0]
    V = _split_heads(ad.matmul(flat, P["Wv"]), L, B, n, h, 1, 2 * dk)[:, :, :, 0]
    s = ad.softmax(ad.scale(ad.matmul(Q, ad.transpose(K, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(dk)))
    heads = ad.matmul(s, V)
    cat = ad.reshape(ad.transpose(heads, (0, 1, 3, 2, 4)), (L, B * n, h * 2 * dk))
    return ad.reshape(ad.matmul(cat, P["Wo"]), (L, B, n, d))


def attention_param_count(d_model: int, heads: int, head_dim: int, differential: bool) -> int:
    """Projection weights of an attention block (the xi vectors excluded).

    Differential heads carry two query/key halves of ``head_dim`` each and
    values of width 2 * head_dim; standard heads one of each.
    """
    qk = 2 * head_dim if differential else head_dim
    v = 2 * head_dim if differential else head_dim
    return 2 * d_model * heads * qk + d_model * heads * v + heads * v * d_model


# ---------------------------------------------------------------- critics


class AttentionCritic(Module):
    """L independent critics over n agents.

    Critic l embeds each agent's input with its own per-agent layer, mixes the
    embeddings with differential attention, concatenates the result with the
    embeddings and reads its own agent's row (``rows[l]``) through an output
    MLP to a scalar.
    """

    def __init__(self, L: int, rows, in_dim: int, attn: DiffAttnConfig, hidden: int = 64, rng=None,
                 use_attention: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.L, self.rows, self.in_dim, self.attn = L, np.asarray(rows, int), in_dim, attn
        self.use_attention = use_attention and attn.heads > 0
        n, d = attn.n_agents, attn.d_model
        self.params["emb.W"] = _uniform(rng, (L, n, in_dim, d), in_dim)
        self.params["emb.b"] = _uniform(rng, (L, n, d), in_dim)
        if self.use_attention:
            self.params.update({f"att.{k}": v for k, v in init_diff_attention(attn, rng, (L,)).items()})
        self.out_cfg = MlpConfig([2 * d, hidden, 1])
        self.params.update(init_mlp(self.out_cfg, rng, (L,), "out."))

    def forward(self, P, x: ad.Tensor) -> ad.Tensor:
        """x: (L, n, B, in_dim) -> values (L, B)."""
        L, n = self.L, self.attn.n_agents
        if x.ndim != 4 or x.shape[0] != L or x.shape[1] != n or x.shape[3] != self.in_dim:
            raise DimensionError(f"critic expects ({L}, {n}, B, {self.in_dim}), got {x.shape}")
        B = x.shape[2]
        E = ad.tanh(ad.add_bias(ad.matmul(x, P["emb.W"]), P["emb.b"]))  # (L, n, B, d)
        E = ad.transpose(E, (0, 2, 1, 3))  # (L, B, n, d)
        if self.use_attention:
            att = {k[4:]: v for k, v in P.items() if k.startswith("att.")}
            X = diff_attention(E, self.attn, att)
        else:
            X = ad.scale(E, 0.0)
        H = ad.concat([X, E], axis=-1)
        own = ad.take_rows(H, self.rows)  # (L, B, 2d)
        out = mlp_forward(self.out_cfg, P, own, "out.")
        return ad.reshape(out, (L, B))


def tile_input(tape: ad.Tape, x: np.ndarray, L: int) -> ad.Tensor:
    """Constant (n, B, k) input shared by all L critics."""
    return tape.const(np.broadcast_to(x, (L,) + x.shape))


@dataclass
class CriticBundle:
    """Per-agent double Q, V and target V, each stacked over agents."""

    q: AttentionCritic  # L = 2n: rows 0..n-1 are Q1, n..2n-1 are Q2
    v: AttentionCritic
    v_target: AttentionCritic
    n_agents: int
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, n_agents: int, obs_dim: int, act_dim: int, attn: DiffAttnConfig, hidden: int = 64,
               rng=None) -> "CriticBundle":
        rng = rng or np.random.default_rng(0)
        n = n_agents
        q = AttentionCritic(2 * n, list(range(n)) * 2, obs_dim + act_dim, attn, hidden, rng)
        v = AttentionCritic(n, list(range(n)), obs_dim, attn, hidden, rng)
        vt = AttentionCritic(n, list(range(n)), obs_dim, attn, hidden, rng)
        vt.copy_from(v)
        return cls(q, v, vt, n)


def critic_forward(bundle: CriticBundle, states: np.ndarray, actions: np.ndarray):
    """Numpy convenience: states (n, B, obs), actions (n, B, act) -> (Q1, Q2, V) each (n, B)."""
    tape = ad.Tape()
    n = bundle.n_agents
    sa = np.concatenate([states, actions], axis=-1)
    q = bundle.q.forward(bundle.q.bind(tape, False), tile_input(tape, sa, 2 * n)).data
    v = bundle.v.forward(bundle.v.bind(tape, False), tile_input(tape, states, n)).data
    return q[:n], q[n:], v
