"""Radial distribution network: admittance, AC power flow and voltage sensitivities.

All quantities are per-unit. A bus injection is positive when the bus exports
power into the network (generation minus consumption).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DivergenceError, TopologyError

PF_TOL = 1e-8
PF_MAX_ITER = 30


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float = 0.95
    v_max: float = 1.05
    v_base: float = 1.0
    is_slack: bool = False

    def __post_init__(self):
        if not (0.0 < self.v_min < self.v_base < self.v_max):
            raise ValueError(
                f"bus {self.id}: require 0 < v_min < v_base < v_max, got "
                f"{self.v_min}, {self.v_base}, {self.v_max}"
            )


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise TopologyError(f"branch {self.from_bus}->{self.to_bus} is a self loop")

    @property
    def impedance(self) -> complex:
        return 1.0 / complex(self.g, self.b)


@dataclass
class Network:
    buses: list[Bus]
    branches: list[Branch]
    s_base: float = 1.0
    v_kv: float = 12.47

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if ids != list(range(len(ids))):
            raise TopologyError("bus ids must be 0..n-1 in order")
        n_slack = sum(b.is_slack for b in self.buses)
        if n_slack != 1:
            raise TopologyError(f"expected exactly one slack bus, found {n_slack}")
        for br in self.branches:
            for k in (br.from_bus, br.to_bus):
                if not 0 <= k < len(ids):
                    raise TopologyError(f"branch references unknown bus {k}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.is_slack)

    @property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @property
    def v_base(self) -> np.ndarray:
        return np.array([b.v_base for b in self.buses])

    @property
    def is_radial(self) -> bool:
        return len(self.branches) == self.n_bus - 1 and _is_connected(self)

    def to_dict(self) -> dict:
        return {
            "buses": [asdict(b) for b in self.buses],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "g": br.g, "b": br.b}
                for br in self.branches
            ],
            "s_base": self.s_base,
            "v_kv": self.v_kv,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        buses = [Bus(**b) for b in d["buses"]]
        branches = [Branch(br["from"], br["to"], br["g"], br["b"]) for br in d["branches"]]
        return cls(buses, branches, d.get("s_base", 1.0), d.get("v_kv", 12.47))


def load_network(path) -> Network:
    with open(path) as f:
        return Network.from_dict(json.load(f))


def save_network(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network.to_dict(), indent=2, sort_keys=True) + "\n")


def _adjacency(network: Network) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(network.n_bus)]
    for br in network.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    return adj


def _is_connected(network: Network) -> bool:
    adj = _adjacency(network)
    seen = {network.slack}
    queue = deque(seen)
    while queue:
        k = queue.popleft()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                queue.append(m)
    return len(seen) == network.n_bus


def build_admittance(network: Network) -> np.ndarray:
    """Dense complex bus admittance matrix from series branch admittances.

    Raises TopologyError when the branch set does not connect every bus.
    """
    if not _is_connected(network):
        raise TopologyError("network graph is disconnected")
    n = network.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        y = complex(br.g, br.b)
        i, j = br.from_bus, br.to_bus
        Y[i, j] -= y
        Y[j, i] -= y
        Y[i, i] += y
        Y[j, j] += y
    return Y


@dataclass
class BusSolution:
    v: np.ndarray
    theta: np.ndarray
    residual_inf_norm: float
    iterations: int = 0
    # full injections including the slack bus, solved
    p: np.ndarray = field(default=None, repr=False)
    q: np.ndarray = field(default=None, repr=False)


def _check_dims(network: Network, *arrays):
    n = network.n_bus
    for a in arrays:
        if np.shape(a) != (n,):
            raise DimensionError(f"expected vector of length {n}, got shape {np.shape(a)}")


def injection_residual(network: Network, v, theta, p_inj, q_inj, Y=None):
    """Mismatch (dP, dQ) of both power-flow equations at every bus.

    Computed directly from the trigonometric form
    ``P_i = V_i sum_j V_j (G_ij cos t_ij + B_ij sin t_ij)`` and
    ``Q_i = V_i sum_j V_j (G_ij sin t_ij - B_ij cos t_ij)``.
    """
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    _check_dims(network, v, theta, p_inj, q_inj)
    if Y is None:
        Y = build_admittance(network)
    G, B = Y.real, Y.imag
    dt = theta[:, None] - theta[None, :]
    c, s = np.cos(dt), np.sin(dt)
    vv = v[:, None] * v[None, :]
    p_calc = np.sum(vv * (G * c + B * s), axis=1)
    q_calc = np.sum(vv * (G * s - B * c), axis=1)
    return p_calc - np.asarray(p_inj, float), q_calc - np.asarray(q_inj, float)


def power_flow_jacobian(network: Network, v, theta, Y=None) -> np.ndarray:
    """Jacobian of the calculated injections [P; Q] w.r.t. [theta; V] (all buses)."""
    if Y is None:
        Y = build_admittance(network)
    V = v * np.exp(1j * theta)
    I = Y @ V
    diagV = np.diag(V)
    diagI = np.diag(I)
    diagVn = np.diag(V / np.abs(V))
    dS_dth = 1j * diagV @ np.conj(diagI - Y @ diagV)
    dS_dv = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
    return np.block([[dS_dth.real, dS_dv.real], [dS_dth.imag, dS_dv.imag]])


def ac_power_flow(
    network: Network,
    p_inj,
    q_inj,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
    Y=None,
) -> BusSolution:
    """Newton-Raphson power flow from a flat start.

    The slack bus holds its base magnitude at zero angle and absorbs the
    balance; entries of ``p_inj``/``q_inj`` at the slack are ignored.
    """
    p_inj = np.asarray(p_inj, dtype=float)
    q_inj = np.asarray(q_inj, dtype=float)
    _check_dims(network, p_inj, q_inj)
    if Y is None:
        Y = build_admittance(network)
    n = network.n_bus
    sl = network.slack
    ns = np.array([k for k in range(n) if k != sl], dtype=int)
    m = len(ns)

    v = network.v_base.copy()
    theta = np.zeros(n)
    s_spec = p_inj + 1j * q_inj

    def mismatch():
        V = v * np.exp(1j * theta)
        s_calc = V * np.conj(Y @ V)
        d = s_calc - s_spec
        return np.concatenate([d.real[ns], d.imag[ns]]), V

    f, V = mismatch()
    err = float(np.max(np.abs(f))) if m else 0.0
    it = 0
    while err > tol:
        if it >= max_iter:
            raise DivergenceError(
                f"power flow did not converge in {max_iter} iterations (mismatch {err:.3e})",
                err,
            )
        I = Y @ V
        diagV = np.diag(V)
        diagVn = np.diag(V / np.abs(V))
        dS_dth = 1j * diagV @ np.conj(np.diag(I) - Y @ diagV)
        dS_dv = diagV @ np.conj(Y @ diagVn) + np.diag(np.conj(I)) @ diagVn
        J = np.block(
            [
                [dS_dth.real[np.ix_(ns, ns)], dS_dv.real[np.ix_(ns, ns)]],
                [dS_dth.imag[np.ix_(ns, ns)], dS_dv.imag[np.ix_(ns, ns)]],
            ]
        )
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError(f"singular Jacobian: {exc}", err) from exc
        theta[ns] += dx[:m]
        v[ns] += dx[m:]
        it += 1
        f, V = mismatch()
        err = float(np.max(np.abs(f)))
        if not np.isfinite(err):
            raise DivergenceError("power flow diverged to non-finite values", err)

    s_calc = V * np.conj(Y @ V)
    p_full = p_inj.copy()
    q_full = q_inj.copy()
    p_full[sl] = s_calc.real[sl]
    q_full[sl] = s_calc.imag[sl]
    return BusSolution(v=v, theta=theta, residual_inf_norm=err, iterations=it, p=p_full, q=q_full)


def voltage_violation(v, network: Network) -> np.ndarray:
    """Per-bus penalty kernel max(0, |V_base - V| - (V_max - V_min)/2)."""
    v = np.asarray(v, dtype=float)
    half_band = (network.v_max - network.v_min) / 2.0
    return np.maximum(0.0, np.abs(network.v_base - v) - half_band)


@dataclass
class VoltageSensitivity:
    """Linear map from injection changes to voltage magnitude changes."""

    dv_dp: np.ndarray
    dv_dq: np.ndarray

    def predict(self, dp, dq=None) -> np.ndarray:
        dv = self.dv_dp @ np.asarray(dp, float)
        if dq is not None:
            dv = dv + self.dv_dq @ np.asarray(dq, float)
        return dv

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.dv_dp, self.dv_dq])


def _tree_edges(network: Network) -> list[tuple[int, int, Branch]]:
    """(parent, child, branch) triples oriented away from the slack."""
    if not network.is_radial:
        raise TopologyError("LinDistFlow sensitivity requires a radial network")
    nbrs: list[list[tuple[int, Branch]]] = [[] for _ in range(network.n_bus)]
    for br in network.branches:
        nbrs[br.from_bus].append((br.to_bus, br))
        nbrs[br.to_bus].append((br.from_bus, br))
    edges = []
    seen = {network.slack}
    queue = deque([network.slack])
    while queue:
        k = queue.popleft()
        for m, br in nbrs[k]:
            if m not in seen:
                seen.add(m)
                edges.append((k, m, br))
                queue.append(m)
    return edges


def lindistflow_sensitivity(network: Network, v=None) -> VoltageSensitivity:
    """LinDistFlow voltage sensitivity dV = (R dp + X dq) / V.

    ``R[i, k]`` is the resistance of the path shared by buses i and k back to
    the slack. ``v`` optionally gives the operating-point magnitudes used to
    convert squared-voltage changes into magnitude changes; the slack base
    magnitude is used otherwise.
    """
    edges = _tree_edges(network)
    n = network.n_bus
    children: list[list[int]] = [[] for _ in range(n)]
    for parent, child, _ in edges:
        children[parent].append(child)

    # downstream indicator per edge
    D = np.zeros((len(edges), n))
    for e, (_, child, _) in enumerate(edges):
        stack = [child]
        while stack:
            k = stack.pop()
            D[e, k] = 1.0
            stack.extend(children[k])
    z = np.array([br.impedance for _, _, br in edges])
    R = D.T @ (z.real[:, None] * D)
    X = D.T @ (z.imag[:, None] * D)
    if v is None:
        denom = np.full(n, network.buses[network.slack].v_base)
    else:
        denom = np.asarray(v, dtype=float)
    return VoltageSensitivity(dv_dp=R / denom[:, None], dv_dq=X / denom[:, None])
