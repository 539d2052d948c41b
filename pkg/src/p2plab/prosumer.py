"""Prosumer device models, feasibility projection, power balance and cost."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

STEP_HOURS = 0.25  # 15-minute market interval

ACTION_FIELDS = ("p_cdg", "p_rdg", "q_rdg", "p_bess", "p_cl")
ACTION_DIM = len(ACTION_FIELDS)

# device portfolio per archetype: (cdg, rdg kind or None, bess, cl)
ARCHETYPES = {
    "Commercial": (True, "PV", True, True),
    "Rural": (False, "PV+WT", True, True),
    "Industrial": (True, "WT", False, True),
    "Residential": (False, "PV", True, True),
    "EnergyHub": (True, "PV+WT", True, True),
}


@dataclass(frozen=True)
class CdgParams:
    p_min: float
    p_max: float
    ramp_max: float
    cost_quad: float
    cost_lin: float

    def __post_init__(self):
        if self.p_min > self.p_max or self.ramp_max < 0 or self.cost_quad < 0:
            raise DataError(f"invalid CDG parameters: {self}")


@dataclass(frozen=True)
class RdgParams:
    s_max: float
    kind: str = "PV"

    def __post_init__(self):
        if self.s_max <= 0:
            raise DataError("RDG s_max must be positive")
        if self.kind not in ("PV", "WT", "PV+WT"):
            raise DataError(f"unknown RDG kind {self.kind!r}")


@dataclass(frozen=True)
class BessParams:
    p_min: float
    p_max: float
    soc_min: float
    soc_max: float
    eta: float
    maint_coeff: float
    e_cap: float = 4.0  # p.u.*h
    soc_init: float = 0.5

    def __post_init__(self):
        if not self.soc_min < self.soc_max:
            raise DataError("BESS soc_min must be below soc_max")
        if not 0.0 < self.eta <= 1.0:
            raise DataError("BESS eta must lie in (0, 1]")
        if self.p_min > self.p_max:
            raise DataError("BESS p_min must not exceed p_max")
        if self.e_cap <= 0:
            raise DataError("BESS e_cap must be positive")

    @property
    def dt_norm(self) -> float:
        return STEP_HOURS / self.e_cap


@dataclass(frozen=True)
class ClParams:
    alpha: float
    comp_coeff: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError("CL alpha must lie in [0, 1]")


@dataclass(frozen=True)
class ProsumerSpec:
    bus_id: int
    scenario_tag: str
    cdg: CdgParams | None = None
    rdg: RdgParams | None = None
    bess: BessParams | None = None
    cl: ClParams | None = None
    name: str = ""

    def __post_init__(self):
        if not any((self.cdg, self.rdg, self.bess, self.cl)):
            raise DataError(f"prosumer at bus {self.bus_id} has no devices")

    @property
    def agent_id(self) -> str:
        return self.name or f"bus{self.bus_id}"

    def validate_archetype(self) -> None:
        if self.scenario_tag not in ARCHETYPES:
            raise DataError(f"unknown scenario tag {self.scenario_tag!r}")
        cdg, rdg_kind, bess, cl = ARCHETYPES[self.scenario_tag]
        got = (
            self.cdg is not None,
            self.rdg.kind if self.rdg is not None else None,
            self.bess is not None,
            self.cl is not None,
        )
        if got != (cdg, rdg_kind, bess, cl):
            raise DataError(
                f"{self.agent_id}: devices {got} do not match archetype "
                f"{self.scenario_tag} {(cdg, rdg_kind, bess, cl)}"
            )

    def to_dict(self) -> dict:
        d = {"bus_id": self.bus_id, "scenario_tag": self.scenario_tag, "name": self.name}
        for key in ("cdg", "rdg", "bess", "cl"):
            dev = getattr(self, key)
            d[key] = None if dev is None else asdict(dev)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProsumerSpec":
        kinds = {"cdg": CdgParams, "rdg": RdgParams, "bess": BessParams, "cl": ClParams}
        devs = {k: (None if d.get(k) is None else t(**d[k])) for k, t in kinds.items()}
        return cls(bus_id=d["bus_id"], scenario_tag=d["scenario_tag"], name=d.get("name", ""), **devs)


def load_roster(path) -> list[ProsumerSpec]:
    with open(path) as f:
        raw = json.load(f)
    specs = [ProsumerSpec.from_dict(d) for d in raw]
    for s in specs:
        s.validate_archetype()
    return specs


def save_roster(specs, path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2, sort_keys=True) + "\n")


@dataclass
class DeviceState:
    p_cdg_prev: float = 0.0
    soc_prev: float = 0.5
    p_p2p_prev: float = 0.0
    v_prev: float = 1.0


@dataclass(frozen=True)
class Action:
    p_cdg: float = 0.0
    p_rdg: float = 0.0
    q_rdg: float = 0.0
    p_bess: float = 0.0
    p_cl: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.p_cdg, self.p_rdg, self.q_rdg, self.p_bess, self.p_cl])

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=float)
        if a.shape != (ACTION_DIM,):
            raise ValueError(f"action must have {ACTION_DIM} entries, got {a.shape}")
        return cls(*(float(x) for x in a))


@dataclass(frozen=True)
class CostBreakdown:
    grid: float
    cdg: float
    bess: float
    cl: float
    p2p: float

    @property
    def total(self) -> float:
        return self.grid + self.cdg + self.bess + self.cl + self.p2p


@dataclass(frozen=True)
class PriceStep:
    buy: float
    sell: float
    p2p: float
    dso: float


def step_soc(soc_prev: float, p_bess: float, eta: float, dt_norm: float = 1.0) -> float:
    """State of charge after one step; charging when ``p_bess >= 0``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if p_bess >= 0:
        return soc_prev + eta * p_bess * dt_norm
    return soc_prev + p_bess * dt_norm / eta


def _bess_window(bess: BessParams, soc_prev: float) -> tuple[float, float]:
    dt = bess.dt_norm
    hi = min(bess.p_max, max(0.0, (bess.soc_max - soc_prev) / (bess.eta * dt)))
    lo = max(bess.p_min, min(0.0, (bess.soc_min - soc_prev) * bess.eta / dt))
    return lo, hi


def _cdg_window(cdg: CdgParams, p_prev: float) -> tuple[float, float]:
    lo = max(cdg.p_min, p_prev - cdg.ramp_max)
    hi = min(cdg.p_max, p_prev + cdg.ramp_max)
    if lo > hi:
        # previous output lies outside the ramp reach of [p_min, p_max]
        nearest = min(max(p_prev, cdg.p_min), cdg.p_max)
        return nearest, nearest
    return lo, hi


def action_bounds(spec: ProsumerSpec, state: DeviceState, rdg_avail: float, load: float):
    """Per-component box (lo, hi) that project_action clips into.

    ``q_rdg`` is additionally limited by the apparent-power circle.
    """
    lo = np.zeros(ACTION_DIM)
    hi = np.zeros(ACTION_DIM)
    if spec.cdg is not None:
        lo[0], hi[0] = _cdg_window(spec.cdg, state.p_cdg_prev)
    if spec.rdg is not None:
        hi[1] = min(max(rdg_avail, 0.0), spec.rdg.s_max)
        lo[2], hi[2] = -spec.rdg.s_max, spec.rdg.s_max
    if spec.bess is not None:
        lo[3], hi[3] = _bess_window(spec.bess, state.soc_prev)
    if spec.cl is not None:
        hi[4] = spec.cl.alpha * max(load, 0.0)
    return lo, hi


def project_action(
    raw: Action, spec: ProsumerSpec, state: DeviceState, rdg_avail: float, load: float
) -> Action:
    """Map any action onto the feasible set by clipping and radial scaling."""
    a = np.nan_to_num(raw.to_array(), nan=0.0, posinf=0.0, neginf=0.0)
    lo, hi = action_bounds(spec, state, rdg_avail, load)
    out = np.clip(a, lo, hi)
    if spec.rdg is not None:
        p, q = out[1], out[2]
        s = math.hypot(p, q)
        if s > spec.rdg.s_max * (1.0 + 1e-12):
            k = spec.rdg.s_max / s
            out[1], out[2] = p * k, q * k
    return Action.from_array(out)


def advance_state(
    state: DeviceState, action: Action, spec: ProsumerSpec, p_p2p: float, v: float
) -> DeviceState:
    soc = state.soc_prev
    if spec.bess is not None:
        soc = step_soc(soc, action.p_bess, spec.bess.eta, spec.bess.dt_norm)
        soc = min(max(soc, spec.bess.soc_min), spec.bess.soc_max)
    return DeviceState(p_cdg_prev=action.p_cdg, soc_prev=soc, p_p2p_prev=p_p2p, v_prev=v)


def initial_state(spec: ProsumerSpec, v_base: float = 1.0, soc_init: float | None = None) -> DeviceState:
    if soc_init is None:
        soc_init = spec.bess.soc_init if spec.bess is not None else 0.5
    return DeviceState(p_cdg_prev=0.0, soc_prev=soc_init, p_p2p_prev=0.0, v_prev=v_base)


def net_export(action: Action, load_p: float, load_q: float) -> tuple[float, float]:
    p_ex = action.p_cdg + action.p_rdg + action.p_cl - load_p - action.p_bess
    q_ex = action.q_rdg - load_q
    return p_ex, q_ex


def grid_exchange(action: Action, load_p: float, load_q: float, p_p2p: float):
    """Return (p_ex, q_ex, p_grid) with p_ex = -p_grid - p_p2p."""
    p_ex, q_ex = net_export(action, load_p, load_q)
    p_grid = -p_ex - p_p2p
    return p_ex, q_ex, p_grid


def operational_cost(
    spec: ProsumerSpec, action: Action, p_grid: float, p_p2p: float, prices: PriceStep
) -> CostBreakdown:
    grid = prices.sell * p_grid if p_grid < 0 else prices.buy * p_grid
    cdg = 0.0
    if spec.cdg is not None:
        cdg = spec.cdg.cost_quad * action.p_cdg**2 + spec.cdg.cost_lin * action.p_cdg
    bess = spec.bess.maint_coeff * abs(action.p_bess) if spec.bess is not None else 0.0
    cl = spec.cl.comp_coeff * abs(action.p_cl) if spec.cl is not None else 0.0
    p2p = prices.dso * abs(p_p2p) + prices.p2p * p_p2p
    return CostBreakdown(grid=grid, cdg=cdg, bess=bess, cl=cl, p2p=p2p)


def device_mask(spec: ProsumerSpec) -> np.ndarray:
    """Boolean mask of action components the prosumer actually controls."""
    return np.array(
        [spec.cdg is not None, spec.rdg is not None, spec.rdg is not None,
         spec.bess is not None, spec.cl is not None]
    )

