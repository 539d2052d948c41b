"""Synthetic scenario fixtures: a 6-bus feeder and a 141-bus feeder of the same shape
as the modified IEEE 141-bus case.

Everything is drawn from a seeded generator and written with exact float
repr, so a fixture regenerated with the same seed is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .market.scenario import STEPS_PER_DAY, PriceSchedule, write_prices, write_series
from .netmodel import Branch, Bus, Network, save_network
from .prosumer import ARCHETYPES, BessParams, CdgParams, ClParams, ProsumerSpec, RdgParams, save_roster

FIXTURE_KINDS = ("six_bus", "ieee141_like")

# prosumer nodes per archetype on the 141-bus feeder
IEEE141_NODES = {
    "Commercial": (48, 78, 102, 127),
    "Rural": (59, 109, 130, 140),
    "Industrial": (67, 95, 133, 136),
    "Residential": (62, 86, 106, 138),
    "EnergyHub": (74, 100, 116, 134),
}

# prices per p.u. and per 15-minute step
BUY_OFFPEAK, BUY_SHOULDER, BUY_PEAK = 10.0, 17.5, 27.5
SELL_PRICE = 7.5
LAMBDA_DSO = 0.5


def _branch(f: int, t: int, r: float, x: float) -> Branch:
    y = 1.0 / complex(r, x)
    return Branch(f, t, y.real, y.imag)


def six_bus_network() -> Network:
    """Feeder 0-1-2-3-4 with a lateral 2-5; prosumers sit at 3, 4 and 5."""
    buses = [Bus(0, is_slack=True)] + [Bus(k) for k in range(1, 6)]
    branches = [
        _branch(0, 1, 0.010, 0.010),
        _branch(1, 2, 0.015, 0.012),
        _branch(2, 3, 0.020, 0.015),
        _branch(3, 4, 0.025, 0.018),
        _branch(2, 5, 0.030, 0.020),
    ]
    return Network(buses, branches)


def ieee141_like_network(rng: np.random.Generator) -> Network:
    """Radial 141-bus feeder with a main trunk and laterals.

    Impedances are synthetic: only the size and radial shape follow the
    benchmark, not its line data.
    """
    n = 141
    parent = np.zeros(n, dtype=int)
    trunk = 40
    for k in range(1, trunk + 1):
        parent[k] = k - 1
    k = trunk + 1
    while k < n:
        root = int(rng.integers(1, trunk))
        length = int(min(rng.integers(5, 15), n - k))
        parent[k] = root
        for j in range(1, length):
            parent[k + j] = k + j - 1
        k += length
    branches = []
    for k in range(1, n):
        on_trunk = k <= trunk
        r = (0.0015 if on_trunk else 0.003) * (1.0 + 0.3 * rng.random())
        x = r * (0.8 + 0.4 * rng.random())
        branches.append(_branch(int(parent[k]), k, r, x))
    buses = [Bus(0, is_slack=True)] + [Bus(k) for k in range(1, n)]
    return Network(buses, branches)


def _params(tag: str, bus: int, rng: np.random.Generator, scale: float) -> ProsumerSpec:
    has_cdg, rdg_kind, has_bess, has_cl = ARCHETYPES[tag]
    j = lambda lo, hi: float(lo + (hi - lo) * rng.random())  # noqa: E731
    cdg = CdgParams(0.0, round(j(0.4, 0.6) * scale, 4), round(0.15 * scale, 4),
                    round(j(4.0, 6.0) / scale, 4), round(j(9.0, 12.0), 4)) if has_cdg else None
    rdg = RdgParams(round(j(1.0, 1.3) * scale, 4), rdg_kind) if rdg_kind else None
    bess = BessParams(round(-0.4 * scale, 4), round(0.4 * scale, 4), 0.1, 0.9, 0.95,
                      round(j(0.3, 0.6), 4), round(2.0 * scale, 4), 0.5) if has_bess else None
    cl = ClParams(round(j(0.1, 0.2), 4), round(j(18.0, 24.0), 4)) if has_cl else None
    return ProsumerSpec(bus, tag, cdg, rdg, bess, cl, name=f"{tag.lower()}_{bus}")


def _pv_shape(steps: int, rng) -> np.ndarray:
    h = (np.arange(steps) + 0.5) * 24.0 / steps
    bell = np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None) ** 1.5
    cloud = np.clip(1.0 - 0.25 * np.abs(np.cumsum(rng.normal(0.0, 0.08, steps))), 0.4, 1.0)
    return bell * cloud


def _wt_shape(steps: int, rng) -> np.ndarray:
    x = np.empty(steps)
    level = 0.45 + 0.1 * rng.standard_normal()
    for t in range(steps):
        level = 0.45 + 0.95 * (level - 0.45) + 0.04 * rng.standard_normal()
        x[t] = level
    return np.clip(x, 0.0, 1.0)


def _load_shape(tag: str, steps: int, rng) -> np.ndarray:
    h = (np.arange(steps) + 0.5) * 24.0 / steps
    gauss = lambda c, w: np.exp(-0.5 * ((h - c) / w) ** 2)  # noqa: E731
    if tag == "Commercial":
        base = 0.35 + 0.65 * gauss(13.0, 3.5)
    elif tag == "Industrial":
        base = 0.75 + 0.2 * gauss(11.0, 4.0)
    elif tag == "Residential":
        base = 0.35 + 0.35 * gauss(8.0, 1.5) + 0.65 * gauss(19.5, 2.0)
    else:
        base = 0.45 + 0.3 * gauss(12.0, 4.0) + 0.35 * gauss(19.0, 2.0)
    return base * (1.0 + 0.05 * rng.standard_normal(steps))


def _profiles(spec: ProsumerSpec, n_days: int, steps: int, peak: float, rng) -> dict[str, np.ndarray]:
    load_p, rdg = [], []
    for _ in range(n_days):
        load_p.append(peak * (0.9 + 0.2 * rng.random()) * _load_shape(spec.scenario_tag, steps, rng))
        if spec.rdg is None:
            rdg.append(np.zeros(steps))
            continue
        kind = spec.rdg.kind
        shape = np.zeros(steps)
        if "PV" in kind:
            shape += _pv_shape(steps, rng)
        if "WT" in kind:
            shape += _wt_shape(steps, rng) * (0.6 if kind == "PV+WT" else 1.0)
        rdg.append(spec.rdg.s_max * np.clip(shape, 0.0, 1.0))
    p = np.clip(np.concatenate(load_p), 0.0, None)
    return {"load_p": p, "load_q": 0.3 * p, "rdg": np.concatenate(rdg)}


def tou_prices(n_days: int, steps: int = STEPS_PER_DAY) -> PriceSchedule:
    h = (np.arange(steps) + 0.5) * 24.0 / steps
    buy = np.full(steps, BUY_SHOULDER)
    buy[(h < 7.0) | (h >= 23.0)] = BUY_OFFPEAK
    buy[((h >= 10.0) & (h < 12.0)) | ((h >= 17.0) & (h < 21.0))] = BUY_PEAK
    sell = np.full(steps, SELL_PRICE)
    buy = np.tile(buy, n_days)
    sell = np.tile(sell, n_days)
    return PriceSchedule(buy, sell, None, LAMBDA_DSO)


def build_fixture(kind: str, out_dir, seed: int = 0, n_days: int | None = None,
                  steps_per_day: int = STEPS_PER_DAY, force: bool = False) -> Path:
    """Write a complete scenario directory and return its path."""
    if kind not in FIXTURE_KINDS:
        raise ConfigError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty (use --force to overwrite)")
    rng = np.random.default_rng(seed)
    if kind == "six_bus":
        net = six_bus_network()
        roster = [("Commercial", 3), ("Residential", 4), ("Industrial", 5)]
        scale, peak = 1.0, 0.6
        n_days = n_days or 6
    else:
        net = ieee141_like_network(rng)
        roster = [(tag, b) for tag, nodes in IEEE141_NODES.items() for b in nodes]
        roster.sort(key=lambda r: r[1])
        scale, peak = 0.25, 0.15
        n_days = n_days or 3
    prosumers = [_params(tag, bus, rng, scale) for tag, bus in roster]
    out.mkdir(parents=True, exist_ok=True)
    save_network(net, out / "network.json")
    save_roster(prosumers, out / "prosumers.json")
    for p in prosumers:
        series = _profiles(p, n_days, steps_per_day, peak, rng)
        for name, values in series.items():
            write_series(out / "profiles" / p.agent_id / f"{name}.csv", values)
    write_prices(out / "prices.csv", tou_prices(n_days, steps_per_day))
    splits = {"validation": [0], "test": [n_days - 1], "train": list(range(1, max(n_days - 1, 2)))}
    meta = {"kind": kind, "seed": seed, "steps_per_day": steps_per_day, "n_days": n_days,
            "lambda_dso": LAMBDA_DSO, "splits": splits}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
