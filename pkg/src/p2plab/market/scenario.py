"""Scenario ingestion: price schedules, profile CSVs and the scenario directory."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..netmodel import Network, load_network
from ..prosumer import PriceStep, ProsumerSpec, load_roster

STEPS_PER_DAY = 96
MAX_MISSING_FRACTION = 0.05
SERIES = ("load_p", "load_q", "rdg")


@dataclass
class PriceSchedule:
    lambda_buy: np.ndarray
    lambda_sell: np.ndarray
    lambda_p2p: np.ndarray
    lambda_dso: float = 0.0

    def __post_init__(self):
        self.lambda_buy = np.asarray(self.lambda_buy, dtype=float)
        self.lambda_sell = np.asarray(self.lambda_sell, dtype=float)
        if self.lambda_p2p is None:
            self.lambda_p2p = 0.5 * (self.lambda_buy + self.lambda_sell)
        self.lambda_p2p = np.asarray(self.lambda_p2p, dtype=float)
        n = len(self.lambda_buy)
        if len(self.lambda_sell) != n or len(self.lambda_p2p) != n:
            raise DataError("price series lengths differ")
        arrays = (self.lambda_buy, self.lambda_sell, self.lambda_p2p)
        if not all(np.all(np.isfinite(a)) for a in arrays) or not math.isfinite(self.lambda_dso):
            raise DataError("prices must be finite")
        tol = 1e-12
        if np.any(self.lambda_sell > self.lambda_p2p + tol) or np.any(self.lambda_p2p > self.lambda_buy + tol):
            raise DataError("prices must satisfy sell <= p2p <= buy at every step")

    def __len__(self):
        return len(self.lambda_buy)

    def at(self, t: int) -> PriceStep:
        return PriceStep(
            buy=float(self.lambda_buy[t]),
            sell=float(self.lambda_sell[t]),
            p2p=float(self.lambda_p2p[t]),
            dso=float(self.lambda_dso),
        )

    def window(self, start: int, stop: int) -> "PriceSchedule":
        return PriceSchedule(
            self.lambda_buy[start:stop],
            self.lambda_sell[start:stop],
            self.lambda_p2p[start:stop],
            self.lambda_dso,
        )


@dataclass
class ScenarioData:
    """Per-agent load and renewable availability series of common length."""

    horizon: int
    load_p: dict[str, np.ndarray]
    load_q: dict[str, np.ndarray]
    rdg_avail: dict[str, np.ndarray]

    def __post_init__(self):
        agents = set(self.load_p)
        if set(self.load_q) != agents or set(self.rdg_avail) != agents:
            raise DataError("every agent needs load_p, load_q and rdg series")
        for name in agents:
            for series in (self.load_p[name], self.load_q[name], self.rdg_avail[name]):
                if len(series) != self.horizon:
                    raise DataError(f"series for {name} has length {len(series)} != {self.horizon}")
            if np.any(self.rdg_avail[name] < 0):
                raise DataError(f"negative rdg availability for {name}")

    @property
    def agents(self) -> list[str]:
        return list(self.load_p)

    def window(self, start: int, stop: int) -> "ScenarioData":
        return ScenarioData(
            horizon=stop - start,
            load_p={k: v[start:stop] for k, v in self.load_p.items()},
            load_q={k: v[start:stop] for k, v in self.load_q.items()},
            rdg_avail={k: v[start:stop] for k, v in self.rdg_avail.items()},
        )


def read_series(path, horizon: int) -> np.ndarray:
    """Read a ``t,value`` CSV into a length-``horizon`` array.

    Missing interior points (absent rows or empty values) are linearly
    interpolated; more than 5% missing, or a missing endpoint, is an error.
    """
    values = np.full(horizon, np.nan)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["t", "value"]:
            raise DataError(f"{path}: expected header 't,value'")
        for row in reader:
            if not row:
                continue
            t = int(row[0])
            if not 0 <= t < horizon:
                raise DataError(f"{path}: time index {t} outside horizon {horizon}")
            if len(row) > 1 and row[1].strip():
                values[t] = float(row[1])
    missing = np.isnan(values)
    n_missing = int(missing.sum())
    if n_missing > MAX_MISSING_FRACTION * horizon:
        raise DataError(f"{path}: {n_missing} of {horizon} points missing")
    if n_missing:
        if missing[0] or missing[-1]:
            raise DataError(f"{path}: cannot interpolate a missing endpoint")
        idx = np.arange(horizon)
        values[missing] = np.interp(idx[missing], idx[~missing], values[~missing])
    return values


def write_series(path, values) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in enumerate(values):
            w.writerow([t, repr(float(v))])


def load_profiles(paths: dict[str, dict[str, str]], horizon: int) -> ScenarioData:
    """Load ``{agent: {"load_p": path, "load_q": path, "rdg": path}}``."""
    load_p, load_q, rdg = {}, {}, {}
    for agent, files in paths.items():
        missing = [s for s in SERIES if s not in files]
        if missing:
            raise DataError(f"{agent}: missing series {missing}")
        load_p[agent] = read_series(files["load_p"], horizon)
        load_q[agent] = read_series(files["load_q"], horizon)
        rdg[agent] = read_series(files["rdg"], horizon)
    return ScenarioData(horizon, load_p, load_q, rdg)


def read_prices(path, horizon: int, lambda_dso: float) -> PriceSchedule:
    buy = np.full(horizon, np.nan)
    sell = np.full(horizon, np.nan)
    p2p = np.full(horizon, np.nan)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            t = int(row["t"])
            if not 0 <= t < horizon:
                raise DataError(f"{path}: time index {t} outside horizon")
            buy[t] = float(row["buy"])
            sell[t] = float(row["sell"])
            if row.get("p2p", "").strip():
                p2p[t] = float(row["p2p"])
    if np.isnan(buy).any() or np.isnan(sell).any():
        raise DataError(f"{path}: incomplete price series")
    mid = 0.5 * (buy + sell)
    p2p = np.where(np.isnan(p2p), mid, p2p)
    return PriceSchedule(buy, sell, p2p, lambda_dso)


def write_prices(path, prices: PriceSchedule) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "buy", "sell", "p2p"])
        for t in range(len(prices)):
            w.writerow([t, repr(float(prices.lambda_buy[t])), repr(float(prices.lambda_sell[t])),
                        repr(float(prices.lambda_p2p[t]))])


@dataclass
class Scenario:
    """A scenario directory loaded into memory; series may span several days."""

    network: Network
    prosumers: list[ProsumerSpec]
    data: ScenarioData
    prices: PriceSchedule
    steps_per_day: int = STEPS_PER_DAY
    splits: dict[str, list[int]] = field(default_factory=dict)
    root: Path | None = None

    @property
    def n_days(self) -> int:
        return self.data.horizon // self.steps_per_day

    def day(self, d: int) -> tuple[ScenarioData, PriceSchedule]:
        if not 0 <= d < self.n_days:
            raise DataError(f"day {d} outside 0..{self.n_days - 1}")
        a, b = d * self.steps_per_day, (d + 1) * self.steps_per_day
        return self.data.window(a, b), self.prices.window(a, b)

    def split(self, name: str) -> list[int]:
        if name in self.splits:
            return list(self.splits[name])
        if name == "train":
            return list(range(self.n_days))
        raise DataError(f"scenario has no {name!r} split")


def load_scenario(root) -> Scenario:
    """Load ``network.json``, ``prosumers.json``, ``prices.csv`` and profiles."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"scenario directory {root} not found")
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    steps = int(meta.get("steps_per_day", STEPS_PER_DAY))
    n_days = int(meta.get("n_days", 1))
    horizon = steps * n_days
    network = load_network(root / "network.json")
    prosumers = load_roster(root / "prosumers.json")
    for p in prosumers:
        if not 0 <= p.bus_id < network.n_bus or p.bus_id == network.slack:
            raise DataError(f"prosumer {p.agent_id} sits on invalid bus {p.bus_id}")
    paths = {
        p.agent_id: {s: root / "profiles" / p.agent_id / f"{s}.csv" for s in SERIES}
        for p in prosumers
    }
    data = load_profiles(paths, horizon)
    prices = read_prices(root / "prices.csv", horizon, float(meta.get("lambda_dso", 0.0)))
    splits = {k: [int(d) for d in v] for k, v in meta.get("splits", {}).items()}
    return Scenario(network, prosumers, data, prices, steps, splits, root)
