"""Energy-trading integration: add P2P and grid exchange to a device model."""

from __future__ import annotations

import numpy as np

from ..errors import DataError, P2PLabError
from ..market.scenario import PriceSchedule
from .ir import Constraint, LinTerm, ModelIR, Term, Variable

TRADE_LIMIT = 10.0  # p.u.; generous box keeping every variable bounded

PRICE_REFS = ["lambda_buy", "lambda_sell", "lambda_p2p", "lambda_dso"]


class IntegrationError(P2PLabError):
    pass


def integrate_trading(
    ir: ModelIR, prices: PriceSchedule | None = None, allow_p2p: bool = True,
    trade_limit: float = TRADE_LIMIT,
) -> ModelIR:
    """Return a copy of ``ir`` extended with p_p2p, p_grid and the buy/sell split.

    The balance ``p_ex = -p_grid - p_p2p`` is stated with p_ex expanded over the
    device variables. Grid cost is piecewise linear through ``grid_buy`` and
    ``grid_sell``; P2P pays ``lambda_dso * |p_p2p| + lambda_p2p * p_p2p``. With
    ``allow_p2p=False`` the P2P variable is pinned to zero (grid-only model).
    """
    if ir.meta.get("integrated"):
        raise IntegrationError("trading variables already integrated")
    if prices is not None:
        if np.any(prices.lambda_sell > prices.lambda_buy):
            raise DataError("sell price above buy price makes the grid cost non-convex")
        if prices.lambda_dso < 0:
            raise DataError("negative DSO fee makes the P2P cost non-convex")
    out = ir.copy()
    lim = trade_limit if allow_p2p else 0.0
    out.variables += [
        Variable("p_p2p", -lim, lim),
        Variable("p_grid", -trade_limit, trade_limit),
        Variable("grid_buy", 0.0, trade_limit),
        Variable("grid_sell", 0.0, trade_limit),
    ]
    terms = [LinTerm("p_grid", 1.0), LinTerm("p_p2p", 1.0)]
    for comp, parts in ir.meta.get("action_map", {}).items():
        sign = -1.0 if comp == "p_bess" else 1.0
        if comp == "q_rdg":
            continue
        for var, coef in parts:
            terms.append(LinTerm(var, sign * coef))
    out.constraints.append(Constraint("balance", "eq", terms, 0.0, rhs_ref="load_p"))
    out.constraints.append(Constraint(
        "grid_split", "eq",
        [LinTerm("p_grid", 1.0), LinTerm("grid_buy", -1.0), LinTerm("grid_sell", 1.0)], 0.0,
    ))
    out.objective += [
        Term("lin", "grid_buy", 1.0, coef_ref="lambda_buy"),
        Term("lin", "grid_sell", -1.0, coef_ref="lambda_sell"),
        Term("abs", "p_p2p", 1.0, coef_ref="lambda_dso"),
        Term("lin", "p_p2p", 1.0, coef_ref="lambda_p2p"),
    ]
    out.data_refs = sorted(set(out.data_refs) | set(PRICE_REFS) | {"load_p"})
    out.meta = dict(out.meta, integrated=True)
    for name in ("p_p2p", "p_grid", "grid_buy", "grid_sell"):
        out.meta.setdefault("catalog", {})[name] = {
            "lb": out.var(name).lb, "ub": out.var(name).ub, "ub_ref": None, "ub_scale": 1.0,
        }
    return out
