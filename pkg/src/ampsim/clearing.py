"""Uniform-price merit-order clearing of an hourly incremental bid stack.

:func:`clear` treats the marginal step as divisible and sets the price at
that step. :func:`clear_ilp_oracle` solves the indivisible-step problem
exactly (minimum total cost subject to accepted quantity >= load) and is used
to cross-check the greedy dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import _kernels
from .data import Status
from .errors import EmptyStack, InsufficientSupply

ENUMERATION_LIMIT = 20
ORACLE_LIMIT = 100


@dataclass(frozen=True)
class ClearingResult:
    hour: pd.Timestamp | None
    clearing_price: float
    dispatched: list[tuple[str, int, float]] = field(default_factory=list)
    total_cost: float = 0.0
    feasible: bool = True

    @property
    def accepted(self) -> set[tuple[str, int]]:
        return {(u, s) for u, s, mw in self.dispatched if mw > 0}

    @property
    def accepted_mw(self) -> float:
        return float(sum(mw for _, _, mw in self.dispatched))


def _stack(offers: pd.DataFrame):
    """Non-UNAVAILABLE steps in merit order (price, then unit_id, then segment)."""
    s = offers[offers["status"] != Status.UNAVAILABLE.value]
    if s.empty or not (s["status"] == Status.ECONOMIC.value).any():
        raise EmptyStack("no available economic step in the bid stack")
    units = s["unit_id"].to_numpy()
    _, unit_code = np.unique(units, return_inverse=True)
    order = np.lexsort((s["segment"].to_numpy(), unit_code, s["price"].to_numpy()))
    return (
        units[order],
        s["segment"].to_numpy()[order].astype(np.int64),
        np.ascontiguousarray(s["price"].to_numpy(dtype=np.float64)[order]),
        np.ascontiguousarray(s["quantity"].to_numpy(dtype=np.float64)[order]),
    )


def _hour_of(offers: pd.DataFrame, hour):
    if hour is not None:
        return pd.Timestamp(hour)
    hours = offers["hour"].unique() if "hour" in offers else []
    return pd.Timestamp(hours[0]) if len(hours) == 1 else None


def clear(offers: pd.DataFrame, load: float, hour=None) -> ClearingResult:
    """Divisible merit-order clearing.

    Steps are accepted in ascending price order (ties: lower ``unit_id``,
    then lower segment) until cumulative quantity reaches ``load``; the
    marginal step is accepted partially and sets the uniform price.
    """
    if not load > 0:
        raise ValueError("load must be positive")
    units, segs, price, qty = _stack(offers)
    if qty.sum() < load:
        raise InsufficientSupply(f"stack offers {qty.sum():.6g} MW against load {load:.6g} MW")
    order = np.arange(len(price), dtype=np.int64)
    accepted, marginal = _kernels.merit_order_dispatch(qty, order, float(load))
    if marginal < 0:
        raise InsufficientSupply(f"stack offers {qty.sum():.6g} MW against load {load:.6g} MW")
    taken = np.flatnonzero(accepted > 0)
    dispatched = [(str(units[i]), int(segs[i]), float(accepted[i])) for i in taken]
    return ClearingResult(
        _hour_of(offers, hour),
        float(price[marginal]),
        dispatched,
        float(np.dot(accepted[taken], price[taken])),
        True,
    )


def clear_ilp_oracle(offers: pd.DataFrame, load: float, hour=None, method: str = "auto") -> ClearingResult:
    """Exact indivisible-step clearing.

    Minimises ``sum(x * price * quantity)`` subject to
    ``sum(x * quantity) >= load`` with binary ``x``; the price is the highest
    accepted step price. ``method`` is ``"enumerate"`` (every subset, at most
    20 steps by default), ``"bnb"`` (depth-first branch and bound with the
    fractional bound) or ``"auto"``.
    """
    if not load > 0:
        raise ValueError("load must be positive")
    units, segs, price, qty = _stack(offers)
    n = len(price)
    if n > ORACLE_LIMIT:
        raise ValueError(f"oracle supports at most {ORACLE_LIMIT} steps, got {n}")
    if qty.sum() < load:
        raise InsufficientSupply(f"stack offers {qty.sum():.6g} MW against load {load:.6g} MW")
    if method == "auto":
        method = "enumerate" if n <= ENUMERATION_LIMIT else "bnb"
    if method == "enumerate":
        mask, cost, found = _kernels.enumerate_min_cover(price * qty, qty, float(load))
    elif method == "bnb":
        mask, cost, found = _bnb(price, qty, float(load))
    else:
        raise ValueError(f"unknown method {method!r}")
    if not found:
        raise InsufficientSupply("no feasible selection")
    sel = np.flatnonzero(mask)
    dispatched = [(str(units[i]), int(segs[i]), float(qty[i])) for i in sel]
    return ClearingResult(_hour_of(offers, hour), float(price[sel].max()), dispatched, float(cost), True)


def _bnb(price, qty, load):
    # negative-cost steps are always worth taking; zero-quantity steps never matter
    forced = price < 0
    free = ~forced & (qty > 0)
    need = load - qty[forced].sum()
    idx = np.flatnonzero(free)
    sub, sub_cost, found = _kernels.branch_and_bound_cover(
        np.ascontiguousarray(price[idx]), np.ascontiguousarray(qty[idx]), float(need)
    )
    mask = forced.copy()
    mask[idx[sub]] = True
    return mask, float(np.dot(price[mask], qty[mask])) if found else 0.0, found


def clear_mitigated(offers: pd.DataFrame, mitigated_offers: pd.DataFrame, load: float, hour=None):
    """Clear the original and the mitigated stack at the same load.

    The mitigated price never exceeds the original as long as the mitigated
    stack only lowers step prices.
    """
    return clear(offers, load, hour), clear(mitigated_offers, load, hour)


def stack_frame(prices, quantities, unit_ids=None, hour=None) -> pd.DataFrame:
    """Small helper to build an ECONOMIC single-step-per-unit stack."""
    n = len(prices)
    unit_ids = unit_ids if unit_ids is not None else [f"U{i:03d}" for i in range(n)]
    return pd.DataFrame(
        {
            "hour": pd.Timestamp(hour) if hour is not None else pd.Timestamp("2019-01-01T00:00Z"),
            "unit_id": list(unit_ids),
            "bidder_id": list(unit_ids),
            "segment": np.ones(n, dtype=np.int64),
            "price": np.asarray(prices, dtype=float),
            "quantity": np.asarray(quantities, dtype=float),
            "status": Status.ECONOMIC.value,
            "max_output": np.asarray(quantities, dtype=float),
        }
    )
