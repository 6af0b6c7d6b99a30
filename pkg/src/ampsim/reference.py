"""Offer-based reference levels.

A unit's reference level at hour ``t`` is the quantity-weighted mean price of
its ECONOMIC steps priced inside the economic band, over the trailing window
``[t - window_days, t)``. Hours with no qualifying step have no reference
(``None`` / NaN) and the unit cannot be conduct-screened there.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import _kernels
from .data import Dataset, Status
from .errors import UnknownUnit

DEFAULT_WINDOW_DAYS = 90
DEFAULT_BAND = (0.0, 800.0)

_NS_PER_HOUR = 3_600_000_000_000


def hour_index(hours) -> np.ndarray:
    """Integer hours since the epoch for UTC timestamps."""
    idx = pd.DatetimeIndex(hours)
    return idx.as_unit("ns").asi8 // _NS_PER_HOUR


@dataclass(frozen=True)
class ReferenceLevelSeries:
    unit_id: str
    values: pd.Series  # indexed by hour, NaN = no reference
    window_days: int = DEFAULT_WINDOW_DAYS
    economic_band: tuple[float, float] = DEFAULT_BAND

    def at(self, hour) -> float | None:
        v = self.values.get(pd.Timestamp(hour), np.nan)
        return None if np.isnan(v) else float(v)


def _check_args(window_days, economic_band):
    if window_days <= 0:
        raise ValueError("window_days must be positive")
    lo, hi = economic_band
    if not lo < hi:
        raise ValueError("economic band must satisfy low < high")


def _qualifying(offers: pd.DataFrame, economic_band) -> pd.DataFrame:
    lo, hi = economic_band
    mask = (offers["status"] == Status.ECONOMIC.value) & (offers["price"] >= lo) & (offers["price"] <= hi)
    return offers.loc[mask]


def reference_level_at(
    offers: pd.DataFrame,
    hour,
    window_days: int = DEFAULT_WINDOW_DAYS,
    economic_band: tuple[float, float] = DEFAULT_BAND,
) -> float | None:
    """Reference level of one unit at ``hour`` computed directly from ``offers``.

    Steps at or after ``hour`` are ignored, so the full history of the unit
    may be passed.
    """
    _check_args(window_days, economic_band)
    t = pd.Timestamp(hour)
    start = t - pd.Timedelta(days=window_days)
    q = _qualifying(offers, economic_band)
    q = q[(q["hour"] >= start) & (q["hour"] < t)]
    w = q["quantity"].to_numpy(dtype=float)
    if w.size == 0 or w.sum() <= 0:
        return None
    return float(np.dot(q["price"].to_numpy(dtype=float), w) / w.sum())


def _unit_series(offers: pd.DataFrame, hours: pd.DatetimeIndex, window_days, economic_band) -> np.ndarray:
    q = _qualifying(offers, economic_band).sort_values(["hour", "segment"], kind="mergesort")
    return _kernels.rolling_weighted_mean(
        np.ascontiguousarray(hour_index(q["hour"]), dtype=np.int64),
        np.ascontiguousarray(q["price"].to_numpy(dtype=np.float64)),
        np.ascontiguousarray(q["quantity"].to_numpy(dtype=np.float64)),
        np.ascontiguousarray(hour_index(hours), dtype=np.int64),
        int(window_days) * 24,
    )


def rolling_reference_series(
    ds: Dataset,
    unit_id: str,
    window_days: int = DEFAULT_WINDOW_DAYS,
    economic_band: tuple[float, float] = DEFAULT_BAND,
) -> ReferenceLevelSeries:
    """Reference level of ``unit_id`` at every market hour of ``ds``."""
    _check_args(window_days, economic_band)
    offers = ds.offers[ds.offers["unit_id"] == unit_id]
    if offers.empty:
        raise UnknownUnit(f"unit {unit_id!r} has no offers in the dataset")
    hours = ds.hours
    values = _unit_series(offers, hours, window_days, economic_band)
    return ReferenceLevelSeries(unit_id, pd.Series(values, index=hours, name=unit_id), int(window_days), tuple(economic_band))


def reference_table(
    ds: Dataset,
    window_days: int = DEFAULT_WINDOW_DAYS,
    economic_band: tuple[float, float] = DEFAULT_BAND,
    threads: int = 1,
) -> pd.DataFrame:
    """Wide frame of reference levels: one row per market hour, one column per unit."""
    _check_args(window_days, economic_band)
    hours = ds.hours
    groups = {u: g for u, g in ds.offers.groupby("unit_id", sort=True)}
    units = list(groups)

    def one(u):
        return _unit_series(groups[u], hours, window_days, economic_band)

    if threads > 1 and len(units) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(one, units))
    else:
        cols = [one(u) for u in units]
    data = np.column_stack(cols) if cols else np.empty((len(hours), 0))
    return pd.DataFrame(data, index=hours, columns=pd.Index(units, name="unit_id"))


def references_long(table: pd.DataFrame) -> pd.DataFrame:
    """``hour, unit_id, reference`` rows from :func:`reference_table` output."""
    long = table.stack(future_stack=True).rename("reference").reset_index()
    long.columns = ["hour", "unit_id", "reference"]
    return long
