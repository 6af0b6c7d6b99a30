"""Structural score variables: per-firm residual supply index and lagged congestion."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import pandas as pd

from .data import AreaRecord, Dataset, Status
from .errors import NegativeInput, NoLaggedData, ZeroDenominator, ZeroTotalLoad

RSI_CUTOFF = 1.0
CONGESTION_CUTOFF = 0.04


class Side(str, enum.Enum):
    """Which side of the cutoff is treated (screened)."""

    LEQ = "LEQ"
    GEQ = "GEQ"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class ScoreKind(str, enum.Enum):
    RSI = "RSI"
    CONGESTION = "CONGESTION"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


DEFAULT_CUTOFF = {ScoreKind.RSI: RSI_CUTOFF, ScoreKind.CONGESTION: CONGESTION_CUTOFF}
DEFAULT_SIDE = {ScoreKind.RSI: Side.LEQ, ScoreKind.CONGESTION: Side.GEQ}


def is_treated(score, cutoff: float, side: Side):
    """Treatment indicator; the cutoff itself is treated on either side."""
    side = Side(side)
    return score <= cutoff if side is Side.LEQ else score >= cutoff


@dataclass(frozen=True)
class FirmHourSupply:
    hour: pd.Timestamp
    bidder_id: str
    firm_supply: float
    market_supply: float


@dataclass(frozen=True)
class ScoreSeries:
    """Score values with the cutoff rule that turns them into treatment.

    ``values`` has columns ``hour, score`` and, for per-firm scores,
    ``bidder_id``. NaN scores are missing (e.g. the first congestion hour).
    """

    kind: ScoreKind
    values: pd.DataFrame
    cutoff: float
    treated_side: Side

    @property
    def per_bidder(self) -> bool:
        return "bidder_id" in self.values

    def at(self, hour):
        """``{bidder_id: score}`` for per-firm scores, else a float (NaN if missing)."""
        rows = self.values[self.values["hour"] == pd.Timestamp(hour)]
        if self.per_bidder:
            return dict(zip(rows["bidder_id"], rows["score"].astype(float)))
        return float(rows["score"].iloc[0]) if len(rows) else float("nan")

    def treated(self) -> pd.Series:
        s = self.values["score"]
        return is_treated(s, self.cutoff, self.treated_side) & s.notna()


def rsi(market_supply: float, firm_supply: float, load_forecast: float, reserves: float) -> float:
    """Residual supply index ``(market - firm) / (load + reserves)``."""
    if min(market_supply, firm_supply, load_forecast, reserves) < 0:
        raise NegativeInput("supply, load and reserves must be non-negative")
    if firm_supply > market_supply:
        raise NegativeInput("firm supply exceeds market supply")
    denom = load_forecast + reserves
    if denom <= 0:
        raise ZeroDenominator("load forecast plus reserves must be positive")
    return (market_supply - firm_supply) / denom


def unit_supply(offers: pd.DataFrame, must_take: str = "max_output") -> pd.DataFrame:
    """Flexible capacity per unit-hour.

    A unit-hour is available when any of its steps is not UNAVAILABLE; its
    capacity is ``max_output``. Units with a MUST_RUN step lose their
    must-take energy, taken as ``max_output`` (default) or, with
    ``must_take="segments"``, as the summed MUST_RUN step quantities.
    """
    if must_take not in ("max_output", "segments"):
        raise ValueError("must_take must be 'max_output' or 'segments'")
    o = offers.assign(
        _avail=offers["status"] != Status.UNAVAILABLE.value,
        _mr=offers["status"] == Status.MUST_RUN.value,
    )
    o["_mr_q"] = np.where(o["_mr"], o["quantity"], 0.0)
    g = o.groupby(["hour", "unit_id"], sort=True)
    out = g.agg(
        bidder_id=("bidder_id", "first"),
        available=("_avail", "any"),
        must_run=("_mr", "any"),
        capacity=("max_output", "max"),
        mr_quantity=("_mr_q", "sum"),
    )
    if must_take == "max_output":
        taken = np.where(out["must_run"], out["capacity"], 0.0)
    else:
        taken = np.minimum(out["mr_quantity"], out["capacity"])
    out["supply"] = np.where(out["available"], out["capacity"] - taken, 0.0)
    return out.reset_index()


def firm_hour_supply(ds: Dataset, must_take: str = "max_output") -> pd.DataFrame:
    """``hour, bidder_id, firm_supply, market_supply`` for every firm present each hour."""
    units = unit_supply(ds.offers, must_take)
    firms = units.groupby(["hour", "bidder_id"], sort=True)["supply"].sum().rename("firm_supply").reset_index()
    market = units.groupby("hour", sort=True)["supply"].sum().rename("market_supply")
    return firms.join(market, on="hour")


def market_rsi_series(ds: Dataset, must_take: str = "max_output", cutoff: float = RSI_CUTOFF) -> ScoreSeries:
    """Per bidder-hour RSI with load forecasts plus reserves as the denominator."""
    fs = firm_hour_supply(ds, must_take)
    m = ds.market.set_index("hour")
    missing = ~fs["hour"].isin(m.index)
    if missing.any():
        raise KeyError(f"no market record for hour {fs.loc[missing, 'hour'].iloc[0]}")
    denom = (m["load_forecast"] + m["reserves"]).reindex(fs["hour"]).to_numpy()
    if (denom <= 0).any():
        raise ZeroDenominator("load forecast plus reserves must be positive")
    if (fs["firm_supply"] < 0).any() or (fs["market_supply"] < 0).any():
        raise NegativeInput("negative supply")
    fs["score"] = (fs["market_supply"].to_numpy() - fs["firm_supply"].to_numpy()) / denom
    return ScoreSeries(ScoreKind.RSI, fs[["hour", "bidder_id", "firm_supply", "market_supply", "score"]], cutoff, Side.LEQ)


def pivotal_hour_share(series: ScoreSeries) -> float:
    """Share of hours in which at least one firm is at or below the cutoff."""
    v = series.values.dropna(subset=["score"])
    if v.empty:
        return float("nan")
    lowest = v.groupby("hour")["score"].min()
    return float(is_treated(lowest, series.cutoff, series.treated_side).mean())


def congestion_index(areas: Iterable[AreaRecord] | pd.DataFrame | None) -> float:
    """Load-weighted shadow price over non-excluded areas of the previous hour."""
    if areas is None:
        raise NoLaggedData("no area data for the previous hour")
    if isinstance(areas, pd.DataFrame):
        rows = list(zip(areas["load"], areas["shadow_price"], areas["is_excluded"]))
    else:
        rows = [(a.load, a.shadow_price, a.is_excluded) for a in areas]
    if not rows:
        raise NoLaggedData("no area data for the previous hour")
    kept = [(float(l), float(p)) for l, p, ex in rows if not ex]
    total = sum(l for l, _ in kept)
    if not kept or total <= 0:
        raise ZeroTotalLoad("non-excluded areas carry no load")
    return sum(l / total * p for l, p in kept)


def congestion_series(ds: Dataset, cutoff: float = CONGESTION_CUTOFF) -> ScoreSeries:
    """Market-level congestion score for every market hour (NaN without lagged data)."""
    hours = ds.hours
    a = ds.areas[~ds.areas["is_excluded"].astype(bool)]
    total = a.groupby("hour")["load"].sum()
    weighted = (a["load"] * a["shadow_price"]).groupby(a["hour"]).sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        index = (weighted / total).where(total > 0)
    lagged = index.reindex(hours - pd.Timedelta(hours=1)).to_numpy()
    values = pd.DataFrame({"hour": hours, "score": lagged})
    return ScoreSeries(ScoreKind.CONGESTION, values, cutoff, Side.GEQ)
