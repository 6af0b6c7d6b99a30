"""Bid, market and area data model with validated CSV ingestion.

Offers are held as a pandas frame with one row per price-quantity step
(``hour, unit_id, bidder_id, segment, price, quantity, status,
max_output``), sorted by ``(hour, unit_id, segment)``. The row-level
dataclasses below exist for callers that want typed records; the frame is
what the numerical modules consume.
"""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .errors import (
    DuplicateSegment,
    MalformedRow,
    NonMonotoneSteps,
    SegmentCapExceeded,
)

ISONE_SEGMENT_CAP = 10
NYISO_SEGMENT_CAP = 12

# csv name -> frame name
OFFER_COLUMNS = {
    "hour": "hour",
    "unit_id": "unit_id",
    "bidder_id": "bidder_id",
    "segment": "segment",
    "price_usd_per_mwh": "price",
    "quantity_mw": "quantity",
    "status": "status",
    "max_output_mw": "max_output",
}
MARKET_COLUMNS = {
    "hour": "hour",
    "load_forecast_mwh": "load_forecast",
    "reserves_mwh": "reserves",
    "gas_price_usd_per_mmbtu": "gas_price",
}
# optional demand column used for surplus accounting
MARKET_OPTIONAL_COLUMNS = {"demand_mwh": "demand"}
AREA_COLUMNS = {
    "hour": "hour",
    "area_id": "area_id",
    "load_mwh": "load",
    "shadow_price_usd_per_mwh": "shadow_price",
    "is_excluded": "is_excluded",
}

_HOUR_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}(:00(:00)?)?(Z|\+00:00)$")
_HOUR_FMT = "%Y-%m-%dT%H:%MZ"
_TRUE = {"true", "1", "yes", "t"}
_FALSE = {"false", "0", "no", "f"}


class Status(str, enum.Enum):
    ECONOMIC = "ECONOMIC"
    MUST_RUN = "MUST_RUN"
    UNAVAILABLE = "UNAVAILABLE"


@dataclass(frozen=True)
class IncrementalOffer:
    """One price-quantity step of a unit-hour bid."""

    hour: pd.Timestamp
    unit_id: str
    bidder_id: str
    segment: int
    price: float
    quantity: float
    status: Status
    max_output: float


@dataclass(frozen=True)
class AreaRecord:
    area_id: str
    load: float
    shadow_price: float
    is_excluded: bool


@dataclass(frozen=True)
class MarketHourRecord:
    hour: pd.Timestamp
    load_forecast: float
    reserves: float
    gas_price: float
    areas: tuple[AreaRecord, ...] = ()
    demand: float | None = None


@dataclass(frozen=True)
class Finding:
    """A single invariant violation reported by :func:`validate_dataset`."""

    kind: str
    location: str
    message: str


def format_hour(ts) -> str:
    return pd.Timestamp(ts).strftime(_HOUR_FMT)


def _parse_hours(raw: pd.Series, first_line: int) -> pd.Series:
    ok = raw.str.match(_HOUR_RE)
    if not ok.all():
        i = int(np.flatnonzero(~ok.to_numpy())[0])
        raise MalformedRow(
            first_line + i,
            f"hour {raw.iloc[i]!r} is not an hourly ISO-8601 UTC timestamp",
        )
    return pd.to_datetime(raw, format="ISO8601", utc=True)


def _to_floats(raw: pd.Series) -> np.ndarray:
    """Exact (round-trip) string to float conversion; unparseable cells become NaN."""
    try:
        return raw.to_numpy(dtype=str).astype(np.float64)
    except ValueError:
        return np.array([_float_or_nan(x) for x in raw], dtype=float)


def _float_or_nan(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return math.nan


def _parse_float(raw: pd.Series, name: str, first_line: int, *, nonneg=False, positive=False) -> np.ndarray:
    values = _to_floats(raw)
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(values)
        if nonneg:
            bad |= values < 0
        if positive:
            bad |= values <= 0
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        if not np.isfinite(values[i]):
            reason = "not a finite number"
        else:
            reason = "must be positive" if positive else "must be non-negative"
        raise MalformedRow(first_line + i, f"{name} {raw.iloc[i]!r}: {reason}")
    return values


def _parse_bool(raw: pd.Series, name: str, first_line: int) -> np.ndarray:
    low = raw.str.strip().str.lower()
    is_true = low.isin(_TRUE)
    bad = ~(is_true | low.isin(_FALSE))
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedRow(first_line + i, f"{name} {raw.iloc[i]!r} is not a boolean")
    return is_true.to_numpy()


def _read_raw(path, columns: Mapping[str, str], optional: Mapping[str, str] = {}) -> pd.DataFrame:
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    header = list(raw.columns)
    missing = [c for c in columns if c not in header]
    extra = [c for c in header if c not in columns and c not in optional]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing columns {missing}")
        if extra:
            parts.append(f"unexpected columns {extra}")
        raise MalformedRow(1, "; ".join(parts))
    for name in header:
        empty = raw[name].str.strip() == ""
        if name not in optional and empty.any():
            i = int(np.flatnonzero(empty.to_numpy())[0])
            raise MalformedRow(i + 2, f"empty {name}")
    return raw


def load_offers_csv(path, segment_cap: int = NYISO_SEGMENT_CAP) -> pd.DataFrame:
    """Read and validate an offers file.

    Parameters
    ----------
    path : path-like
        CSV with the columns in ``OFFER_COLUMNS`` (any order).
    segment_cap : int
        Maximum steps per unit-hour (10 for ISO-NE, 12 for NYISO).

    Returns
    -------
    pandas.DataFrame
        Offers sorted by ``(hour, unit_id, segment)``.

    Raises
    ------
    MalformedRow, DuplicateSegment, SegmentCapExceeded, NonMonotoneSteps
    """
    raw = _read_raw(path, OFFER_COLUMNS)
    first = 2
    hours = _parse_hours(raw["hour"], first)
    seg = pd.to_numeric(raw["segment"], errors="coerce")
    bad = seg.isna() | (seg != seg.round()) | (seg < 1)
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedRow(first + i, f"segment {raw['segment'].iloc[i]!r} is not a positive integer")
    status = raw["status"].str.strip().str.upper()
    bad = ~status.isin([s.value for s in Status])
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedRow(first + i, f"status {raw['status'].iloc[i]!r} is not one of {[s.value for s in Status]}")
    frame = pd.DataFrame(
        {
            "hour": hours,
            "unit_id": raw["unit_id"].str.strip(),
            "bidder_id": raw["bidder_id"].str.strip(),
            "segment": seg.astype(np.int64),
            "price": _parse_float(raw["price_usd_per_mwh"], "price", first),
            "quantity": _parse_float(raw["quantity_mw"], "quantity", first, nonneg=True),
            "status": status,
            "max_output": _parse_float(raw["max_output_mw"], "max_output", first, nonneg=True),
        }
    )
    frame["_line"] = np.arange(first, first + len(frame))
    check_offer_frame(frame, segment_cap)
    return sort_offers(frame.drop(columns="_line"))


def sort_offers(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.sort_values(["hour", "unit_id", "segment"], kind="mergesort").reset_index(drop=True)


def check_offer_frame(frame: pd.DataFrame, segment_cap: int) -> None:
    """Raise on the first offer invariant violated by ``frame``."""
    lines = frame["_line"] if "_line" in frame else pd.Series(np.arange(len(frame)) + 2, index=frame.index)
    keys = ["hour", "unit_id", "segment"]
    dup = frame.duplicated(keys, keep="first")
    if dup.any():
        i = np.flatnonzero(dup.to_numpy())[0]
        row = frame.iloc[i]
        raise DuplicateSegment(
            f"line {lines.iloc[i]}: segment {row.segment} repeated for unit {row.unit_id} at {format_hour(row.hour)}"
        )
    over = frame["segment"] > segment_cap
    counts = frame.groupby(["hour", "unit_id"], sort=False)["segment"].transform("size")
    over |= counts > segment_cap
    if over.any():
        i = np.flatnonzero(over.to_numpy())[0]
        row = frame.iloc[i]
        raise SegmentCapExceeded(
            f"line {lines.iloc[i]}: unit {row.unit_id} at {format_hour(row.hour)} exceeds the cap of {segment_cap} segments"
        )
    ordered = frame.assign(_l=lines.to_numpy()).sort_values(keys, kind="mergesort")
    same = (ordered["hour"].to_numpy()[1:] == ordered["hour"].to_numpy()[:-1]) & (
        ordered["unit_id"].to_numpy()[1:] == ordered["unit_id"].to_numpy()[:-1]
    )
    prices = ordered["price"].to_numpy()
    dec = same & (prices[1:] < prices[:-1])
    if dec.any():
        i = np.flatnonzero(dec)[0] + 1
        row = ordered.iloc[i]
        raise NonMonotoneSteps(
            f"line {row._l}: unit {row.unit_id} at {format_hour(row.hour)} has segment {row.segment} "
            f"priced {row.price} below the previous step {prices[i - 1]}"
        )


def write_offers_csv(frame: pd.DataFrame, path) -> None:
    """Write offers in canonical column order and sort order."""
    frame = sort_offers(frame)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(OFFER_COLUMNS))
        for r in zip(
            frame["hour"].dt.strftime(_HOUR_FMT),
            frame["unit_id"],
            frame["bidder_id"],
            frame["segment"],
            frame["price"],
            frame["quantity"],
            frame["status"],
            frame["max_output"],
        ):
            w.writerow([r[0], r[1], r[2], int(r[3]), repr(float(r[4])), repr(float(r[5])), r[6], repr(float(r[7]))])


def load_market_csv(path) -> pd.DataFrame:
    raw = _read_raw(path, MARKET_COLUMNS, MARKET_OPTIONAL_COLUMNS)
    first = 2
    frame = pd.DataFrame(
        {
            "hour": _parse_hours(raw["hour"], first),
            "load_forecast": _parse_float(raw["load_forecast_mwh"], "load_forecast", first, positive=True),
            "reserves": _parse_float(raw["reserves_mwh"], "reserves", first, nonneg=True),
            "gas_price": _parse_float(raw["gas_price_usd_per_mmbtu"], "gas_price", first),
        }
    )
    if "demand_mwh" in raw:
        frame["demand"] = _parse_float(raw["demand_mwh"], "demand", first, nonneg=True)
    dup = frame["hour"].duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise MalformedRow(first + i, f"second record for hour {raw['hour'].iloc[i]}")
    return frame.sort_values("hour", kind="mergesort").reset_index(drop=True)


def write_market_csv(frame: pd.DataFrame, path) -> None:
    frame = frame.sort_values("hour", kind="mergesort")
    cols = list(MARKET_COLUMNS) + (["demand_mwh"] if "demand" in frame else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for _, r in frame.iterrows():
            row = [format_hour(r.hour), repr(float(r.load_forecast)), repr(float(r.reserves)), repr(float(r.gas_price))]
            if "demand" in frame:
                row.append(repr(float(r.demand)))
            w.writerow(row)


def load_areas_csv(path) -> pd.DataFrame:
    raw = _read_raw(path, AREA_COLUMNS)
    first = 2
    frame = pd.DataFrame(
        {
            "hour": _parse_hours(raw["hour"], first),
            "area_id": raw["area_id"].str.strip(),
            "load": _parse_float(raw["load_mwh"], "area load", first, nonneg=True),
            "shadow_price": _parse_float(raw["shadow_price_usd_per_mwh"], "shadow_price", first),
            "is_excluded": _parse_bool(raw["is_excluded"], "is_excluded", first),
        }
    )
    dup = frame.duplicated(["hour", "area_id"])
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise MalformedRow(first + i, f"area {frame.area_id.iloc[i]} repeated at {raw['hour'].iloc[i]}")
    return frame.sort_values(["hour", "area_id"], kind="mergesort").reset_index(drop=True)


def write_areas_csv(frame: pd.DataFrame, path) -> None:
    frame = frame.sort_values(["hour", "area_id"], kind="mergesort")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(AREA_COLUMNS))
        for r in frame.itertuples(index=False):
            w.writerow(
                [format_hour(r.hour), r.area_id, repr(float(r.load)), repr(float(r.shadow_price)), str(bool(r.is_excluded)).lower()]
            )


def empty_areas() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "hour": pd.Series([], dtype="datetime64[ns, UTC]"),
            "area_id": pd.Series([], dtype=object),
            "load": pd.Series([], dtype=float),
            "shadow_price": pd.Series([], dtype=float),
            "is_excluded": pd.Series([], dtype=bool),
        }
    )


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of offers, hourly market records and area records."""

    offers: pd.DataFrame
    market: pd.DataFrame
    areas: pd.DataFrame = field(default_factory=empty_areas)
    unit_to_bidder: Mapping[str, str] | None = None
    segment_cap: int = NYISO_SEGMENT_CAP

    def __post_init__(self):
        if self.unit_to_bidder is None:
            # last bidder seen for each unit
            m = self.offers.drop_duplicates("unit_id", keep="last")
            object.__setattr__(self, "unit_to_bidder", dict(zip(m["unit_id"], m["bidder_id"])))
        hours = self.offers["hour"].to_numpy()
        starts = np.flatnonzero(np.r_[True, hours[1:] != hours[:-1]]) if len(hours) else np.array([], dtype=int)
        stops = np.r_[starts[1:], len(hours)]
        object.__setattr__(
            self, "_hour_slices", {pd.Timestamp(hours[s]): (int(s), int(e)) for s, e in zip(starts, stops)}
        )
        object.__setattr__(self, "_market_by_hour", self.market.set_index("hour", drop=False))

    @property
    def hours(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(self.market["hour"])

    @property
    def units(self) -> list[str]:
        return sorted(self.offers["unit_id"].unique())

    @property
    def bidders(self) -> list[str]:
        return sorted(self.offers["bidder_id"].unique())

    def offers_at(self, hour) -> pd.DataFrame:
        s = self._hour_slices.get(pd.Timestamp(hour))
        if s is None:
            return self.offers.iloc[0:0]
        return self.offers.iloc[s[0] : s[1]]

    def demand_at(self, hour, column: str = "load_forecast") -> float:
        row = self._market_by_hour.loc[pd.Timestamp(hour)]
        if column == "demand" and "demand" not in self.market:
            column = "load_forecast"
        if column == "load_plus_reserves":
            return float(row["load_forecast"] + row["reserves"])
        return float(row[column])

    def market_record(self, hour) -> MarketHourRecord:
        hour = pd.Timestamp(hour)
        row = self._market_by_hour.loc[hour]
        a = self.areas[self.areas["hour"] == hour]
        areas = tuple(AreaRecord(r.area_id, float(r.load), float(r.shadow_price), bool(r.is_excluded)) for r in a.itertuples())
        demand = float(row["demand"]) if "demand" in self.market else None
        return MarketHourRecord(hour, float(row.load_forecast), float(row.reserves), float(row.gas_price), areas, demand)

    def records(self) -> Iterable[IncrementalOffer]:
        for r in self.offers.itertuples(index=False):
            yield IncrementalOffer(
                r.hour, r.unit_id, r.bidder_id, int(r.segment), float(r.price), float(r.quantity), Status(r.status), float(r.max_output)
            )

    def with_offers(self, offers: pd.DataFrame) -> "Dataset":
        return Dataset(sort_offers(offers), self.market, self.areas, dict(self.unit_to_bidder), self.segment_cap)


def load_dataset(directory, segment_cap: int = NYISO_SEGMENT_CAP, *, require_areas: bool = False) -> Dataset:
    """Load ``offers.csv``, ``market.csv`` and (if present) ``areas.csv``."""
    directory = Path(directory)
    offers = load_offers_csv(directory / "offers.csv", segment_cap)
    market = load_market_csv(directory / "market.csv")
    areas_path = directory / "areas.csv"
    if areas_path.exists():
        areas = load_areas_csv(areas_path)
    elif require_areas:
        raise FileNotFoundError(f"{areas_path} is required for congestion scoring")
    else:
        areas = empty_areas()
    return Dataset(offers, market, areas, None, segment_cap)


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_offers_csv(ds.offers, directory / "offers.csv")
    write_market_csv(ds.market, directory / "market.csv")
    write_areas_csv(ds.areas, directory / "areas.csv")


def max_economic_bid(offers) -> float | None:
    """Highest ECONOMIC step price of one unit-hour, or ``None``.

    ``offers`` may be a frame slice or an iterable of :class:`IncrementalOffer`.
    """
    if isinstance(offers, pd.DataFrame):
        if offers[["hour", "unit_id"]].drop_duplicates().shape[0] > 1:
            raise ValueError("offers span more than one (hour, unit_id)")
        prices = offers.loc[offers["status"] == Status.ECONOMIC.value, "price"]
        return float(prices.max()) if len(prices) else None
    offers = list(offers)
    if len({(o.hour, o.unit_id) for o in offers}) > 1:
        raise ValueError("offers span more than one (hour, unit_id)")
    prices = [o.price for o in offers if Status(o.status) is Status.ECONOMIC]
    return max(prices) if prices else None


def max_economic_bids(offers: pd.DataFrame) -> pd.Series:
    """Vectorised :func:`max_economic_bid` over every unit-hour with an economic step."""
    eco = offers[offers["status"] == Status.ECONOMIC.value]
    return eco.groupby(["hour", "unit_id"], sort=True)["price"].max()


def validate_dataset(ds: Dataset) -> list[Finding]:
    """Return every invariant violation in ``ds``; empty iff consistent."""
    findings: list[Finding] = []
    offers, market = ds.offers, ds.market

    mh = pd.DatetimeIndex(market["hour"])
    for h in mh[mh.duplicated()].unique():
        findings.append(Finding("duplicate_market_hour", format_hour(h), "more than one market record"))
    for col, cond, text in (
        ("load_forecast", market["load_forecast"] <= 0, "load_forecast must be positive"),
        ("reserves", market["reserves"] < 0, "reserves must be non-negative"),
    ):
        for h in market.loc[cond, "hour"]:
            findings.append(Finding(f"invalid_{col}", format_hour(h), text))
    for r in ds.areas.loc[ds.areas["load"] < 0].itertuples():
        findings.append(Finding("invalid_area_load", f"{format_hour(r.hour)}/{r.area_id}", "area load must be non-negative"))

    for h in sorted(set(offers["hour"].unique()) - set(mh)):
        findings.append(Finding("missing_market_record", format_hour(h), "offer hour has no market record"))
    for u in sorted(set(offers["unit_id"].unique()) - set(ds.unit_to_bidder)):
        findings.append(Finding("unmapped_unit", u, "unit has no bidder mapping"))

    bad_num = ~np.isfinite(offers[["price", "quantity", "max_output"]].to_numpy(dtype=float)).all(axis=1)
    bad_num |= (offers["quantity"] < 0).to_numpy() | (offers["max_output"] < 0).to_numpy()
    for r in offers.loc[bad_num].itertuples():
        findings.append(Finding("invalid_offer_value", f"{format_hour(r.hour)}/{r.unit_id}/{r.segment}", "non-finite or negative value"))
    bad_status = ~offers["status"].isin([s.value for s in Status])
    for r in offers.loc[bad_status].itertuples():
        findings.append(Finding("invalid_status", f"{format_hour(r.hour)}/{r.unit_id}/{r.segment}", f"unknown status {r.status}"))

    g = offers.groupby(["hour", "unit_id"], sort=True)
    size = g["segment"].size()
    for (h, u) in size[size > ds.segment_cap].index:
        findings.append(Finding("segment_cap_exceeded", f"{format_hour(h)}/{u}", f"more than {ds.segment_cap} segments"))
    for r in offers.loc[offers.duplicated(["hour", "unit_id", "segment"])].itertuples():
        findings.append(Finding("duplicate_segment", f"{format_hour(r.hour)}/{r.unit_id}/{r.segment}", "segment repeated"))
    srt = sort_offers(offers)
    same = (srt["hour"].to_numpy()[1:] == srt["hour"].to_numpy()[:-1]) & (
        srt["unit_id"].to_numpy()[1:] == srt["unit_id"].to_numpy()[:-1]
    )
    dec = same & (srt["price"].to_numpy()[1:] < srt["price"].to_numpy()[:-1])
    for i in np.flatnonzero(dec) + 1:
        r = srt.iloc[i]
        findings.append(Finding("non_monotone_steps", f"{format_hour(r.hour)}/{r.unit_id}", f"segment {r.segment} decreases"))
    spread = g["max_output"].agg(lambda s: s.max() - s.min())
    for (h, u) in spread[spread > 0].index:
        findings.append(Finding("inconsistent_max_output", f"{format_hour(h)}/{u}", "max_output differs across segments"))
    return findings


def as_frame(offers: Iterable[IncrementalOffer]) -> pd.DataFrame:
    """Build an offer frame from typed records."""
    rows = [
        (pd.Timestamp(o.hour), o.unit_id, o.bidder_id, int(o.segment), float(o.price), float(o.quantity), Status(o.status).value, float(o.max_output))
        for o in offers
    ]
    frame = pd.DataFrame(rows, columns=["hour", "unit_id", "bidder_id", "segment", "price", "quantity", "status", "max_output"])
    frame["hour"] = pd.to_datetime(frame["hour"], utc=True)
    frame["segment"] = frame["segment"].astype(np.int64)
    return frame


def is_missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def _float_text(x) -> str:
    return repr(float(x))


def write_frame_csv(frame: pd.DataFrame, path) -> None:
    """CSV with shortest round-trip floats, empty cells for NaN and ``\\n`` line ends."""
    frame.to_csv(path, index=False, float_format=_float_text, lineterminator="\n")
