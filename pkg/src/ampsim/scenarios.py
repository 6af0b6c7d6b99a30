"""Counterfactual threshold scenarios over a year of hourly bid stacks.

Each included hour is cleared, screened and (when the impact test fails)
re-cleared with mitigated bids. The report aggregates the mitigated set ``M``,
the average price drop over ``M`` and the buyer surplus gain
``sum(D_t * (P*_t - P^m_t))`` using compensated summation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from .clearing import ClearingResult, clear
from .data import Dataset, format_hour, write_frame_csv
from .errors import MismatchedRuns
from .indices import ScoreKind, ScoreSeries, congestion_series, market_rsi_series
from .reference import reference_table
from .screening import PRESETS, AmpConfig, ScreeningOutcome, screen_hour


@dataclass(frozen=True)
class ScenarioReport:
    name: str
    config: AmpConfig
    mitigated_hours: tuple
    included_hours: tuple = field(repr=False)
    avg_clearing_price: float
    avg_price_decrease: float | None
    total_surplus_increase: float
    per_hour_surplus: float | None
    excluded_hours: int
    detail: pd.DataFrame = field(repr=False)

    @property
    def n_mitigated(self) -> int:
        return len(self.mitigated_hours)

    def summary_row(self) -> dict:
        row = {
            "scenario": self.name,
            "included_hours": len(self.included_hours),
            "excluded_hours": self.excluded_hours,
            "mitigated_hours": self.n_mitigated,
            "avg_clearing_price_included_hours": self.avg_clearing_price,
            "avg_price_decrease": self.avg_price_decrease,
            "total_surplus_increase": self.total_surplus_increase,
            "per_hour_surplus": self.per_hour_surplus,
        }
        row.update({f"cfg_{k}": v for k, v in self.config.to_mapping().items()})
        return row


def read_hour_filter(path) -> set[pd.Timestamp]:
    """Hours to exclude, one per row in an ``hour`` column."""
    frame = pd.read_csv(path, dtype=str)
    if "hour" not in frame:
        raise ValueError(f"{path}: hour filter needs an 'hour' column")
    return set(pd.to_datetime(frame["hour"], format="ISO8601", utc=True))


def _scores_by_hour(series: ScoreSeries) -> dict:
    v = series.values
    if series.per_bidder:
        return {
            pd.Timestamp(h): dict(zip(g["bidder_id"], g["score"].astype(float)))
            for h, g in v.groupby("hour", sort=False)
        }
    return {pd.Timestamp(h): float(s) for h, s in zip(v["hour"], v["score"])}


def score_series_for(ds: Dataset, cfg: AmpConfig, must_take: str = "max_output") -> ScoreSeries:
    if cfg.structural_kind is ScoreKind.RSI:
        return market_rsi_series(ds, must_take, cfg.structural_cutoff)
    return congestion_series(ds, cfg.structural_cutoff)


def screen_hours(
    ds: Dataset,
    cfg: AmpConfig,
    hours: Iterable | None = None,
    *,
    references: pd.DataFrame | None = None,
    scores: ScoreSeries | None = None,
    clear_fn: Callable[..., ClearingResult] = clear,
    threads: int = 1,
) -> list[ScreeningOutcome]:
    """Screen every hour in ``hours`` (default: all) at its load forecast.

    ``references`` (wide table) and ``scores`` may be precomputed and shared
    between scenarios on the same dataset.
    """
    all_hours = list(ds.hours)
    hours = all_hours if hours is None else [pd.Timestamp(h) for h in hours]
    if references is None:
        references = reference_table(ds, threads=threads)
    if scores is None:
        scores = score_series_for(ds, cfg)
    by_hour = _scores_by_hour(scores)
    ref_units = list(references.columns)
    ref_values = references.reindex(pd.DatetimeIndex(all_hours)).to_numpy()
    row_of = {h: i for i, h in enumerate(all_hours)}

    def one(h):
        refs = dict(zip(ref_units, ref_values[row_of[h]]))
        load = ds.demand_at(h, "load_forecast")
        return screen_hour(ds.offers_at(h), refs, by_hour.get(h, float("nan")), load, cfg, clear_fn, h)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, hours))
    return [one(h) for h in hours]


def run_scenario(
    ds: Dataset,
    cfg: AmpConfig,
    exclude_hours: Iterable | None = None,
    name: str = "scenario",
    *,
    references: pd.DataFrame | None = None,
    scores: ScoreSeries | None = None,
    demand_column: str = "load_forecast",
    clear_fn: Callable[..., ClearingResult] = clear,
    threads: int = 1,
) -> ScenarioReport:
    """Screen and clear every included hour of ``ds`` under ``cfg``.

    ``demand_column`` selects the demand used in the surplus sum
    (``load_forecast``, ``demand`` or ``load_plus_reserves``); the market is
    always cleared at the load forecast.
    """
    excluded = {pd.Timestamp(h) for h in (exclude_hours or ())}
    all_hours = list(ds.hours)
    hours = [h for h in all_hours if h not in excluded]
    results = screen_hours(
        ds, cfg, hours, references=references, scores=scores, clear_fn=clear_fn, threads=threads
    )

    p_star = np.array([r.original_price for r in results], dtype=float)
    p_m = np.array([r.mitigated_price for r in results], dtype=float)
    flag = np.array([r.mitigated for r in results], dtype=bool)
    demand = np.array([ds.demand_at(h, demand_column) for h in hours], dtype=float)
    detail = pd.DataFrame({"hour": hours, "p_star": p_star, "p_mitigated": p_m, "mitigated_flag": flag, "demand": demand})

    m = np.flatnonzero(flag)
    drops = p_star[m] - p_m[m]
    total = math.fsum((demand[m] * drops).tolist())
    n = len(hours)
    return ScenarioReport(
        name=name,
        config=cfg,
        mitigated_hours=tuple(hours[i] for i in m),
        included_hours=tuple(hours),
        avg_clearing_price=math.fsum(p_m.tolist()) / n if n else float("nan"),
        avg_price_decrease=math.fsum(drops.tolist()) / len(m) if len(m) else None,
        total_surplus_increase=total,
        per_hour_surplus=total / len(m) if len(m) else None,
        excluded_hours=len(all_hours) - n,
        detail=detail,
    )


def run_presets(ds: Dataset, names: Iterable[str], exclude_hours=None, threads: int = 1) -> dict[str, ScenarioReport]:
    """Run named presets sharing one reference table and score series."""
    refs = reference_table(ds, threads=threads)
    cache: dict = {}
    out = {}
    for name in names:
        cfg = PRESETS[name]
        key = (cfg.structural_kind, cfg.structural_cutoff)
        if key not in cache:
            cache[key] = score_series_for(ds, cfg)
        out[name] = run_scenario(ds, cfg, exclude_hours, name, references=refs, scores=cache[key], threads=threads)
    return out


def compare_scenarios(baseline: ScenarioReport, alt: ScenarioReport) -> dict:
    """Differences of ``alt`` relative to ``baseline`` on the same hours."""
    if baseline.included_hours != alt.included_hours:
        raise MismatchedRuns("scenarios were run on different hour sets")
    return {
        "baseline": baseline.name,
        "scenario": alt.name,
        "delta_mitigated_hours": alt.n_mitigated - baseline.n_mitigated,
        "delta_avg_clearing_price": alt.avg_clearing_price - baseline.avg_clearing_price,
        "delta_total_surplus": alt.total_surplus_increase - baseline.total_surplus_increase,
        "per_mitigated_hour_surplus": (alt.total_surplus_increase / alt.n_mitigated) if alt.n_mitigated else None,
    }


def write_report(reports: Iterable[ScenarioReport], path) -> None:
    rows = [r.summary_row() for r in reports]
    write_frame_csv(pd.DataFrame(rows), path)


def write_hours(report: ScenarioReport, path) -> None:
    d = report.detail
    out = pd.DataFrame(
        {
            "hour": [format_hour(h) for h in d["hour"]],
            "p_star": d["p_star"],
            "p_mitigated": d["p_mitigated"],
            "mitigated_flag": d["mitigated_flag"].map({True: "true", False: "false"}),
        }
    )
    write_frame_csv(out, path)
