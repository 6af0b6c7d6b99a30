"""Three-step automated mitigation: structural test, conduct test, impact test.

Step 1 decides which bidders are screened (per-firm RSI at or below its
cutoff, or a market-wide congestion score at or above its cutoff). Step 2
compares each screened unit's highest economic bid with its conduct
threshold. Step 3 caps every step of the failing units at their reference
level, re-clears the market and keeps the mitigated price only if the price
drop exceeds the impact tolerance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from .clearing import ClearingResult, clear
from .data import Status
from .errors import InvalidHours, MissingReference, NegativeInput
from .indices import DEFAULT_CUTOFF, DEFAULT_SIDE, ScoreKind, Side, is_treated


class Verdict(str, enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"


@dataclass(frozen=True)
class NyisoAreaRule:
    """Inputs of the congestion-area conduct tolerance."""

    avg_price: float
    constrained_hours: float
    pct: float = 0.02
    hours_per_year: float = 8760.0


@dataclass(frozen=True)
class AmpConfig:
    """Mitigation thresholds for one scenario.

    Percentages are fractions of the base value: ``conduct_pct=3.0`` means a
    300% increase over the reference level, so the threshold is
    ``ref + min(conduct_abs, 3.0 * ref)``.
    """

    structural_kind: ScoreKind = ScoreKind.RSI
    structural_cutoff: float | None = None
    structural_side: Side | None = None
    structural_enabled: bool = True
    conduct_abs: float = 100.0
    conduct_pct: float = 3.0
    impact_abs: float = 100.0
    impact_pct: float = 2.0
    impact_base: str = "mitigated"
    nyiso_area_rule: NyisoAreaRule | None = None
    unit_thresholds: Mapping[str, float] | None = None

    def __post_init__(self):
        kind = ScoreKind(self.structural_kind)
        object.__setattr__(self, "structural_kind", kind)
        if self.structural_cutoff is None:
            object.__setattr__(self, "structural_cutoff", DEFAULT_CUTOFF[kind])
        object.__setattr__(self, "structural_side", Side(self.structural_side or DEFAULT_SIDE[kind]))
        for name in ("conduct_abs", "conduct_pct", "impact_abs", "impact_pct"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive number, got {v!r}")
        if self.impact_base not in ("mitigated", "unmitigated"):
            raise ValueError("impact_base must be 'mitigated' or 'unmitigated'")

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["structural_kind"] = self.structural_kind.value
        d["structural_side"] = self.structural_side.value
        rule = d.pop("nyiso_area_rule")
        if rule is not None:
            for k, v in rule.items():
                d[f"nyiso_{k}"] = v
        d.pop("unit_thresholds")
        return d

    @classmethod
    def from_mapping(cls, m: Mapping) -> "AmpConfig":
        """Build from flat keys as found in a config file; unknown keys raise."""
        m = dict(m)
        nyiso = {k[len("nyiso_"):]: float(m.pop(k)) for k in list(m) if k.startswith("nyiso_")}
        fields = set(cls.__dataclass_fields__) - {"nyiso_area_rule", "unit_thresholds"}
        unknown = set(m) - fields
        if unknown:
            raise ValueError(f"unknown AMP config keys: {sorted(unknown)}")
        for k in ("conduct_abs", "conduct_pct", "impact_abs", "impact_pct"):
            if k in m:
                m[k] = float(m[k])
        if "structural_cutoff" in m and m["structural_cutoff"] is not None:
            m["structural_cutoff"] = float(m["structural_cutoff"])
        if isinstance(m.get("structural_enabled"), str):
            m["structural_enabled"] = m["structural_enabled"].strip().lower() in ("1", "true", "yes")
        rule = NyisoAreaRule(**nyiso) if nyiso else None
        return cls(**m, nyiso_area_rule=rule)


# Table of scenario thresholds; the baseline is the current ISO-NE rule set.
PRESETS: dict[str, AmpConfig] = {
    "baseline": AmpConfig(),
    "lower-conduct": AmpConfig(conduct_abs=50.0, conduct_pct=1.5),
    "lower-impact": AmpConfig(impact_abs=50.0, impact_pct=1.5),
    "lower-both": AmpConfig(conduct_abs=75.0, conduct_pct=2.0, impact_abs=90.0, impact_pct=1.75),
    "no-pivotality": AmpConfig(structural_enabled=False),
}


@dataclass(frozen=True)
class ScreeningOutcome:
    hour: pd.Timestamp | None
    structural_failed: bool
    conduct_failures: frozenset
    impact_failed: bool
    mitigated: bool
    original_price: float
    mitigated_price: float
    mitigated_offers: pd.DataFrame = field(repr=False)
    recleared_price: float | None = None
    screened_units: int = 0


def conduct_threshold_isone(ref: float | None, cfg: AmpConfig = AmpConfig()) -> float:
    """``ref + min(conduct_abs, conduct_pct * ref)``."""
    if ref is None or (isinstance(ref, float) and math.isnan(ref)):
        raise MissingReference("unit has no reference level")
    if ref < 0:
        raise NegativeInput("reference level must be non-negative")
    return ref + min(cfg.conduct_abs, cfg.conduct_pct * ref)


def conduct_threshold_nyiso(
    avg_price: float,
    constrained_hours: float,
    unit_threshold: float | None = None,
    pct: float = 0.02,
    hours_per_year: float = 8760.0,
) -> float:
    """Congested-area conduct tolerance ``pct * avg_price * hours_per_year / constrained_hours``.

    When a unit-specific threshold is supplied the lower of the two applies.
    """
    if not (math.isfinite(constrained_hours) and constrained_hours >= 1):
        raise InvalidHours(f"constrained hours must be at least 1, got {constrained_hours!r}")
    if not avg_price > 0:
        raise ValueError("average price must be positive")
    area = pct * avg_price * hours_per_year / constrained_hours
    if unit_threshold is not None:
        return min(area, unit_threshold)
    return area


def conduct_test(max_bid: float, threshold: float) -> Verdict:
    """FAIL iff the bid is strictly above the threshold."""
    if not (math.isfinite(max_bid) and math.isfinite(threshold)):
        raise ValueError("conduct test needs finite inputs")
    return Verdict.FAIL if max_bid > threshold else Verdict.PASS


def impact_tolerance(unmitigated_price: float, mitigated_price: float, cfg: AmpConfig = AmpConfig()) -> float:
    base = mitigated_price if cfg.impact_base == "mitigated" else unmitigated_price
    return min(cfg.impact_abs, cfg.impact_pct * base)


def impact_test(unmitigated_price: float, mitigated_price: float, cfg: AmpConfig = AmpConfig()) -> Verdict:
    """FAIL (mitigation applies) iff the price drop exceeds the impact tolerance."""
    if mitigated_price > unmitigated_price:
        raise ValueError("mitigated price exceeds unmitigated price")
    gap = unmitigated_price - mitigated_price
    return Verdict.FAIL if gap > impact_tolerance(unmitigated_price, mitigated_price, cfg) else Verdict.PASS


def unit_conduct_threshold(unit_id: str, ref: float, cfg: AmpConfig) -> float:
    if cfg.structural_kind is ScoreKind.CONGESTION and cfg.nyiso_area_rule is not None:
        r = cfg.nyiso_area_rule
        unit = (cfg.unit_thresholds or {}).get(unit_id)
        return ref + conduct_threshold_nyiso(r.avg_price, r.constrained_hours, unit, r.pct, r.hours_per_year)
    return conduct_threshold_isone(ref, cfg)


def _screened_bidders(scores, cfg: AmpConfig, bidders) -> tuple[bool, set]:
    if not cfg.structural_enabled:
        return True, set(bidders)
    if isinstance(scores, Mapping):
        hit = {
            b for b, s in scores.items()
            if s is not None and not np.isnan(s) and is_treated(s, cfg.structural_cutoff, cfg.structural_side)
        }
        return bool(hit), hit
    if scores is None or np.isnan(scores):
        return False, set()
    if is_treated(scores, cfg.structural_cutoff, cfg.structural_side):
        return True, set(bidders)
    return False, set()


def screen_hour(
    offers: pd.DataFrame,
    references: Mapping[str, float | None],
    scores,
    load: float,
    cfg: AmpConfig = AmpConfig(),
    clear_fn: Callable[..., ClearingResult] = clear,
    hour=None,
) -> ScreeningOutcome:
    """Run the three mitigation steps for one hour.

    Parameters
    ----------
    offers : DataFrame
        The hour's bid stack.
    references : mapping
        Reference level per unit; units without one are not screened.
    scores : mapping or float
        Per-bidder scores (``{bidder_id: score}``) or one market-level score.
    load : float
        Demand to clear.
    """
    if hour is None and len(offers):
        hour = pd.Timestamp(offers["hour"].iloc[0])
    original = clear_fn(offers, load, hour)
    p_star = original.clearing_price

    units = offers["unit_id"].to_numpy()
    bidders = offers["bidder_id"].to_numpy()
    structural_failed, screened = _screened_bidders(scores, cfg, np.unique(bidders))

    failures: set[str] = set()
    caps: dict[str, float] = {}
    n_screened = 0
    if structural_failed:
        eco = offers["status"].to_numpy() == Status.ECONOMIC.value
        prices = offers["price"].to_numpy()
        in_scope = np.isin(bidders, list(screened))
        for u in np.unique(units[in_scope]):
            ref = references.get(u)
            if ref is None or np.isnan(ref):
                continue
            sel = (units == u) & eco
            if not sel.any():
                continue
            n_screened += 1
            if conduct_test(float(prices[sel].max()), unit_conduct_threshold(u, float(ref), cfg)) is Verdict.FAIL:
                failures.add(str(u))
                caps[str(u)] = float(ref)

    if not failures:
        return ScreeningOutcome(hour, structural_failed, frozenset(), False, False, p_star, p_star, offers, None, n_screened)

    cap = pd.Series(units).map(caps).to_numpy(dtype=float)
    new_prices = np.where(np.isnan(cap), offers["price"].to_numpy(), np.minimum(offers["price"].to_numpy(), cap))
    mitigated_offers = offers.assign(price=new_prices)
    recleared = clear_fn(mitigated_offers, load, hour).clearing_price
    impact_failed = impact_test(p_star, recleared, cfg) is Verdict.FAIL
    if impact_failed:
        return ScreeningOutcome(
            hour, True, frozenset(failures), True, True, p_star, recleared, mitigated_offers, recleared, n_screened
        )
    return ScreeningOutcome(
        hour, structural_failed, frozenset(failures), False, False, p_star, p_star, offers, recleared, n_screened
    )


def with_structural(cfg: AmpConfig, enabled: bool) -> AmpConfig:
    return replace(cfg, structural_enabled=enabled)
