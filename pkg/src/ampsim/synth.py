"""Synthetic bid panels with a known data-generating process.

Maximum bids follow

    p_max = b0_j + tau_j*T + b2*S~ + b3*S~*T + b4*ref + b5*gas + u_j + e

where ``S~`` and ``T`` come from centring a score drawn from a two-part
mixture (a normal bump straddling the cutoff plus a gamma tail on the
untreated side), ``ref`` is a slow AR(1) per unit, ``gas`` an AR(1) per hour,
``u_j`` an optional bidder random effect and ``e`` homoskedastic noise.

:func:`generate_panel` draws scores directly and is what the Monte Carlo
checks use. :func:`generate` builds a full dataset (offers, market and area
records) whose scores are *computed* from the generated supply and load, so
the screening, clearing and estimation modules can be run end to end.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .clearing import clear
from .data import Dataset, Status, format_hour, sort_offers, write_frame_csv
from .errors import InvalidSpec
from .indices import DEFAULT_CUTOFF, DEFAULT_SIDE, ScoreKind, Side
from .rdd import center_score


@dataclass(frozen=True)
class SynthSpec:
    n_bidders: int = 40
    units_per_bidder: int = 1
    n_hours: int = 2000
    start: str = "2019-01-01T00:00Z"
    score_kind: ScoreKind = ScoreKind.RSI
    cutoff: float | None = None
    # score mixture
    near_weight: float = 0.24
    near_offset: float = 0.0
    near_sd: float = 0.12
    tail_gap: float = 0.10
    tail_shape: float = 4.0
    tail_scale: float = 0.055
    # outcome equation
    tau: float | Sequence[float] = -5.0
    beta0: float | Sequence[float] = 5.0
    beta_score: float = 4.0
    beta_score_x_treat: float = -6.0
    beta_ref: float = 0.8
    beta_gas: float = 3.0
    sigma_eps: float = 5.0
    sigma_bidder: float = 0.0
    # reference level AR(1) around a per-unit mean
    ref_mean_low: float = 20.0
    ref_mean_high: float = 45.0
    ref_ar: float = 0.995
    ref_sd: float = 0.4
    # gas price AR(1)
    gas_mean: float = 3.0
    gas_ar: float = 0.99
    gas_sd: float = 0.05
    # full dataset only
    max_segments: int = 10
    capacity_low: float = 50.0
    capacity_high: float = 300.0
    p_unavailable: float = 0.02
    reserve_share: float = 0.1
    n_areas: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "score_kind", ScoreKind(self.score_kind))
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", DEFAULT_CUTOFF[self.score_kind])
        problems = []
        if self.n_hours < 1:
            problems.append("n_hours must be at least 1")
        if self.n_bidders < 1 or self.units_per_bidder < 1:
            problems.append("need at least one bidder and one unit per bidder")
        if self.sigma_eps < 0 or self.sigma_bidder < 0:
            problems.append("noise scales must be non-negative")
        if not 0 <= self.near_weight <= 1:
            problems.append("near_weight must lie in [0, 1]")
        if self.near_sd <= 0 or self.tail_shape <= 0 or self.tail_scale <= 0 or self.tail_gap < 0:
            problems.append("mixture scales must be positive (tail_gap non-negative)")
        if not 1 <= self.max_segments <= 12:
            problems.append("max_segments must lie in 1..12")
        if not 0 <= self.p_unavailable < 1:
            problems.append("p_unavailable must lie in [0, 1)")
        if not 0 < self.capacity_low <= self.capacity_high:
            problems.append("capacity range must be positive and ordered")
        for name in ("tau", "beta0"):
            v = getattr(self, name)
            if not np.isscalar(v) and len(v) != self.n_bidders:
                problems.append(f"{name} needs one value per bidder")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if problems:
            raise InvalidSpec("; ".join(problems))

    @property
    def side(self) -> Side:
        return DEFAULT_SIDE[self.score_kind]

    @classmethod
    def congestion_like(cls, **kw) -> "SynthSpec":
        """Defaults shaped like a skewed load-weighted shadow-price score."""
        base = dict(
            score_kind=ScoreKind.CONGESTION,
            near_weight=0.5,
            near_offset=0.0,
            near_sd=1.0,
            tail_gap=0.5,
            tail_shape=1.0,
            tail_scale=8.0,
            beta_score=-0.5,
            beta_score_x_treat=-1.0,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_mapping(cls, m) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(m) - known
        if unknown:
            raise InvalidSpec(f"unknown synth keys: {sorted(unknown)}")
        return cls(**dict(m))

    def per_bidder(self, name: str) -> np.ndarray:
        v = getattr(self, name)
        return np.full(self.n_bidders, float(v)) if np.isscalar(v) else np.asarray(v, dtype=float)


def treated_mass(spec: SynthSpec) -> float:
    """Analytic probability that a mixture draw lies on the treated side."""
    z = spec.near_offset / spec.near_sd
    p = stats.norm.cdf(-z) if spec.side is Side.LEQ else stats.norm.cdf(z)
    return float(spec.near_weight * p)


def draw_scores(spec: SynthSpec, rng: np.random.Generator, size) -> np.ndarray:
    """Mixture draws; the tail lies strictly on the untreated side."""
    near = rng.random(size) < spec.near_weight
    bump = spec.cutoff + spec.near_offset + spec.near_sd * rng.standard_normal(size)
    tail = spec.tail_gap + rng.gamma(spec.tail_shape, spec.tail_scale, size)
    tail = spec.cutoff + tail if spec.side is Side.LEQ else spec.cutoff - tail
    return np.where(near, bump, tail)


def _ar1(rng, mean, phi, sd, n, m):
    """``m`` independent AR(1) paths of length ``n`` started at stationarity."""
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (m,))
    out = np.empty((n, m))
    stat_sd = sd / math.sqrt(1 - phi**2) if phi < 1 else sd
    x = stat_sd * rng.standard_normal(m)
    for t in range(n):
        if t:
            x = phi * x + sd * rng.standard_normal(m)
        out[t] = mean + x
    return out


@dataclass(frozen=True)
class GroundTruth:
    tau: dict
    coefficients: dict
    treatment: pd.DataFrame  # hour, bidder_id, score, treated, tau
    ref_true: pd.DataFrame  # hour, unit_id, ref
    p_max: pd.DataFrame  # hour, unit_id, bidder_id, p_max

    def truth_frame(self) -> pd.DataFrame:
        return self.treatment[["hour", "bidder_id", "treated", "tau"]]


def _ids(spec: SynthSpec):
    width = max(2, len(str(spec.n_bidders)))
    bidders = [f"B{j + 1:0{width}d}" for j in range(spec.n_bidders)]
    units, owner = [], []
    for j, b in enumerate(bidders):
        for k in range(spec.units_per_bidder):
            units.append(f"{b}U{k + 1}")
            owner.append(j)
    return bidders, units, np.array(owner)


def _coefficients(spec: SynthSpec) -> dict:
    return {
        "beta0": spec.per_bidder("beta0").tolist(),
        "tau": spec.per_bidder("tau").tolist(),
        "score_c": spec.beta_score,
        "score_c_x_treat": spec.beta_score_x_treat,
        "ref": spec.beta_ref,
        "gas": spec.beta_gas,
    }


def _outcome(spec, rng, score_bh, ref, gas, owner):
    """Maximum bids (hours x units) for per-bidder-hour scores ``score_bh``."""
    n = ref.shape[0]
    s_c, t = center_score(score_bh, spec.cutoff, spec.side)
    s_c = np.asarray(s_c, dtype=float)
    t = np.asarray(t, dtype=float)
    s_cu, t_u = s_c[:, owner], t[:, owner]
    u_j = spec.sigma_bidder * rng.standard_normal(spec.n_bidders)
    eps = spec.sigma_eps * rng.standard_normal((n, len(owner)))
    beta0, tau = spec.per_bidder("beta0"), spec.per_bidder("tau")
    p = (
        beta0[owner]
        + tau[owner] * t_u
        + spec.beta_score * s_cu
        + spec.beta_score_x_treat * s_cu * t_u
        + spec.beta_ref * ref
        + spec.beta_gas * gas[:, None]
        + u_j[owner]
        + eps
    )
    # rows with a missing score carry no outcome
    return np.where(np.isnan(s_cu), np.nan, p), t


def generate_panel(spec: SynthSpec, rng: np.random.Generator | None = None) -> tuple[pd.DataFrame, GroundTruth]:
    """Observation rows drawn straight from the mixture and outcome equation."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    bidders, units, owner = _ids(spec)
    n = spec.n_hours
    hours = pd.date_range(pd.Timestamp(spec.start), periods=n, freq="h")
    score = draw_scores(spec, rng, (n, spec.n_bidders))
    ref_mean = rng.uniform(spec.ref_mean_low, spec.ref_mean_high, len(units))
    ref = _ar1(rng, ref_mean, spec.ref_ar, spec.ref_sd, n, len(units))
    gas = _ar1(rng, spec.gas_mean, spec.gas_ar, spec.gas_sd, n, 1)[:, 0]
    p_max, treated = _outcome(spec, rng, score, ref, gas, owner)
    m = len(units)
    panel = pd.DataFrame(
        {
            "hour": np.repeat(hours, m),
            "bidder_id": np.tile(np.array(bidders)[owner], n),
            "unit_id": np.tile(units, n),
            "p_max": p_max.ravel(),
            "score": score[:, owner].ravel(),
            "ref": ref.ravel(),
            "gas": np.repeat(gas, m),
        }
    )
    truth = _truth(spec, hours, bidders, units, owner, score, treated, ref, p_max)
    return panel, truth


def _truth(spec, hours, bidders, units, owner, score, treated, ref, p_max) -> GroundTruth:
    n, nb = score.shape
    tau = spec.per_bidder("tau")
    treatment = pd.DataFrame(
        {
            "hour": np.repeat(hours, nb),
            "bidder_id": np.tile(bidders, n),
            "score": score.ravel(),
            "treated": np.where(np.isnan(score), np.nan, treated).ravel(),
            "tau": np.tile(tau, n),
        }
    )
    m = len(units)
    ref_true = pd.DataFrame({"hour": np.repeat(hours, m), "unit_id": np.tile(units, n), "ref": ref.ravel()})
    pm = pd.DataFrame(
        {
            "hour": np.repeat(hours, m),
            "unit_id": np.tile(units, n),
            "bidder_id": np.tile(np.array(bidders)[owner], n),
            "p_max": p_max.ravel(),
        }
    )
    return GroundTruth(dict(zip(bidders, tau.tolist())), _coefficients(spec), treatment, ref_true, pm)


def _segments(spec, rng, p_max, ref, capacity):
    """Step prices (ascending, topped by ``p_max``) and quantities summing to capacity."""
    k = rng.integers(1, spec.max_segments + 1)
    q = capacity * rng.dirichlet(np.ones(k))
    low = min(ref, p_max)
    below = np.sort(rng.uniform(0.8 * low, low, k - 1)) if k > 1 else np.empty(0)
    prices = np.minimum(np.append(below, p_max), p_max)
    return prices, q


def generate(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    """Full dataset whose scores are computed from generated supply and load."""
    rng = np.random.default_rng(spec.seed)
    bidders, units, owner = _ids(spec)
    n, m, nb = spec.n_hours, len(units), spec.n_bidders
    hours = pd.date_range(pd.Timestamp(spec.start), periods=n, freq="h")

    size = rng.lognormal(0.0, 0.6, nb)
    capacity = rng.uniform(spec.capacity_low, spec.capacity_high, m) * size[owner]
    available = rng.random((n, m)) >= spec.p_unavailable
    avail_cap = np.where(available, capacity, 0.0)
    firm = np.zeros((n, nb))
    for j in range(nb):
        firm[:, j] = avail_cap[:, owner == j].sum(axis=1)
    market_supply = avail_cap.sum(axis=1)
    draws = draw_scores(spec, rng, n)

    if spec.score_kind is ScoreKind.RSI:
        # the tightest firm's RSI equals the hour's mixture draw
        tight = np.maximum(draws, 0.05)
        residual = market_supply - firm.max(axis=1)
        # a lone available firm has RSI 0 whatever the load; keep the load finite
        denom = np.where(residual > 0, residual / tight, np.maximum(market_supply, 1.0))
        load = np.minimum((1 - spec.reserve_share) * denom, 0.97 * market_supply)
        reserves = denom - load
        score = (market_supply[:, None] - firm) / denom[:, None]
        areas = _areas(spec, rng, hours, load, None)
    else:
        load = rng.uniform(0.45, 0.8, n) * market_supply
        reserves = spec.reserve_share * load
        score = np.repeat(draws[:, None], nb, axis=1)
        score[0] = np.nan
        areas = _areas(spec, rng, hours, load, draws)

    ref_mean = rng.uniform(spec.ref_mean_low, spec.ref_mean_high, m)
    ref = _ar1(rng, ref_mean, spec.ref_ar, spec.ref_sd, n, m)
    gas = _ar1(rng, spec.gas_mean, spec.gas_ar, spec.gas_sd, n, 1)[:, 0]
    p_max, treated = _outcome(spec, rng, score, ref, gas, owner)

    records = []
    unit_bidder = np.array(bidders)[owner]
    for t in range(n):
        h = hours[t]
        for g in range(m):
            pm = p_max[t, g]
            if np.isnan(pm):
                pm = ref[t, g]
            prices, q = _segments(spec, rng, pm, ref[t, g], capacity[g])
            status = Status.ECONOMIC.value if available[t, g] else Status.UNAVAILABLE.value
            for s in range(len(prices)):
                records.append((h, units[g], unit_bidder[g], s + 1, float(prices[s]), float(q[s]), status, float(capacity[g])))
    offers = pd.DataFrame(records, columns=["hour", "unit_id", "bidder_id", "segment", "price", "quantity", "status", "max_output"])
    offers["segment"] = offers["segment"].astype(np.int64)
    market = pd.DataFrame(
        {
            "hour": hours,
            "load_forecast": load,
            "reserves": reserves,
            "gas_price": gas,
        }
    )
    ds = Dataset(sort_offers(offers), market, areas, dict(zip(units, unit_bidder)), max(spec.max_segments, 10))
    # ground truth on available unit-hours only
    pm_frame = np.where(available, p_max, np.nan)
    truth = _truth(spec, hours, bidders, units, owner, score, treated, ref, pm_frame)
    return ds, truth


def _areas(spec, rng, hours, load, draws) -> pd.DataFrame:
    """Area loads and shadow prices; with ``draws`` the lagged index reproduces them."""
    n, k = len(hours), max(spec.n_areas, 2)
    share = rng.dirichlet(np.ones(k), n)
    area_load = share * load[:, None]
    excluded = np.zeros(k, dtype=bool)
    excluded[-1] = True
    price = rng.normal(0.0, 0.5, (n, k))
    price[:, -1] = rng.normal(20.0, 10.0, n)
    if draws is not None:
        kept = ~excluded
        w = area_load[:, kept] / area_load[:, kept].sum(axis=1, keepdims=True)
        noise = price[:, kept] - (w * price[:, kept]).sum(axis=1, keepdims=True)
        target = np.append(draws[1:], draws[-1])
        price[:, kept] = target[:, None] + noise
    ids = [f"A{i + 1}" for i in range(k - 1)] + ["NYC"]
    return pd.DataFrame(
        {
            "hour": np.repeat(hours, k),
            "area_id": np.tile(ids, n),
            "load": area_load.ravel(),
            "shadow_price": price.ravel(),
            "is_excluded": np.tile(excluded, n),
        }
    )


class Perturbation(str, enum.Enum):
    SPIKE = "SPIKE"
    WITHHOLD = "WITHHOLD"
    CALM = "CALM"


def _draw(rng, value, n):
    if np.isscalar(value):
        return np.full(n, float(value))
    return rng.uniform(value[0], value[1], n)


def perturb(
    ds: Dataset,
    scenario: Perturbation | str,
    hours: Sequence | None = None,
    units: Sequence | None = None,
    magnitude: float | tuple[float, float] = 300.0,
    factor: float | tuple[float, float] = 1.0,
    share: float = 0.05,
    n_units: int = 1,
    seed: int = 0,
    target: str = "random",
) -> Dataset:
    """Return a perturbed copy of ``ds``.

    Parameters
    ----------
    scenario : {"SPIKE", "WITHHOLD", "CALM"}
        SPIKE maps the affected step prices ``p`` to ``factor * p + magnitude``;
        WITHHOLD flags the selected units UNAVAILABLE; CALM returns ``ds``.
    hours, units : sequence, optional
        Explicit unit-hours. Without them a ``share`` of hours is drawn with
        ``seed`` and units are picked by ``target``.
    magnitude, factor : float or (low, high)
        A pair is drawn uniformly once per unit-hour, so every step of a unit
        moves by the same rule and the offer curve stays non-decreasing.
    target : {"random", "marginal", "all"}
        ``random`` draws ``n_units`` units and spikes their top economic step.
        ``marginal`` picks the unit setting the price at the load forecast and
        spikes its price-setting step and every step above it. ``all`` spikes
        every step of every unit in the hour.
    """
    scenario = Perturbation(scenario)
    if scenario is Perturbation.CALM:
        return ds
    if target not in ("random", "marginal", "all"):
        raise ValueError(f"unknown target {target!r}")
    rng = np.random.default_rng(seed)
    offers = ds.offers.copy()
    all_hours = list(ds.hours)
    if hours is None:
        k = max(1, int(round(share * len(all_hours))))
        hours = [all_hours[i] for i in sorted(rng.choice(len(all_hours), k, replace=False))]
    hours = [pd.Timestamp(h) for h in hours]
    targets = []
    floor = {}
    for h in hours:
        stack = ds.offers_at(h)
        present = sorted(stack["unit_id"].unique())
        if units is not None:
            chosen = list(units)
        elif target == "marginal":
            unit, seg, _ = clear(stack, ds.demand_at(h, "load_forecast"), h).dispatched[-1]
            chosen = [unit]
            floor[(h, unit)] = seg
        elif target == "all":
            chosen = present
            floor.update({(h, u): 1 for u in present})
        else:
            chosen = list(rng.choice(present, min(n_units, len(present)), replace=False))
        targets += [(h, u) for u in chosen if u in present]
    if not targets:
        return ds
    key = pd.MultiIndex.from_frame(offers[["hour", "unit_id"]])
    hit = key.isin(pd.MultiIndex.from_tuples(targets))
    if scenario is Perturbation.WITHHOLD:
        offers.loc[hit, "status"] = Status.UNAVAILABLE.value
        return ds.with_offers(offers)

    sub = offers[hit & (offers["status"] == Status.ECONOMIC.value).to_numpy()]
    if floor:
        low = np.array([floor.get((h, u), np.iinfo(np.int64).max) for h, u in zip(sub["hour"], sub["unit_id"])])
        rows = sub.index[sub["segment"].to_numpy() >= low]
    else:
        top = sub.groupby(["hour", "unit_id"])["segment"].transform("max")
        rows = top.index[sub["segment"].to_numpy() == top.to_numpy()]
    picked = offers.loc[rows, ["hour", "unit_id"]]
    group = picked.groupby(["hour", "unit_id"], sort=True).ngroup().to_numpy()
    n_groups = int(group.max()) + 1 if len(group) else 0
    f = _draw(rng, factor, n_groups)[group]
    b = _draw(rng, magnitude, n_groups)[group]
    offers.loc[rows, "price"] = f * offers.loc[rows, "price"].to_numpy() + b
    return ds.with_offers(offers)


def truth_panel(ds: Dataset, truth: GroundTruth) -> pd.DataFrame:
    """Observation rows of a generated dataset using the generating reference levels.

    Maximum bids and scores are the ones realised in ``ds``; ``ref`` is the
    latent level the bids were built around, so an estimation on this panel
    targets the generating coefficients directly.
    """
    rows = truth.p_max.merge(truth.ref_true, on=["hour", "unit_id"], how="left")
    rows = rows.merge(truth.treatment[["hour", "bidder_id", "score"]], on=["hour", "bidder_id"], how="left")
    rows = rows.merge(ds.market[["hour", "gas_price"]].rename(columns={"gas_price": "gas"}), on="hour", how="left")
    return rows[["hour", "bidder_id", "unit_id", "p_max", "score", "ref", "gas"]]


def write_truth(truth: GroundTruth, path) -> None:
    t = truth.truth_frame()
    out = pd.DataFrame(
        {
            "hour": [format_hour(h) for h in t["hour"]],
            "bidder_id": t["bidder_id"],
            "treated": t["treated"].map({1.0: "1", 0.0: "0"}).fillna(""),
            "tau": t["tau"],
        }
    )
    write_frame_csv(out, path)
