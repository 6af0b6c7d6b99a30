"""Regression discontinuity estimation of the screening-activation effect on maximum bids.

The outcome is a unit's maximum bid; the regressors are the treatment
indicator (or, in fuzzy mode, the treatment probability), the centred score,
their interaction, optional quadratic terms and the controls (reference
level, gas price). Pooled fits absorb bidder fixed effects by demeaning and
report CR1 cluster-robust standard errors with ``G - 1`` degrees of freedom.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .data import Dataset, format_hour, max_economic_bids, write_frame_csv
from .errors import EmptyInput, EmptySample, InvalidFraction, MalformedRow, RankDeficient, TooFewClusters
from .indices import ScoreSeries, Side

PANEL_COLUMNS = ["hour", "bidder_id", "unit_id", "p_max", "score", "ref", "gas"]
_RANK_TOL = 1e-10


def center_score(score, cutoff: float, side: Side | str):
    """Centred score and sharp treatment.

    Returns ``(c - S, S <= c)`` for the LEQ side and ``(S - c, S >= c)`` for
    the GEQ side; treated observations always have a non-negative centred
    score. Works elementwise on arrays.
    """
    side = Side(side)
    s = np.asarray(score, dtype=float)
    if side is Side.LEQ:
        centred, treated = cutoff - s, s <= cutoff
    else:
        centred, treated = s - cutoff, s >= cutoff
    if centred.ndim == 0:
        return float(centred), int(treated)
    return centred, treated.astype(np.int8)


def select_bandwidth(centered, retain_fraction: float) -> float:
    """Smallest ``h`` with at least ``retain_fraction`` of ``|centered| <= h``."""
    a = np.sort(np.abs(np.asarray(centered, dtype=float).ravel()))
    a = a[~np.isnan(a)]
    if a.size == 0:
        raise EmptyInput("no scores to select a bandwidth from")
    if not 0 < retain_fraction <= 1:
        raise InvalidFraction(f"retain fraction must lie in (0, 1], got {retain_fraction!r}")
    k = int(np.ceil(retain_fraction * a.size - 1e-12))
    return float(a[max(k, 1) - 1])


def fuzzy_probability(centered, sigma: float):
    """Treatment probability ``Phi(centered / sigma)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    p = stats.norm.cdf(np.asarray(centered, dtype=float) / sigma)
    return float(p) if np.ndim(p) == 0 else p


@dataclass(frozen=True)
class RddSpec:
    """Estimation options.

    ``bandwidth=None`` keeps every row; ``order`` adds quadratic score terms
    when 2; ``fuzzy_sigma`` switches to the continuous-treatment fuzzy design
    and ``fuzzy_interaction`` controls whether the probability (True) or the
    sharp indicator (False) enters the score interactions.
    """

    cutoff: float = 1.0
    side: Side = Side.LEQ
    bandwidth: float | None = None
    order: int = 1
    fuzzy_sigma: float | None = None
    fuzzy_interaction: bool = True
    fixed_effects: bool = True
    cluster: str = "bidder_id"
    alpha: float = 0.05
    controls: tuple[str, ...] = ("ref", "gas")

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.fuzzy_sigma is not None and not self.fuzzy_sigma > 0:
            raise ValueError("fuzzy sigma must be positive")


@dataclass(frozen=True)
class RddFit:
    coef: pd.Series
    cov: pd.DataFrame
    se: pd.Series
    tstat: pd.Series
    pvalue: pd.Series
    n_obs: int
    n_clusters: int
    dof: int
    r2: float
    r2_within: float
    cov_type: str
    excluded_rows: int = 0
    residuals: np.ndarray = field(default=None, repr=False)

    @property
    def treatment_effect(self) -> float:
        return float(self.coef["treat"])

    def conf_int(self, alpha: float = 0.05) -> pd.DataFrame:
        q = stats.t.ppf(1 - alpha / 2, self.dof)
        return pd.DataFrame({"lower": self.coef - q * self.se, "upper": self.coef + q * self.se})

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"coefficient": self.coef.index, "estimate": self.coef.values, "se": self.se.values, "t": self.tstat.values, "p": self.pvalue.values}
        )


def prepare_rows(rows: pd.DataFrame, spec: RddSpec) -> tuple[pd.DataFrame, int]:
    """Drop rows with a missing outcome, score or control and apply the bandwidth."""
    need = ["p_max", "score", *spec.controls]
    ok = rows[need].notna().all(axis=1)
    kept = rows.loc[ok]
    excluded = int((~ok).sum())
    centred, treated = center_score(kept["score"].to_numpy(dtype=float), spec.cutoff, spec.side)
    kept = kept.assign(score_c=centred, treat=treated)
    if spec.bandwidth is not None:
        kept = kept.loc[np.abs(centred) <= spec.bandwidth]
    return kept, excluded


def design(rows: pd.DataFrame, spec: RddSpec, intercept: bool) -> tuple[np.ndarray, np.ndarray, list[str]]:
    s = rows["score_c"].to_numpy(dtype=float)
    sharp = rows["treat"].to_numpy(dtype=float)
    t = fuzzy_probability(s, spec.fuzzy_sigma) if spec.fuzzy_sigma is not None else sharp
    ti = t if spec.fuzzy_interaction else sharp
    cols = [t, s, s * ti]
    names = ["treat", "score_c", "score_c_x_treat"]
    if spec.order == 2:
        cols += [s**2, s**2 * ti]
        names += ["score_c2", "score_c2_x_treat"]
    for c in spec.controls:
        cols.append(rows[c].to_numpy(dtype=float))
        names.append(c)
    if intercept:
        cols.insert(0, np.ones(len(rows)))
        names.insert(0, "const")
    return rows["p_max"].to_numpy(dtype=float), np.column_stack(cols), names


def _group_codes(keys) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(keys), sort=True)
    return codes, len(uniques)


def demean(a: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Subtract group means (the within transformation)."""
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    if a.ndim == 1:
        return a - (np.bincount(codes, weights=a, minlength=n_groups) / counts)[codes]
    out = np.empty_like(a)
    for j in range(a.shape[1]):
        out[:, j] = a[:, j] - (np.bincount(codes, weights=a[:, j], minlength=n_groups) / counts)[codes]
    return out


def _solve(y, X, names):
    """Least squares by column-pivoted QR; returns beta and (X'X)^-1."""
    q, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    scale = d[0] if d.size and d[0] > 0 else 1.0
    rank = int((d > _RANK_TOL * scale * max(X.shape)).sum()) if d.size else 0
    if rank < X.shape[1]:
        raise RankDeficient([names[i] for i in piv[rank:]])
    beta_p = linalg.solve_triangular(r, q.T @ y)
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    bread_p = rinv @ rinv.T
    beta = np.empty_like(beta_p)
    beta[piv] = beta_p
    bread = np.empty_like(bread_p)
    bread[np.ix_(piv, piv)] = bread_p
    return beta, bread


def cluster_covariance(X, resid, bread, codes, n_groups) -> np.ndarray:
    """CR1 sandwich with factor ``G/(G-1) * (N-1)/(N-K)``."""
    n, k = X.shape
    xu = X * resid[:, None]
    scores = np.column_stack([np.bincount(codes, weights=xu[:, j], minlength=n_groups) for j in range(k)])
    meat = scores.T @ scores
    factor = n_groups / (n_groups - 1) * (n - 1) / (n - k)
    v = factor * bread @ meat @ bread
    return (v + v.T) / 2


def hc1_covariance(X, resid) -> np.ndarray:
    """Heteroskedasticity-robust HC1 covariance ``n/(n-k) (X'X)^-1 X' diag(u^2) X (X'X)^-1``."""
    n, k = X.shape
    xtx_inv = np.linalg.inv(X.T @ X)
    meat = np.einsum("i,ij,il->jl", resid**2, X, X)
    v = n / (n - k) * xtx_inv @ meat @ xtx_inv
    return (v + v.T) / 2


def _finish(beta, cov, names, dof, n, n_clusters, r2, r2w, cov_type, excluded, resid) -> RddFit:
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    p = 2 * stats.t.sf(np.abs(t), dof)
    idx = pd.Index(names)
    return RddFit(
        pd.Series(beta, idx),
        pd.DataFrame(cov, idx, idx),
        pd.Series(se, idx),
        pd.Series(t, idx),
        pd.Series(p, idx),
        n,
        n_clusters,
        dof,
        float(r2),
        float(r2w),
        cov_type,
        excluded,
        resid,
    )


def fit_pooled(rows: pd.DataFrame, spec: RddSpec = RddSpec()) -> RddFit:
    """Pooled regression with bidder fixed effects and clustered inference."""
    kept, excluded = prepare_rows(rows, spec)
    if kept.empty:
        raise EmptySample("no observations inside the bandwidth")
    codes, g = _group_codes(kept[spec.cluster].to_numpy())
    if g < 2:
        raise TooFewClusters(f"need at least 2 clusters, got {g}")
    y, X, names = design(kept, spec, intercept=not spec.fixed_effects)
    if spec.fixed_effects:
        fe_codes, n_fe = _group_codes(kept["bidder_id"].to_numpy())
        yw, Xw = demean(y, fe_codes, n_fe), demean(X, fe_codes, n_fe)
    else:
        yw, Xw = y, X
    n, k = Xw.shape
    if n <= k:
        raise EmptySample(f"{n} observations for {k} coefficients")
    beta, bread = _solve(yw, Xw, names)
    resid = yw - Xw @ beta
    cov = cluster_covariance(Xw, resid, bread, codes, g)
    ssr = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - ssr / tss if tss > 0 else float("nan")
    if spec.fixed_effects:
        wss = float(yw @ yw)
        r2w = 1 - ssr / wss if wss > 0 else float("nan")
    else:
        r2w = r2
    return _finish(beta, cov, names, g - 1, n, g, r2, r2w, "CR1", excluded, resid)


def fit_ols_hc1(rows: pd.DataFrame, spec: RddSpec) -> RddFit:
    """Single-equation OLS with intercept and HC1 standard errors (dof ``N - K``)."""
    kept, excluded = prepare_rows(rows, spec)
    y, X, names = design(kept, spec, intercept=True)
    n, k = X.shape
    if n <= k:
        raise EmptySample(f"{n} observations for {k} coefficients")
    beta, _ = _solve(y, X, names)
    resid = y - X @ beta
    cov = hc1_covariance(X, resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - float(resid @ resid) / tss if tss > 0 else float("nan")
    return _finish(beta, cov, names, n - k, n, n, r2, r2, "HC1", excluded, resid)


@dataclass(frozen=True)
class BidderSummary:
    """Per-bidder results in the layout of a bidder-level summary table."""

    n_bidders: int
    n_analyzed: int
    n_obs_total: int
    n_obs_analyzed: int
    median_effect: float
    iqr: tuple[float, float]
    n_significant: int
    n_obs_significant: int
    median_effect_significant: float
    iqr_significant: tuple[float, float]
    alpha: float

    @property
    def significant_share(self) -> float:
        return self.n_significant / self.n_analyzed if self.n_analyzed else float("nan")

    def as_row(self) -> dict:
        return {
            "n_bidders": self.n_bidders,
            "n_analyzed": self.n_analyzed,
            "analyzed_share": self.n_analyzed / self.n_bidders if self.n_bidders else float("nan"),
            "n_obs_total": self.n_obs_total,
            "n_obs_analyzed": self.n_obs_analyzed,
            "median_effect": self.median_effect,
            "iqr_low": self.iqr[0],
            "iqr_high": self.iqr[1],
            "n_significant": self.n_significant,
            "significant_share": self.significant_share,
            "n_obs_significant": self.n_obs_significant,
            "median_effect_significant": self.median_effect_significant,
            "iqr_significant_low": self.iqr_significant[0],
            "iqr_significant_high": self.iqr_significant[1],
        }


def _median_iqr(values):
    if len(values) == 0:
        return float("nan"), (float("nan"), float("nan"))
    v = np.asarray(values, dtype=float)
    return float(np.median(v)), (float(np.quantile(v, 0.25)), float(np.quantile(v, 0.75)))


def fit_per_bidder(
    rows: pd.DataFrame,
    spec: RddSpec = RddSpec(),
    min_obs: int = 100,
    min_variance: float = 1e-6,
    threads: int = 1,
) -> tuple[dict[str, RddFit], BidderSummary, dict[str, str]]:
    """One regression per bidder (no fixed effects, HC1 inference).

    Bidders are excluded, with the reason recorded, when they have fewer than
    ``min_obs`` rows inside the bandwidth, no treated or no untreated rows,
    or maximum bids with variance below ``min_variance``.
    """
    kept_all, _ = prepare_rows(rows, spec)
    total_obs = len(kept_all)
    groups = {b: g for b, g in rows.groupby("bidder_id", sort=True)}
    excluded: dict[str, str] = {}

    def one(b):
        sub, _ = prepare_rows(groups[b], spec)
        if len(sub) < min_obs:
            return b, None, f"not enough data ({len(sub)} rows in bandwidth)"
        n_t = int(sub["treat"].sum())
        if n_t == 0 or n_t == len(sub):
            return b, None, "no variation in treatment"
        if float(np.var(sub["p_max"].to_numpy())) < min_variance:
            return b, None, "not enough variation in maximum bids"
        try:
            return b, fit_ols_hc1(groups[b], spec), None
        except (RankDeficient, EmptySample) as exc:
            return b, None, str(exc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, list(groups)))
    else:
        results = [one(b) for b in groups]
    fits = {}
    for b, fit, reason in results:
        if fit is None:
            excluded[b] = reason
        else:
            fits[b] = fit
    effects = [f.treatment_effect for f in fits.values()]
    sig = {b: f for b, f in fits.items() if f.pvalue["treat"] <= spec.alpha}
    med, iqr = _median_iqr(effects)
    med_s, iqr_s = _median_iqr([f.treatment_effect for f in sig.values()])
    summary = BidderSummary(
        n_bidders=len(groups),
        n_analyzed=len(fits),
        n_obs_total=total_obs,
        n_obs_analyzed=sum(f.n_obs for f in fits.values()),
        median_effect=med,
        iqr=iqr,
        n_significant=len(sig),
        n_obs_significant=sum(f.n_obs for f in sig.values()),
        median_effect_significant=med_s,
        iqr_significant=iqr_s,
        alpha=spec.alpha,
    )
    return fits, summary, excluded


def panel_from_dataset(ds: Dataset, references: pd.DataFrame, scores: ScoreSeries) -> pd.DataFrame:
    """Observation rows (one per unit-hour with an economic bid) built from a dataset.

    ``references`` is the wide table from :func:`ampsim.reference.reference_table`.
    Rows whose reference level or score is missing are kept with NaN and
    dropped (and counted) at estimation time.
    """
    pmax = max_economic_bids(ds.offers).rename("p_max").reset_index()
    bidder = ds.offers.groupby(["hour", "unit_id"], sort=True)["bidder_id"].first().rename("bidder_id")
    rows = pmax.join(bidder, on=["hour", "unit_id"])
    ref_long = references.stack(future_stack=True).rename("ref")
    ref_long.index.names = ["hour", "unit_id"]
    rows = rows.join(ref_long, on=["hour", "unit_id"])
    sv = scores.values
    if scores.per_bidder:
        rows = rows.join(sv.set_index(["hour", "bidder_id"])["score"], on=["hour", "bidder_id"])
    else:
        rows = rows.join(sv.set_index("hour")["score"], on="hour")
    rows = rows.join(ds.market.set_index("hour")["gas_price"].rename("gas"), on="hour")
    return rows[PANEL_COLUMNS].reset_index(drop=True)


def write_panel(rows: pd.DataFrame, path) -> None:
    """Write observation rows; missing values become empty cells."""
    out = rows[PANEL_COLUMNS].copy()
    out["hour"] = [format_hour(h) for h in out["hour"]]
    write_frame_csv(out, path)


def load_panel(path) -> pd.DataFrame:
    """Read a panel CSV with the observation-row columns (empty cell = missing)."""
    frame = pd.read_csv(path, dtype={"bidder_id": str, "unit_id": str}, float_precision="round_trip")
    missing = [c for c in PANEL_COLUMNS if c not in frame]
    if missing:
        raise MalformedRow(1, f"panel is missing columns {missing}")
    frame["hour"] = pd.to_datetime(frame["hour"], format="ISO8601", utc=True)
    for c in ("p_max", "score", "ref", "gas"):
        frame[c] = pd.to_numeric(frame[c], errors="raise").astype(float)
    return frame[PANEL_COLUMNS]
