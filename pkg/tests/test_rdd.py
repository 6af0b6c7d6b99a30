import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampsim.errors import EmptyInput, EmptySample, InvalidFraction, MalformedRow, RankDeficient, TooFewClusters
from ampsim.indices import Side
from ampsim.rdd import (
    RddSpec,
    center_score,
    demean,
    design,
    fit_ols_hc1,
    fit_per_bidder,
    fit_pooled,
    fuzzy_probability,
    load_panel,
    prepare_rows,
    select_bandwidth,
    write_panel,
)
from ampsim.synth import SynthSpec, generate_panel


def test_center_score_examples():
    s, t = center_score(0.8, 1.0, Side.LEQ)
    assert s == pytest.approx(0.2) and t == 1
    assert center_score(1.0, 1.0, "leq") == (0.0, 1)
    s, t = center_score(5.04, 0.04, Side.GEQ)
    assert s == pytest.approx(5.0) and t == 1
    assert center_score(0.04, 0.04, Side.GEQ) == (0.0, 1)
    s, t = center_score(np.array([0.9, 1.1]), 1.0, Side.LEQ)
    np.testing.assert_allclose(s, [0.1, -0.1])
    assert t.tolist() == [1, 0]


def test_bandwidth_examples():
    a = np.arange(1, 11) / 10
    assert select_bandwidth(a, 0.3) == 0.3
    assert select_bandwidth(-a, 1.0) == 1.0
    assert select_bandwidth(a, 0.01) == 0.1
    with pytest.raises(EmptyInput):
        select_bandwidth([], 0.5)
    with pytest.raises(InvalidFraction):
        select_bandwidth(a, 0.0)
    with pytest.raises(InvalidFraction):
        select_bandwidth(a, 1.5)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=60), st.floats(0.01, 1.0))
def test_bandwidth_is_smallest_retaining_quantile(values, frac):
    a = np.abs(np.array(values))
    h = select_bandwidth(values, frac)
    assert (a <= h).mean() >= frac - 1e-12
    smaller = a[a < h]
    if smaller.size:
        assert (a <= smaller.max()).mean() < frac


def test_fuzzy_probability_examples():
    assert fuzzy_probability(0.0, 0.05) == 0.5
    assert fuzzy_probability(0.05, 0.05) == pytest.approx(0.8413, abs=1e-4)
    assert fuzzy_probability(-0.15, 0.05) == pytest.approx(0.00135, abs=1e-5)
    with pytest.raises(ValueError):
        fuzzy_probability(0.1, 0.0)


def _panel(n_bidders=10, n_hours=300, seed=0, **kw):
    spec = SynthSpec(n_bidders=n_bidders, n_hours=n_hours, seed=seed, **kw)
    panel, truth = generate_panel(spec)
    return panel, truth


def test_noiseless_recovery():
    panel, _ = _panel(sigma_eps=0.0, beta0=[float(i) for i in range(10)])
    fit = fit_pooled(panel, RddSpec())
    want = {"treat": -5.0, "score_c": 4.0, "score_c_x_treat": -6.0, "ref": 0.8, "gas": 3.0}
    for k, v in want.items():
        assert fit.coef[k] == pytest.approx(v, abs=1e-8)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_noiseless_recovery_quadratic_and_bandwidth():
    panel, _ = _panel(sigma_eps=0.0)
    fit = fit_pooled(panel, RddSpec(order=2, bandwidth=0.3))
    assert fit.coef["treat"] == pytest.approx(-5.0, abs=1e-8)
    assert abs(fit.coef["score_c2"]) < 1e-8 and abs(fit.coef["score_c2_x_treat"]) < 1e-8


def test_fixed_effect_invariance():
    panel, _ = _panel(seed=3)
    shift = {b: 17.0 * i - 40.0 for i, b in enumerate(sorted(panel["bidder_id"].unique()))}
    moved = panel.assign(p_max=panel["p_max"] + panel["bidder_id"].map(shift))
    a = fit_pooled(panel)
    b = fit_pooled(moved)
    np.testing.assert_allclose(a.coef.to_numpy(), b.coef.to_numpy(), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a.se.to_numpy(), b.se.to_numpy(), rtol=1e-8)


def test_residual_orthogonality():
    panel, _ = _panel(seed=4)
    spec = RddSpec()
    fit = fit_pooled(panel, spec)
    kept, _ = prepare_rows(panel, spec)
    _, X, _ = design(kept, spec, intercept=False)
    codes = pd.factorize(kept["bidder_id"], sort=True)[0]
    Xw = demean(X, codes, codes.max() + 1)
    inner = np.abs(Xw.T @ fit.residuals)
    scale = np.abs(Xw).sum(axis=0) * np.abs(fit.residuals).max()
    assert (inner <= 1e-7 * scale).all()


def test_row_order_invariance():
    panel, _ = _panel(seed=5)
    shuffled = panel.sample(frac=1.0, random_state=1)
    a, b = fit_pooled(panel), fit_pooled(shuffled)
    np.testing.assert_allclose(a.coef.to_numpy(), b.coef.to_numpy(), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.se.to_numpy(), b.se.to_numpy(), rtol=1e-10)


def test_covariance_and_pvalues_well_formed():
    fit = fit_pooled(_panel(seed=6)[0])
    cov = fit.cov.to_numpy()
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12 * np.abs(cov).max()
    assert fit.pvalue.between(0, 1).all()
    assert fit.dof == fit.n_clusters - 1 == 9
    ci = fit.conf_int()
    assert (ci["lower"] < fit.coef).all() and (fit.coef < ci["upper"]).all()


def test_fuzzy_matches_sharp_far_from_cutoff():
    panel, _ = _panel(seed=7)
    s_c, _ = center_score(panel["score"].to_numpy(), 1.0, Side.LEQ)
    sigma = 0.001
    far = panel[np.abs(s_c) > 10 * sigma]
    sharp = fit_pooled(far)
    fuzzy = fit_pooled(far, RddSpec(fuzzy_sigma=sigma))
    np.testing.assert_allclose(fuzzy.coef.to_numpy(), sharp.coef.to_numpy(), atol=1e-6, rtol=0)


def test_fuzzy_interaction_option():
    panel, _ = _panel(seed=8)
    a = fit_pooled(panel, RddSpec(fuzzy_sigma=0.05))
    b = fit_pooled(panel, RddSpec(fuzzy_sigma=0.05, fuzzy_interaction=False))
    assert list(a.coef.index) == list(b.coef.index)
    assert a.coef["treat"] != b.coef["treat"]


def test_singleton_clusters_equal_hc1():
    rng = np.random.default_rng(42)
    n = 50
    score = rng.uniform(0.5, 1.5, n)
    rows = pd.DataFrame(
        {
            "hour": pd.date_range("2019-01-01", periods=n, freq="h", tz="UTC"),
            "bidder_id": [f"B{i:02d}" for i in range(n)],
            "unit_id": [f"U{i:02d}" for i in range(n)],
            "p_max": rng.normal(30, 5, n),
            "score": score,
            "ref": rng.uniform(20, 40, n),
            "gas": rng.uniform(2, 4, n),
        }
    )
    spec = RddSpec(fixed_effects=False)
    cr1 = fit_pooled(rows, spec)
    hc1 = fit_ols_hc1(rows, spec)
    np.testing.assert_allclose(cr1.coef.to_numpy(), hc1.coef.to_numpy(), rtol=1e-12)
    np.testing.assert_allclose(cr1.se.to_numpy(), hc1.se.to_numpy(), rtol=1e-10, atol=0)


def test_rank_deficiency_names_columns():
    panel, _ = _panel(seed=9)
    const_gas = panel.assign(gas=3.0)
    with pytest.raises(RankDeficient) as info:
        fit_pooled(const_gas)
    assert "gas" in str(info.value)


def test_too_few_clusters_and_empty():
    panel, _ = _panel(n_bidders=1, seed=1)
    with pytest.raises(TooFewClusters):
        fit_pooled(panel)
    panel, _ = _panel(seed=1)
    with pytest.raises(EmptySample):
        fit_pooled(panel.assign(score=100.0), RddSpec(bandwidth=0.1))


def test_missing_rows_counted():
    panel, _ = _panel(seed=2)
    holes = panel.copy()
    holes.loc[:9, "ref"] = np.nan
    fit = fit_pooled(holes)
    assert fit.excluded_rows == 10 and fit.n_obs == len(panel) - 10


def test_per_bidder_exclusions_and_summary():
    panel, _ = _panel(n_bidders=4, n_hours=400, seed=3, sigma_eps=1.0)
    flat = panel["bidder_id"] == "B01"
    panel.loc[flat, "p_max"] = 42.0
    short = panel[~((panel["bidder_id"] == "B02") & (panel["hour"] > panel["hour"].iloc[0] + pd.Timedelta(hours=50)))]
    fits, summary, excluded = fit_per_bidder(short, RddSpec())
    assert excluded["B01"] == "not enough variation in maximum bids"
    assert excluded["B02"].startswith("not enough data")
    assert set(fits) == {"B03", "B04"}
    assert summary.n_bidders == 4 and summary.n_analyzed == 2
    assert all(f.cov_type == "HC1" for f in fits.values())


def test_per_bidder_untreated_only_excluded():
    panel, _ = _panel(n_bidders=2, n_hours=300, seed=4)
    panel.loc[panel["bidder_id"] == "B01", "score"] = 2.0
    _, _, excluded = fit_per_bidder(panel)
    assert excluded == {"B01": "no variation in treatment"}


def test_single_bidder_summary_equals_fit():
    panel, _ = _panel(n_bidders=1, n_hours=600, seed=5)
    fits, summary, excluded = fit_per_bidder(panel)
    assert not excluded
    (fit,) = fits.values()
    assert summary.median_effect == fit.treatment_effect
    assert summary.iqr == (fit.treatment_effect, fit.treatment_effect)
    assert summary.n_obs_analyzed == fit.n_obs == summary.n_obs_total


def test_per_bidder_significance_pattern():
    flagged = 0
    reps = 20
    for r in range(reps):
        spec = SynthSpec(n_bidders=3, n_hours=1500, tau=[0.0, 0.0, -8.0], sigma_eps=2.0, seed=100 + r)
        panel, _ = generate_panel(spec)
        fits, summary, _ = fit_per_bidder(panel, threads=2)
        effects = {b: f.treatment_effect for b, f in fits.items()}
        assert effects["B03"] < min(effects["B01"], effects["B02"])
        flagged += fits["B03"].pvalue["treat"] <= 0.05
    assert flagged / reps >= 0.95


def test_panel_csv_roundtrip(tmp_path):
    panel, _ = _panel(n_bidders=2, n_hours=20, seed=6)
    panel.loc[0, "ref"] = np.nan
    write_panel(panel, tmp_path / "panel.csv")
    back = load_panel(tmp_path / "panel.csv")
    pd.testing.assert_frame_equal(back, panel[back.columns.tolist()], check_dtype=False)
    (tmp_path / "bad.csv").write_text("hour,bidder_id\n")
    with pytest.raises(MalformedRow):
        load_panel(tmp_path / "bad.csv")


def test_spec_validation():
    for kw in ({"bandwidth": 0.0}, {"order": 3}, {"fuzzy_sigma": -1.0}):
        with pytest.raises(ValueError):
            RddSpec(**kw)
