import json
import shutil
from pathlib import Path

import pandas as pd
import pytest

import ampsim
from ampsim.cli import run

SAMPLE = Path(ampsim.__file__).parent / "sample"
PIPELINE_OUTPUTS = {
    "refs.csv",
    "scores.csv",
    "screening.csv",
    "prices.csv",
    "scenario_report.csv",
    "hours.csv",
    "panel.csv",
    "fit.csv",
    "summary.csv",
    "manifest.json",
}


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = out / "spec.toml"
    spec.write_text("n_bidders = 12\nn_hours = 240\nunits_per_bidder = 1\nmax_segments = 4\n")
    assert run(["synth", "--spec", str(spec), "--seed", "7", "--out", str(out / "d")]) == 0
    return out / "d"


@pytest.fixture(scope="module")
def sample_runs(tmp_path_factory):
    outs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"pipe{i}")
        assert run(["pipeline", "--config", str(SAMPLE / "pipeline.toml"), "--out", str(out)]) == 0
        outs.append(out)
    return outs


def test_unknown_subcommand_is_usage_error(capsys):
    assert run(["frobnicate"]) == 2
    assert "usage:" in capsys.readouterr().err
    assert run([]) == 2


def test_bad_flag_value_is_usage_error(capsys):
    assert run(["refs", "--threads", "0"]) == 2
    assert run(["screen", "--preset", "nope"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_data_is_usage_error(tmp_path, capsys):
    assert run(["refs", "--out", str(tmp_path)]) == 2
    assert "usage:" in capsys.readouterr().err


def test_malformed_input_is_validation_error(tmp_path, small_data, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(small_data, bad)
    lines = (bad / "offers.csv").read_text().splitlines()
    lines[2] = lines[2].replace("ECONOMIC", "SOMETIMES")
    (bad / "offers.csv").write_text("\n".join(lines) + "\n")
    assert run(["clear", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_synth_writes_dataset_and_manifest(small_data):
    for name in ("offers.csv", "market.csv", "areas.csv", "truth.csv", "panel.csv", "manifest.json"):
        assert (small_data / name).exists()
    truth = pd.read_csv(small_data / "truth.csv")
    assert list(truth.columns) == ["hour", "bidder_id", "treated", "tau"]
    m = json.loads((small_data / "manifest.json").read_text())
    assert m["seed"] == 7 and m["subcommand"] == "synth" and m["version"] == ampsim.__version__
    assert set(m["outputs"]) == {"offers.csv", "market.csv", "areas.csv", "truth.csv", "panel.csv"}


def test_each_subcommand_writes_its_csv(tmp_path, small_data):
    expected = {
        "refs": ("refs.csv", ["hour", "unit_id", "reference_usd_per_mwh"]),
        "rsi": ("scores.csv", ["hour", "bidder_id", "score"]),
        "congestion": ("scores.csv", ["hour", "score"]),
        "screen": (
            "screening.csv",
            ["hour", "structural_failed", "n_conduct_failures", "impact_failed", "mitigated", "original_price", "mitigated_price"],
        ),
        "clear": ("prices.csv", ["hour", "clearing_price", "total_cost", "feasible"]),
        "scenario": ("hours.csv", ["hour", "p_star", "p_mitigated", "mitigated_flag"]),
    }
    for cmd, (name, cols) in expected.items():
        out = tmp_path / cmd
        assert run([cmd, "--data", str(small_data), "--out", str(out)]) == 0, cmd
        frame = pd.read_csv(out / name)
        assert list(frame.columns) == cols, cmd
        assert (out / "manifest.json").exists()


def test_scenario_on_calm_year_has_no_mitigation(tmp_path, small_data, capsys):
    assert run(["scenario", "--preset", "baseline", "--data", str(small_data), "--out", str(tmp_path)]) == 0
    report = pd.read_csv(tmp_path / "scenario_report.csv")
    assert report.loc[0, "mitigated_hours"] == 0
    assert report.loc[0, "total_surplus_increase"] == 0
    assert "0 mitigated hours" in capsys.readouterr().out


def test_synth_then_rdd_recovers_effect(tmp_path):
    spec = tmp_path / "spec.toml"
    spec.write_text("n_bidders = 30\nn_hours = 600\nmax_segments = 3\nseed = 3\n")
    d = tmp_path / "d"
    assert run(["synth", "--spec", str(spec), "--out", str(d)]) == 0
    assert run(["rdd", "--data", str(d), "--retain", "0.3", "--out", str(tmp_path / "fit"), "--per-bidder"]) == 0
    fit = pd.read_csv(tmp_path / "fit" / "fit.csv").set_index("coefficient")
    tau = pd.read_csv(d / "truth.csv")["tau"].iloc[0]
    assert tau == -5.0
    est, se = fit.loc["treat", "estimate"], fit.loc["treat", "se"]
    assert abs(est - tau) <= 3 * se
    summary = pd.read_csv(tmp_path / "fit" / "summary.csv")
    assert {"n_analyzed", "median_effect", "significant_share"} <= set(summary.columns)


def test_rdd_bandwidth_forms(tmp_path, small_data):
    assert run(["rdd", "--data", str(small_data), "--bandwidth", "retain:0.5", "--out", str(tmp_path / "a")]) == 0
    assert run(["rdd", "--data", str(small_data), "--bandwidth", "0.4", "--fuzzy", "0.05", "--out", str(tmp_path / "b")]) == 0
    assert run(["rdd", "--data", str(small_data), "--bandwidth", "0.4", "--retain", "0.3", "--out", str(tmp_path / "c")]) == 2
    assert run(["rdd", "--data", str(small_data), "--bandwidth", "wide", "--out", str(tmp_path / "d")]) == 2


def test_pipeline_on_bundled_sample(sample_runs):
    out = sample_runs[0]
    names = {p.name for p in out.iterdir()}
    assert PIPELINE_OUTPUTS <= names
    report = pd.read_csv(out / "scenario_report.csv").set_index("scenario")
    assert list(report.index) == ["baseline", "lower-conduct", "lower-impact", "lower-both", "no-pivotality"]
    counts = report["mitigated_hours"]
    assert counts["no-pivotality"] >= counts["lower-conduct"] >= counts["baseline"]
    assert len(pd.read_csv(out / "prices.csv")) == 500


def test_pipeline_is_byte_identical(sample_runs):
    a, b = sample_runs
    for p in sorted(a.iterdir()):
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name
    manifest = json.loads((a / "manifest.json").read_text())
    assert set(manifest) == {"subcommand", "config_digest", "inputs", "seed", "version", "outputs"}


def test_pipeline_congestion_without_areas(tmp_path, small_data, capsys):
    d = tmp_path / "noareas"
    d.mkdir()
    for name in ("offers.csv", "market.csv"):
        shutil.copy(small_data / name, d / name)
    cfg = tmp_path / "p.toml"
    cfg.write_text(f'data = "{d}"\nscoring = "congestion"\nrdd = false\n')
    assert run(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "indices:" in err and "areas.csv" in err


def test_threads_env_default(tmp_path, small_data, monkeypatch):
    monkeypatch.setenv("AMP_SIM_THREADS", "3")
    assert run(["screen", "--data", str(small_data), "--out", str(tmp_path / "t3")]) == 0
    monkeypatch.setenv("AMP_SIM_THREADS", "1")
    assert run(["screen", "--data", str(small_data), "--out", str(tmp_path / "t1")]) == 0
    assert (tmp_path / "t3" / "screening.csv").read_bytes() == (tmp_path / "t1" / "screening.csv").read_bytes()
    # the thread count does not enter the config digest
    m3 = json.loads((tmp_path / "t3" / "manifest.json").read_text())
    m1 = json.loads((tmp_path / "t1" / "manifest.json").read_text())
    assert m3["config_digest"] == m1["config_digest"]
    monkeypatch.setenv("AMP_SIM_THREADS", "many")
    assert run(["screen", "--data", str(small_data), "--out", str(tmp_path / "tx")]) == 2


def test_config_file_flags_override(tmp_path, small_data):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'data = "{small_data}"\npreset = "no-pivotality"\n')
    assert run(["scenario", "--config", str(cfg), "--preset", "baseline", "--out", str(tmp_path / "o")]) == 0
    report = pd.read_csv(tmp_path / "o" / "scenario_report.csv")
    assert report.loc[0, "scenario"] == "baseline"
    (tmp_path / "broken.toml").write_text("data = [\n")
    assert run(["scenario", "--config", str(tmp_path / "broken.toml"), "--out", str(tmp_path / "x")]) == 1


def test_inputs_not_mutated(tmp_path, small_data):
    before = {p.name: p.read_bytes() for p in small_data.iterdir() if p.suffix == ".csv"}
    assert run(["screen", "--data", str(small_data), "--out", str(tmp_path)]) == 0
    after = {p.name: p.read_bytes() for p in small_data.iterdir() if p.suffix == ".csv"}
    assert before == after
