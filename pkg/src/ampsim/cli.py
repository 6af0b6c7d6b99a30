"""Command-line entry point ``amp-sim``.

Every subcommand reads a flat TOML config (``--config``), lets each flag
override the matching config key, writes its CSV outputs into ``--out`` and
finishes with ``manifest.json`` listing the effective-config digest, input
and output digests, the seed and the tool version. Nothing time-dependent is
recorded, so repeated runs are byte-identical.

Exit codes: 0 success, 1 validation or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .clearing import clear
from .data import NYISO_SEGMENT_CAP, format_hour, load_dataset, save_dataset, validate_dataset, write_frame_csv
from .errors import AmpSimError, ClearingError
from .indices import ScoreKind, Side, congestion_series, market_rsi_series, pivotal_hour_share
from .rdd import RddSpec, center_score, fit_per_bidder, fit_pooled, load_panel, panel_from_dataset, prepare_rows, select_bandwidth, write_panel
from .reference import DEFAULT_WINDOW_DAYS, reference_table, references_long
from .scenarios import read_hour_filter, run_scenario, score_series_for, screen_hours, write_hours, write_report
from .screening import PRESETS, AmpConfig
from .synth import SynthSpec, generate, perturb, truth_panel, write_truth

SUBCOMMANDS = ("refs", "rsi", "congestion", "screen", "clear", "scenario", "synth", "rdd", "pipeline")
AMP_KEYS = {f.name for f in fields(AmpConfig)} - {"nyiso_area_rule", "unit_thresholds"}


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit code 2)."""


class ConfigError(AmpSimError, ValueError):
    """Invalid configuration content (exit code 1)."""


class StageError(AmpSimError):
    """A pipeline step failed; the message is prefixed with the module name."""


# ----------------------------------------------------------------------------
# argument parsing


def _threads_default() -> int:
    raw = os.environ.get("AMP_SIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"AMP_SIM_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"AMP_SIM_THREADS must be a positive integer, got {raw!r}")
    return n


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML config; flags override its keys")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="random seed (synth)")
    common.add_argument("--threads", type=_positive_int, help="worker threads (default: $AMP_SIM_THREADS or 1)")
    common.add_argument("--data", help="dataset directory with offers.csv, market.csv and areas.csv")

    parser = argparse.ArgumentParser(prog="amp-sim", description="Automated market power mitigation simulator.")
    parser.add_argument("--version", action="version", version=f"amp-sim {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("refs", parents=[common], help="rolling reference levels -> refs.csv")
    p.add_argument("--window-days", dest="window_days", type=_positive_int)

    p = sub.add_parser("rsi", parents=[common], help="per-firm residual supply index -> scores.csv")
    p.add_argument("--must-take", dest="must_take", choices=["max_output", "segments"])

    sub.add_parser("congestion", parents=[common], help="lagged congestion index -> scores.csv")

    for name, text in (("screen", "three-step screening per hour -> screening.csv"), ("scenario", "threshold scenario -> scenario_report.csv, hours.csv")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--preset", choices=sorted(PRESETS), help="named threshold set (default: baseline)")
        p.add_argument("--exclude", help="CSV with an 'hour' column of hours to leave out")

    sub.add_parser("clear", parents=[common], help="merit-order clearing per hour -> prices.csv")

    p = sub.add_parser("synth", parents=[common], help="synthetic dataset with ground truth")
    p.add_argument("--spec", help="TOML file of generator settings")

    p = sub.add_parser("rdd", parents=[common], help="regression discontinuity fit -> fit.csv, summary.csv")
    p.add_argument("--panel", help="panel CSV (default: <data>/panel.csv)")
    p.add_argument("--bandwidth", help="bandwidth h, or retain:<fraction>")
    p.add_argument("--retain", type=float, help="choose the bandwidth retaining this fraction of rows")
    p.add_argument("--fuzzy", type=float, help="fuzzy design with normal-CDF scale sigma")
    p.add_argument("--per-bidder", dest="per_bidder", action="store_true", default=None, help="also fit one regression per bidder")
    p.add_argument("--order", type=int, choices=[1, 2])
    p.add_argument("--cutoff", type=float)
    p.add_argument("--side", choices=[s.value for s in Side])

    p = sub.add_parser("pipeline", parents=[common], help="refs, scores, screening, clearing, scenarios and rdd in one run")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--bandwidth")
    p.add_argument("--retain", type=float)
    p.add_argument("--fuzzy", type=float)
    return parser


# ----------------------------------------------------------------------------
# settings, digests, manifest


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


PATH_KEYS = ("data", "exclude", "panel", "spec")


def _settings(args: argparse.Namespace) -> dict:
    """Config keys overridden by every flag that was given.

    Relative paths inside a config file are taken relative to that file.
    """
    cfg = _load_config(args.config)
    if args.config:
        base = Path(args.config).parent
        for k in PATH_KEYS:
            if isinstance(cfg.get(k), str) and not Path(cfg[k]).is_absolute():
                cfg[k] = str(base / cfg[k])
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "subcommand")}
    merged = {**cfg, **flags}
    merged.setdefault("out", ".")
    if "threads" not in merged:
        merged["threads"] = _threads_default()
    return merged


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(settings: dict) -> str:
    # thread count and output location do not affect results
    relevant = {k: v for k, v in settings.items() if k not in ("out", "threads")}
    blob = json.dumps(relevant, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class Run:
    """Collects inputs and outputs of one invocation and writes the manifest."""

    def __init__(self, subcommand: str, settings: dict):
        self.subcommand = subcommand
        self.settings = settings
        self.out = Path(settings["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def add_input(self, path) -> None:
        path = Path(path)
        if path.exists():
            self.inputs[str(path)] = file_digest(path)

    def add_dataset_inputs(self, directory) -> None:
        for name in ("offers.csv", "market.csv", "areas.csv"):
            self.add_input(Path(directory) / name)

    def path(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def write_manifest(self) -> Path:
        manifest = {
            "subcommand": self.subcommand,
            "config_digest": config_digest(self.settings),
            "inputs": dict(sorted(self.inputs.items())),
            "seed": self.settings.get("seed"),
            "version": __version__,
            "outputs": {name: file_digest(self.out / name) for name in sorted(self.outputs)},
        }
        target = self.out / "manifest.json"
        target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return target


def _bool_text(values) -> list[str]:
    return ["true" if bool(v) else "false" for v in values]


def _hours_text(values) -> list[str]:
    return [format_hour(h) for h in values]


# ----------------------------------------------------------------------------
# shared steps


def _dataset(settings: dict, run: Run, require_areas: bool = False):
    if not settings.get("data"):
        raise UsageError("--data (or the 'data' config key) is required")
    cap = int(settings.get("segment_cap", NYISO_SEGMENT_CAP))
    ds = load_dataset(settings["data"], cap, require_areas=require_areas)
    run.add_dataset_inputs(settings["data"])
    return ds


def _amp_config(settings: dict) -> AmpConfig:
    preset = settings.get("preset", "baseline")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    mapping = PRESETS[preset].to_mapping()
    overrides = {k: v for k, v in settings.items() if k in AMP_KEYS or k.startswith("nyiso_")}
    if "structural_kind" in overrides and "structural_cutoff" not in overrides:
        mapping["structural_cutoff"] = None
        mapping["structural_side"] = None
    mapping.update(overrides)
    return AmpConfig.from_mapping(mapping)


def _exclusions(settings: dict, run: Run):
    path = settings.get("exclude")
    if not path:
        return None
    run.add_input(path)
    return read_hour_filter(path)


def write_refs(table: pd.DataFrame, path) -> None:
    long = references_long(table)
    write_frame_csv(
        pd.DataFrame({"hour": _hours_text(long["hour"]), "unit_id": long["unit_id"], "reference_usd_per_mwh": long["reference"]}),
        path,
    )


def write_scores(series, path) -> None:
    v = series.values
    cols = {"hour": _hours_text(v["hour"])}
    if series.per_bidder:
        cols["bidder_id"] = v["bidder_id"].to_numpy()
    cols["score"] = v["score"].to_numpy(dtype=float)
    write_frame_csv(pd.DataFrame(cols), path)


def write_screening(outcomes, path) -> None:
    write_frame_csv(
        pd.DataFrame(
            {
                "hour": _hours_text(o.hour for o in outcomes),
                "structural_failed": _bool_text(o.structural_failed for o in outcomes),
                "n_conduct_failures": [len(o.conduct_failures) for o in outcomes],
                "impact_failed": _bool_text(o.impact_failed for o in outcomes),
                "mitigated": _bool_text(o.mitigated for o in outcomes),
                "original_price": [o.original_price for o in outcomes],
                "mitigated_price": [o.mitigated_price for o in outcomes],
            }
        ),
        path,
    )


def clear_all(ds) -> pd.DataFrame:
    rows = []
    for h in ds.hours:
        try:
            r = clear(ds.offers_at(h), ds.demand_at(h), h)
            rows.append((format_hour(h), r.clearing_price, r.total_cost, "true"))
        except ClearingError:
            rows.append((format_hour(h), math.nan, math.nan, "false"))
    return pd.DataFrame(rows, columns=["hour", "clearing_price", "total_cost", "feasible"])


def _bandwidth(settings: dict, rows: pd.DataFrame, spec: RddSpec) -> float | None:
    raw = settings.get("bandwidth")
    retain = settings.get("retain")
    if raw is not None and str(raw).startswith("retain:"):
        if retain is not None:
            raise UsageError("give either --retain or --bandwidth retain:<f>, not both")
        retain = str(raw).split(":", 1)[1]
        raw = None
    if raw is not None and retain is not None:
        raise UsageError("give either a bandwidth or a retention fraction, not both")
    if raw is not None:
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"bandwidth must be a number or retain:<fraction>, got {raw!r}")
    if retain is not None:
        kept, _ = prepare_rows(rows, spec)
        centred, _ = center_score(kept["score"].to_numpy(dtype=float), spec.cutoff, spec.side)
        return select_bandwidth(centred, float(retain))
    return None


def _rdd_spec(settings: dict, rows: pd.DataFrame, default_kind: ScoreKind = ScoreKind.RSI) -> RddSpec:
    from .indices import DEFAULT_CUTOFF, DEFAULT_SIDE

    kind = ScoreKind(settings.get("score_kind", default_kind))
    base = RddSpec(
        cutoff=float(settings.get("cutoff", DEFAULT_CUTOFF[kind])),
        side=settings.get("side", DEFAULT_SIDE[kind]),
        order=int(settings.get("order", 1)),
        fuzzy_sigma=settings.get("fuzzy"),
        fuzzy_interaction=bool(settings.get("fuzzy_interaction", True)),
        fixed_effects=bool(settings.get("fixed_effects", True)),
    )
    h = _bandwidth(settings, rows, base)
    if h is None:
        return base
    from dataclasses import replace

    return replace(base, bandwidth=h)


def _write_rdd(settings: dict, rows: pd.DataFrame, run: Run, spec: RddSpec) -> None:
    fit = fit_pooled(rows, spec)
    write_frame_csv(fit.table(), run.path("fit.csv"))
    print(
        f"treat = {fit.treatment_effect:.6g} (se {fit.se['treat']:.4g}), n = {fit.n_obs}, clusters = {fit.n_clusters}"
        + (f", bandwidth = {spec.bandwidth:.6g}" if spec.bandwidth is not None else "")
    )
    if settings.get("per_bidder"):
        fits, summary, excluded = fit_per_bidder(
            rows, spec, min_obs=int(settings.get("min_obs", 100)), threads=int(settings["threads"])
        )
        write_frame_csv(pd.DataFrame([summary.as_row()]), run.path("summary.csv"))
        bidders = sorted(set(fits) | set(excluded))
        write_frame_csv(
            pd.DataFrame(
                {
                    "bidder_id": bidders,
                    "estimate": [fits[b].treatment_effect if b in fits else math.nan for b in bidders],
                    "se": [float(fits[b].se["treat"]) if b in fits else math.nan for b in bidders],
                    "p": [float(fits[b].pvalue["treat"]) if b in fits else math.nan for b in bidders],
                    "n_obs": [fits[b].n_obs if b in fits else 0 for b in bidders],
                    "excluded_reason": [excluded.get(b, "") for b in bidders],
                }
            ),
            run.path("bidders.csv"),
        )


# ----------------------------------------------------------------------------
# subcommands


def cmd_refs(settings: dict, run: Run) -> None:
    ds = _dataset(settings, run)
    table = reference_table(ds, int(settings.get("window_days", DEFAULT_WINDOW_DAYS)), threads=int(settings["threads"]))
    write_refs(table, run.path("refs.csv"))


def cmd_rsi(settings: dict, run: Run) -> None:
    ds = _dataset(settings, run)
    series = market_rsi_series(ds, settings.get("must_take", "max_output"), float(settings.get("cutoff", 1.0)))
    write_scores(series, run.path("scores.csv"))
    print(f"share of hours with a pivotal firm: {pivotal_hour_share(series):.4f}")


def cmd_congestion(settings: dict, run: Run) -> None:
    ds = _dataset(settings, run, require_areas=True)
    series = congestion_series(ds, float(settings.get("cutoff", 0.04)))
    write_scores(series, run.path("scores.csv"))


def cmd_screen(settings: dict, run: Run) -> None:
    cfg = _amp_config(settings)
    ds = _dataset(settings, run, require_areas=cfg.structural_kind is ScoreKind.CONGESTION)
    excluded = _exclusions(settings, run) or set()
    hours = [h for h in ds.hours if h not in excluded]
    outcomes = screen_hours(ds, cfg, hours, threads=int(settings["threads"]))
    write_screening(outcomes, run.path("screening.csv"))


def cmd_clear(settings: dict, run: Run) -> None:
    ds = _dataset(settings, run)
    write_frame_csv(clear_all(ds), run.path("prices.csv"))


def cmd_scenario(settings: dict, run: Run) -> None:
    cfg = _amp_config(settings)
    ds = _dataset(settings, run, require_areas=cfg.structural_kind is ScoreKind.CONGESTION)
    name = settings.get("name", settings.get("preset", "baseline"))
    report = run_scenario(
        ds,
        cfg,
        _exclusions(settings, run),
        name,
        demand_column=settings.get("demand_column", "load_forecast"),
        threads=int(settings["threads"]),
    )
    write_report([report], run.path("scenario_report.csv"))
    write_hours(report, run.path("hours.csv"))
    print(f"{name}: {report.n_mitigated} mitigated hours, surplus increase {report.total_surplus_increase:.6g}")


SYNTH_EXTRA = {"market", "perturb", "perturb_share", "perturb_target", "perturb_magnitude", "perturb_factor", "perturb_seed"}


def cmd_synth(settings: dict, run: Run) -> None:
    spec_path = settings.get("spec")
    keys = {}
    if spec_path:
        run.add_input(spec_path)
        keys = _load_config(spec_path)
    # generator keys may also sit directly in --config
    for k, v in settings.items():
        if k in {f.name for f in fields(SynthSpec)} or k in SYNTH_EXTRA:
            keys.setdefault(k, v)
    if "seed" in settings:
        keys["seed"] = settings["seed"]
    extra = {k: keys.pop(k) for k in list(keys) if k in SYNTH_EXTRA}
    market = extra.get("market", "rsi")
    if market in ("congestion", "nyiso"):
        spec = SynthSpec.congestion_like(**keys)
    elif market in ("rsi", "isone"):
        spec = SynthSpec.from_mapping(keys)
    else:
        raise ConfigError(f"unknown market {market!r}; use 'rsi' or 'congestion'")
    settings["seed"] = spec.seed
    ds, truth = generate(spec)
    if extra.get("perturb"):
        ds = perturb(
            ds,
            extra["perturb"],
            share=float(extra.get("perturb_share", 0.05)),
            target=extra.get("perturb_target", "random"),
            magnitude=_pair(extra.get("perturb_magnitude", 300.0)),
            factor=_pair(extra.get("perturb_factor", 1.0)),
            seed=int(extra.get("perturb_seed", spec.seed)),
        )
    save_dataset(ds, run.out)
    for name in ("offers.csv", "market.csv", "areas.csv"):
        run.path(name)
    write_truth(truth, run.path("truth.csv"))
    write_panel(truth_panel(ds, truth), run.path("panel.csv"))
    findings = validate_dataset(ds)
    if findings:
        raise ConfigError(f"generated dataset failed validation: {findings[0].message}")


def _pair(value):
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ConfigError(f"expected a number or a [low, high] pair, got {value!r}")
        return (float(value[0]), float(value[1]))
    return float(value)


def cmd_rdd(settings: dict, run: Run) -> None:
    path = settings.get("panel")
    if path is None:
        if not settings.get("data"):
            raise UsageError("--panel or --data is required")
        path = Path(settings["data"]) / "panel.csv"
    run.add_input(path)
    rows = load_panel(path)
    spec = _rdd_spec(settings, rows)
    _write_rdd(settings, rows, run, spec)


def cmd_pipeline(settings: dict, run: Run) -> None:
    """refs -> scores -> screening and clearing -> scenarios -> rdd."""
    threads = int(settings["threads"])
    with _stage("data"):
        ds = _dataset(settings, run)
        findings = validate_dataset(ds)
        if findings:
            raise ConfigError(f"{len(findings)} validation findings, first: {findings[0].message}")
    with _stage("reference"):
        refs = reference_table(ds, int(settings.get("window_days", DEFAULT_WINDOW_DAYS)), threads=threads)
        write_refs(refs, run.path("refs.csv"))
    with _stage("indices"):
        kind = ScoreKind(settings.get("scoring", "rsi"))
        if kind is ScoreKind.CONGESTION and not (Path(settings["data"]) / "areas.csv").exists():
            raise FileNotFoundError("congestion scoring needs areas.csv in the dataset directory")
        cfg = _amp_config({**settings, "structural_kind": kind.value})
        scores = score_series_for(ds, cfg, settings.get("must_take", "max_output"))
        write_scores(scores, run.path("scores.csv"))
    excluded = None
    with _stage("scenarios"):
        excluded = _exclusions(settings, run)
    with _stage("screening"):
        hours = [h for h in ds.hours if h not in (excluded or set())]
        write_screening(screen_hours(ds, cfg, hours, references=refs, scores=scores, threads=threads), run.path("screening.csv"))
    with _stage("clearing"):
        write_frame_csv(clear_all(ds), run.path("prices.csv"))
    with _stage("scenarios"):
        names = settings.get("presets") or [settings.get("preset", "baseline")]
        reports = []
        for name in names:
            scfg = _amp_config({**settings, "preset": name, "structural_kind": kind.value})
            reports.append(run_scenario(ds, scfg, excluded, name, references=refs, scores=scores, threads=threads))
        write_report(reports, run.path("scenario_report.csv"))
        write_hours(reports[0], run.path("hours.csv"))
        for r in reports[1:]:
            write_hours(r, run.path(f"hours_{r.name}.csv"))
    if settings.get("rdd", True):
        with _stage("rdd"):
            rows = panel_from_dataset(ds, refs, scores)
            write_panel(rows, run.path("panel.csv"))
            spec = _rdd_spec({**settings, "score_kind": kind.value}, rows, kind)
            _write_rdd(settings, rows, run, spec)


class _stage:
    """Context manager re-raising any failure as a module-qualified StageError."""

    def __init__(self, module: str):
        self.module = module

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, (StageError, UsageError)):
            return False
        if isinstance(exc, (AmpSimError, ValueError, KeyError, OSError, np.linalg.LinAlgError)):
            raise StageError(f"{self.module}: {type(exc).__name__}: {exc}") from exc
        return False


COMMANDS = {
    "refs": cmd_refs,
    "rsi": cmd_rsi,
    "congestion": cmd_congestion,
    "screen": cmd_screen,
    "clear": cmd_clear,
    "scenario": cmd_scenario,
    "synth": cmd_synth,
    "rdd": cmd_rdd,
    "pipeline": cmd_pipeline,
}


def run(argv=None) -> int:
    """Execute one invocation and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = _settings(args)
        run_ = Run(args.subcommand, settings)
        COMMANDS[args.subcommand](settings, run_)
        run_.write_manifest()
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"amp-sim {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    except (AmpSimError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"amp-sim {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def pipeline(config) -> int:
    """Run the full pipeline from a config file path."""
    return run(["pipeline", "--config", str(config)])


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
