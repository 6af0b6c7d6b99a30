"""Automated market power mitigation simulator and regression-discontinuity toolkit."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .clearing import ClearingResult, clear, clear_ilp_oracle
from .data import Dataset, Status, load_dataset, save_dataset, validate_dataset
from .indices import ScoreKind, ScoreSeries, Side, congestion_series, market_rsi_series
from .rdd import RddFit, RddSpec, center_score, fit_per_bidder, fit_pooled, select_bandwidth
from .reference import reference_table, rolling_reference_series
from .scenarios import ScenarioReport, run_presets, run_scenario
from .screening import PRESETS, AmpConfig, screen_hour
from .synth import SynthSpec, generate, generate_panel, perturb

__all__ = [
    "BACKEND",
    "PRESETS",
    "AmpConfig",
    "ClearingResult",
    "Dataset",
    "RddFit",
    "RddSpec",
    "ScenarioReport",
    "ScoreKind",
    "ScoreSeries",
    "Side",
    "Status",
    "SynthSpec",
    "center_score",
    "clear",
    "clear_ilp_oracle",
    "congestion_series",
    "fit_per_bidder",
    "fit_pooled",
    "generate",
    "generate_panel",
    "load_dataset",
    "market_rsi_series",
    "perturb",
    "reference_table",
    "rolling_reference_series",
    "run_presets",
    "run_scenario",
    "save_dataset",
    "screen_hour",
    "select_bandwidth",
    "validate_dataset",
]
