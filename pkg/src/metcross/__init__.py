"""Cross-city metro passenger-flow forecasting with station matching and transfer learning."""

from .errors import DataError, DivergenceError, MetcrossError, ShapeError
from .data import FeatureWindows, FlowPanel, StationSet, WindowSpec, build_feature_bundles
from .matching import StationMatch, build_match
from .pipeline import MetcrossConfig, MetcrossModel, PretrainedSource, finetune, pretrain
from .evaluation import boost, dm_test, mae_rmse
from .synth import SynthSpec, generate
from .experiment import DESK_PROFILE, RunConfig, prepare_task, run_experiment, run_model

__all__ = [
    "DataError", "DivergenceError", "MetcrossError", "ShapeError",
    "FeatureWindows", "FlowPanel", "StationSet", "WindowSpec", "build_feature_bundles",
    "StationMatch", "build_match",
    "MetcrossConfig", "MetcrossModel", "PretrainedSource", "finetune", "pretrain",
    "boost", "dm_test", "mae_rmse",
    "SynthSpec", "generate",
    "DESK_PROFILE", "RunConfig", "prepare_task", "run_experiment", "run_model",
]
