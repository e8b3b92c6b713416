"""Interpretable patch-based forecasting with exact per-patch attributions."""

from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    PatchLayout,
    SynthSpec,
    TimeSeriesDataset,
    build_layout,
    load_csv,
    make_windows,
    stack_windows,
    synth_generate,
    window_at,
)
from .estimator import PatchDecompForecaster
from .evaluation import AopcrConfig, aopcr, compare_strategies, metrics, seasonal_naive
from .explain import export, global_explain, load_export, local_explain, variable_curves
from .model import ConfigurationError, Decomposition, ModelConfig, forward, init_params
from .train import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AopcrConfig", "CheckpointError", "ConfigError", "ConfigurationError", "DataError", "Decomposition",
    "ModelConfig", "PatchDecompForecaster", "PatchLayout", "RunConfig", "SynthSpec", "TimeSeriesDataset",
    "TrainConfig", "aopcr", "build_layout", "compare_strategies", "export", "forward", "global_explain",
    "init_params", "load_checkpoint", "load_config", "load_csv", "load_export", "local_explain",
    "make_windows", "metrics", "save_checkpoint", "seasonal_naive", "stack_windows", "synth_generate",
    "train", "variable_curves", "window_at",
]
