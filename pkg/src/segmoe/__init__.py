"""Segment-wise mixture-of-experts forecasting for long-horizon time series."""

from .config import ConfigError, ModelConfig, TrainConfig
from .data import Dataset, SynthSpec, chronological_split, load_csv, make_windows, synth_series
from .gradcheck import check_gradients
from .model import Forecaster, count_params
from .tensor import Tensor, no_grad
from .trainer import fit

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "Dataset",
    "SynthSpec",
    "chronological_split",
    "load_csv",
    "make_windows",
    "synth_series",
    "check_gradients",
    "Forecaster",
    "count_params",
    "Tensor",
    "no_grad",
    "fit",
]

__version__ = "0.1.0"
