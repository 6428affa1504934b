"""Decoder-only patch forecaster with sparse mixture-of-experts and a point-quantile loss."""
from .config import RunConfig, load_run_config, parse_run_config
from .inference import forecast, forecast_batch, forecast_multichannel
from .loss import LossWeights
from .model import FinCastModel, ModelConfig
from .trainer import TrainConfig, WindowDataset, train
from .weights import load_weights, save_weights

__all__ = [
    "FinCastModel", "ModelConfig", "RunConfig", "TrainConfig", "LossWeights", "WindowDataset",
    "train", "forecast", "forecast_batch", "forecast_multichannel", "load_weights",
    "save_weights", "load_run_config", "parse_run_config",
]
__version__ = "0.1.0"
