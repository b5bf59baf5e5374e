"""Pyramid-Mamba anomaly detection on numpy: selective state-space scans, pyramidal
scanning, a CSS reconstruction decoder, anomaly maps and the standard metric suite."""

from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .metrics import MetricsReport, aupro, auroc, average_precision, f1max
from .pipeline import build_model, evaluate_model, load_checkpoint, train
from .tensor import ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "MetricsReport",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "aupro",
    "auroc",
    "average_precision",
    "build_model",
    "evaluate_model",
    "f1max",
    "load_checkpoint",
    "parse_config",
    "parse_config_text",
    "train",
]
