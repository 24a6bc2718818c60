"""Metadata-guided sRGB-to-RAW de-rendering with state-space sequence models."""

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DivergenceError,
    EvaluationError,
    LoadError,
    ParameterError,
    RawMambaError,
)
from .metrics import LossConfig, loss, psnr, ssim
from .model import ModelConfig, RawMamba
from .ume import MetadataPair

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "EvaluationError",
    "LoadError",
    "LossConfig",
    "MetadataPair",
    "ModelConfig",
    "ParameterError",
    "RawMamba",
    "RawMambaError",
    "loss",
    "psnr",
    "ssim",
]
