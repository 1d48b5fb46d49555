"""Training-free style transfer for toy diffusion models: a dual-stream U-Net
sampler with frequency-domain feature modulation, plus the data, training,
metrics and command-line plumbing around it."""
from .errors import (ChecksumError, ConfigError, DimensionError, FreeStyleError, NumericError, PlanError,
                     RequestError, StorageError)
from .estimators import DiffusionBackbone, FreeStyleTransformer, StyleClassifier
from .pipeline import StylizeRequest, ablate, ablate_content_noise, stylize, stylize_naive
from .schedule import NoiseSchedule, make_linear_schedule, make_timestep_plan
from .spectral import ModulationConfig
from .unet import NULL, StyleCondition, UNetConfig, UNetParams, init_params, predict_eps, predict_eps_dual

__version__ = "0.1.0"

__all__ = [
    "ChecksumError", "ConfigError", "DimensionError", "FreeStyleError", "NumericError", "PlanError", "RequestError",
    "StorageError", "DiffusionBackbone", "FreeStyleTransformer", "StyleClassifier", "StylizeRequest", "ablate",
    "ablate_content_noise", "stylize", "stylize_naive", "NoiseSchedule", "make_linear_schedule",
    "make_timestep_plan", "ModulationConfig", "NULL", "StyleCondition", "UNetConfig", "UNetParams", "init_params",
    "predict_eps", "predict_eps_dual",
]
