"""Coarse-to-fine precipitation nowcasting: a Vision-Mamba U-Net predictor refined by residual diffusion."""

from .coarse import CoarsePredictor, VmuConfig
from .config import RunConfig, load_config
from .core_types import FrameSequence, RadarSequence, SatelliteSequence, read_sequence, write_sequence
from .diffusion import Denoiser, DiffusionConfig, NoiseSchedule, ddim_sample, q_sample
from .errors import DataError, FormatError, NumericError, ShapeError, VmuError
from .kernels import BACKEND_NAME
from .metrics import MetricReport, csi, far, hss, spectral_sharpness, ssim
from .nn import ParamStore
from .synthetic import EpisodeParams, generate_episode, make_dataset, read_manifest
from .vmss import SS2D, VMSSBlock, selective_scan

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME", "CoarsePredictor", "DataError", "Denoiser", "DiffusionConfig", "EpisodeParams",
    "FormatError", "FrameSequence", "MetricReport", "NoiseSchedule", "NumericError", "ParamStore",
    "RadarSequence", "RunConfig", "SS2D", "SatelliteSequence", "ShapeError", "VMSSBlock", "VmuConfig",
    "VmuError", "csi", "ddim_sample", "far", "generate_episode", "hss", "load_config", "make_dataset",
    "q_sample", "read_manifest", "read_sequence", "selective_scan", "spectral_sharpness", "ssim",
    "write_sequence",
]
