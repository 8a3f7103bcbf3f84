"""
cfachain
Noise estimation, spatio-temporal CFA denoising and demosaicking of image sequences
"""
from .cfa_io import BayerPattern, CfaImage, QuadImage, cfa_to_quad, mosaic, quad_to_cfa
from .config import PipelineConfig, load_config
from .demosaick import demosaick_sequence, directional_init, st_interpolate
from .denoiser import denoise_frame, denoise_sequence
from .errors import ChainError
from .flow import FlowField, tvl1_flow, warp
from .harness import evaluate, simulate
from .imgseq import Image, Sequence
from .noise_model import NoiseModel, build_stabilizer, estimate_noise_curve, fit_piecewise_linear
from .orchestrator import ChainOrchestrator, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BayerPattern",
    "CfaImage",
    "ChainError",
    "ChainOrchestrator",
    "FlowField",
    "Image",
    "NoiseModel",
    "PipelineConfig",
    "QuadImage",
    "Sequence",
    "build_stabilizer",
    "cfa_to_quad",
    "demosaick_sequence",
    "denoise_frame",
    "denoise_sequence",
    "directional_init",
    "estimate_noise_curve",
    "evaluate",
    "fit_piecewise_linear",
    "load_config",
    "mosaic",
    "quad_to_cfa",
    "run_pipeline",
    "simulate",
    "st_interpolate",
    "tvl1_flow",
    "warp",
]
