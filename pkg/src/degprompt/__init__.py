"""Degradation-prompt triplet synthesis and interval estimation.

Submodules
----------
imaging      image arrays, PNG/JPEG I/O, keyed random streams
degradation  blur / resize / noise / JPEG operators and two-stage recipes
prompts      interval discretization and canonical prompt text
dataset      triplet generation, dataset builds and JSON-lines manifests
kernels      float64 matmul / softmax / cross-attention with gradients
estimator    cross-attention decoder, training and gradient checks
metrics      PSNR, SSIM, accuracy reports, severity monotonicity
captions     tag-conditioned instructions and the caption client
"""

from .degradation import (
    DegradationRecipe,
    DegradationStage,
    DegreeVector,
    apply_recipe,
    effective_degrees,
    sample_stage,
)
from .estimator import DecoderParams, DegradationPromptEstimator, TrainConfig, estimate, train
from .imaging import load_image, rng_for, save_image
from .prompts import RestorationPrompt, parse_prompt, serialize_prompt

__version__ = "0.1.0"

__all__ = [
    "DegradationRecipe",
    "DegradationStage",
    "DegreeVector",
    "apply_recipe",
    "effective_degrees",
    "sample_stage",
    "DecoderParams",
    "DegradationPromptEstimator",
    "TrainConfig",
    "estimate",
    "train",
    "load_image",
    "rng_for",
    "save_image",
    "RestorationPrompt",
    "parse_prompt",
    "serialize_prompt",
]
