"""Gradient-guided diffusion with linear score models.

Closed-form score fits, look-ahead gradient guidance, an Euler-Maruyama
backward sampler with an exact Gaussian oracle, and the two generative
optimisation loops (guidance only, and guidance with bias fine-tuning).
"""

from __future__ import annotations

from .dataset import Dataset, GaussianDist, SubspaceBasis
from .guidance import BetaRule, GuidanceSpec
from .objective import DistNorm, Linear, QuadScalar
from .optimizer import OptConfig, run_alg1, run_alg2
from .sampler import SamplerConfig, backward_sample
from .schedule import NoiseSchedule
from .score import FrozenCov, FullLinear, MeanOnly, Subspace

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GaussianDist",
    "SubspaceBasis",
    "BetaRule",
    "GuidanceSpec",
    "DistNorm",
    "Linear",
    "QuadScalar",
    "OptConfig",
    "run_alg1",
    "run_alg2",
    "SamplerConfig",
    "backward_sample",
    "NoiseSchedule",
    "FrozenCov",
    "FullLinear",
    "MeanOnly",
    "Subspace",
]
