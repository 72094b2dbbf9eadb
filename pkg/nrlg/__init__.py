"""
nrlg - Noise-refined likelihood guidance for diffusion-based restoration

Restores images from linear measurements y = A x + noise with a pretrained
(or analytic) diffusion denoiser, refining the predicted noise with a
closed-form likelihood score instead of back-propagating through the model.
"""

__version__ = "1.0.0"

from .errors import NRLGError
from .schedule import DiffusionSchedule, TimestepPlan, linear_schedule, uniform_timestep_plan
from .linops import LinearOperator, OperatorDescriptor, build_operator
from .denoiser import AnalyticDenoiser, Denoiser, ExternalDenoiser, GaussianPrior
from .guidance import GuidanceConfig, guidance_step, likelihood_score, tweedie_x0
from .samplers import (
    RunSpec,
    SamplerKind,
    SamplingProgress,
    SamplingStage,
    Trajectory,
    dd_nrlg,
    ddim_uncond,
    ddpm_uncond,
    direct_adjust,
    dps_baseline,
    id_nrlg,
    sample,
)
from .forward import Measurement, degrade
from .metrics import psnr, ssim

__all__ = [
    "NRLGError",
    "DiffusionSchedule",
    "TimestepPlan",
    "linear_schedule",
    "uniform_timestep_plan",
    "LinearOperator",
    "OperatorDescriptor",
    "build_operator",
    "AnalyticDenoiser",
    "Denoiser",
    "ExternalDenoiser",
    "GaussianPrior",
    "GuidanceConfig",
    "guidance_step",
    "likelihood_score",
    "tweedie_x0",
    "RunSpec",
    "SamplerKind",
    "SamplingProgress",
    "SamplingStage",
    "Trajectory",
    "dd_nrlg",
    "ddim_uncond",
    "ddpm_uncond",
    "direct_adjust",
    "dps_baseline",
    "id_nrlg",
    "sample",
    "Measurement",
    "degrade",
    "psnr",
    "ssim",
]
