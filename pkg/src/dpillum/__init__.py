"""Joint recovery of environment illumination and surface materials with a
diffusion prior over tonemapped panoramas."""

from . import kernels
from .diffusion import NoiseSchedule, ancestral_sample, forward_marginal, make_schedule, reverse_step
from .priors import CnnDenoiser, GaussianAnalyticModel, load_checkpoint, save_checkpoint, train_prior
from .render import MaterialMaps, RenderOptions, render, render_loss_and_grads
from .solver import SolverConfig, SolverError, dps_sample, init_stage, refine_stage, solve
from .tonemap import PRESETS, Tonemap

__version__ = "0.1.0"

__all__ = [
    "kernels", "NoiseSchedule", "make_schedule", "forward_marginal", "reverse_step", "ancestral_sample",
    "CnnDenoiser", "GaussianAnalyticModel", "load_checkpoint", "save_checkpoint", "train_prior",
    "MaterialMaps", "RenderOptions", "render", "render_loss_and_grads",
    "SolverConfig", "SolverError", "dps_sample", "init_stage", "refine_stage", "solve",
    "PRESETS", "Tonemap",
]
