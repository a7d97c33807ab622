"""Desk-scale patch-level preference alignment for a toy latent-video diffusion model."""

from .config import RunConfig, load_config
from .diffusion import Denoiser, DenoiserArch, make_schedule
from .grandpo import DpoConfig, gran_dpo_loss
from .patches import GridSpec, make_grid
from .rng import SeededRng

__all__ = [
    "Denoiser",
    "DenoiserArch",
    "DpoConfig",
    "GridSpec",
    "RunConfig",
    "SeededRng",
    "gran_dpo_loss",
    "load_config",
    "make_grid",
    "make_schedule",
]
__version__ = "0.1.0"
