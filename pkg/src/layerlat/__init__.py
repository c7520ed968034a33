"""Layered latent decomposition and fusion on a toy diffusion model."""

from .codec import decode, encode, mask_to_latent
from .ddim import invert, make_schedule, sample
from .denoiser import TINY_PRESET, TOY_PRESET, DenoiserConfig, ToyDenoiser, init_params, load_params, save_params
from .editing import Editor, LayerState, MoveVector, fuse_layers, move
from .pipeline import EditPlan, bind_task, metrics, parse_plan, plan_from_template, run

__version__ = "0.1.0"
