"""Training-free anomaly synthesis on a toy pixel-space diffusion denoiser."""

__version__ = "0.1.0"

from .attention_edit import (EditPolicy, MaskPyramid, dae_cross, downsample_mask,
                             edit_decision, pca_attention, triag_attention)
from .denoiser import DenoiserConfig, PromptEmbedding, UNetDenoiser, Vocabulary
from .numerics import Tape, Tensor, backward
from .schedule import NoiseSchedule, SchedulerConfig, cfg_predict, ddim_invert, ddim_sample

__all__ = [
    "DenoiserConfig", "EditPolicy", "MaskPyramid", "NoiseSchedule",
    "PromptEmbedding", "SchedulerConfig", "Tape", "Tensor", "UNetDenoiser",
    "Vocabulary", "backward", "cfg_predict", "dae_cross", "ddim_invert",
    "ddim_sample", "downsample_mask", "edit_decision", "pca_attention",
    "triag_attention",
]
