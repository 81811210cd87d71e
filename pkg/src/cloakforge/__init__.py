"""cloakforge: adversarial cloaking of subject images against diffusion-model personalization."""

from .diffusion import NoiseSchedule, ancestral_sample, forward_noise, loss_cond, loss_uncond, make_linear_schedule
from .kernels import get_backend, set_backend
from .model import Checkpoint, CondUNet, PromptSpec, clone, denoise_predict, embed_prompt, restore, snapshot

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "forward_noise",
    "loss_uncond",
    "loss_cond",
    "ancestral_sample",
    "CondUNet",
    "PromptSpec",
    "Checkpoint",
    "snapshot",
    "restore",
    "clone",
    "embed_prompt",
    "denoise_predict",
    "get_backend",
    "set_backend",
    "__version__",
]
