from .adam import AdamState, adam_step
from .autodiff import Tensor, concat, no_grad, zero_grads
from .denoiser import DenoiserConfig, DenoiserModel, denoise
from .layers import Conv2d, Linear, conv2d, sinusoidal_embedding_table

__all__ = [
    "AdamState",
    "adam_step",
    "Tensor",
    "concat",
    "no_grad",
    "zero_grads",
    "DenoiserConfig",
    "DenoiserModel",
    "denoise",
    "Conv2d",
    "Linear",
    "conv2d",
    "sinusoidal_embedding_table",
]
