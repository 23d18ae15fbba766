from .backend import ACTIVE_BACKEND, BACKEND_ENV
from .layers import (Conv2d, GroupNorm, LeakyReLU, Linear, Module, Parameter,
                     ReLU, Sequential, SiLU, Tanh, Upsample2x, kaiming)
from .optim import Adam, SGD

__all__ = [
    "ACTIVE_BACKEND", "BACKEND_ENV", "Adam", "Conv2d", "GroupNorm",
    "LeakyReLU", "Linear", "Module", "Parameter", "ReLU", "SGD",
    "Sequential", "SiLU", "Tanh", "Upsample2x", "kaiming",
]
