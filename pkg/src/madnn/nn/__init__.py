from . import tensor as F
from .checkpoint import load_arrays, load_module_state, module_state, save_arrays
from .gradcheck import GradCheckReport, grad_check
from .layers import (BatchNorm, Conv1d, EncoderLayer, LayerNorm, Linear, Module, ModuleList,
                     MultiHeadAttention, Parameter, sinusoidal_encoding)
from .optim import Adam, NonFiniteGradient, adam_update
from .tensor import Tensor, no_grad

__all__ = [
    "F", "Tensor", "Parameter", "Module", "ModuleList", "Linear", "Conv1d", "BatchNorm", "LayerNorm",
    "MultiHeadAttention", "EncoderLayer", "sinusoidal_encoding", "Adam", "adam_update",
    "NonFiniteGradient", "grad_check", "GradCheckReport", "no_grad", "save_arrays", "load_arrays",
    "module_state", "load_module_state",
]
