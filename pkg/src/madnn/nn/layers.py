"""Parameterized layers built on :mod:`madnn.nn.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


class Module:
    """Container with ordered parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray):
        *path, name = dotted.split(".")
        mod = self
        for part in path:
            mod = mod._children[part]
        getattr(mod, name)[...] = value

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i):
        return self._children[str(i)]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(_uniform(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(_uniform(rng, n_in, (n_out,))) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        return T.affine(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, padding: int = 1):
        super().__init__()
        if padding > kernel - 1:
            raise ValueError(f"unsupported kernel/padding pair ({kernel}, {padding})")
        self.padding = padding
        self.weight = Parameter(_uniform(rng, c_in * kernel, (c_out, c_in, kernel)))
        self.bias = Parameter(_uniform(rng, c_in * kernel, (c_out,)))

    def forward(self, x):
        return T.conv1d(x, self.weight, self.bias, self.padding)


class BatchNorm(Module):
    """Batch normalization over all axes except ``feature_axis``.

    Works for (batch, features) and (batch, channels, length) inputs.
    """

    def __init__(self, num_features: int, feature_axis: int = -1, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.feature_axis = feature_axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def _view(self, ndim):
        shape = [1] * ndim
        shape[self.feature_axis] = self.num_features
        return tuple(shape)

    def forward(self, x):
        x = T.as_tensor(x)
        view = self._view(x.ndim)
        axes = tuple(i for i in range(x.ndim) if i != self.feature_axis % x.ndim)
        if self.training:
            count = x.data.size // self.num_features
            if count < 2:
                raise ValueError("batch normalization in training mode needs more than one value per feature")
            xhat, mu, var = T.batch_norm_train(x, axes, self.eps)
            unbiased = var.reshape(-1) * count / (count - 1)
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu.reshape(-1)
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * unbiased
        else:
            mu = self.running_mean.reshape(view)
            inv = 1.0 / np.sqrt(self.running_var.reshape(view) + self.eps)
            xhat = (x - mu) * inv
        return xhat * T.reshape(self.gamma, view) + T.reshape(self.beta, view)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def forward(self, x):
        b, s, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_head))
        attn = T.softmax(scores, 1.0, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return self.out(ctx)


class EncoderLayer(Module):
    """Post-norm self-attention block: attention and ReLU feed-forward, each with residual + LayerNorm."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff2(T.relu(self.ff1(x))))


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
