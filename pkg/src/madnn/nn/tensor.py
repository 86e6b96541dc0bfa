"""Reverse-mode automatic differentiation on numpy arrays.

Each :class:`Tensor` records the tensors it was computed from and a closure that
pushes an upstream gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order. Complex quantities are never stored here; callers
carry real and imaginary parts as separate real tensors.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True
_SURROGATE_FORWARD = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def surrogate_forward():
    """Make straight-through ops evaluate their smooth surrogate in the forward pass.

    Used by gradient checking: finite differences of the surrogate forward are
    comparable with the surrogate backward.
    """
    global _SURROGATE_FORWARD
    prev = _SURROGATE_FORWARD
    _SURROGATE_FORWARD = True
    try:
        yield
    finally:
        _SURROGATE_FORWARD = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior node; free its gradient once consumed
                    node.grad = None
        return self

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _make(data, parents, backward, op):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(g)
        b._accum(g)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        a._accum(g)
        b._accum(-g)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * out / b.data)
    return _make(out, (a, b), bw, "div")


def power(a, exponent: float):
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        a._accum(g * exponent * a.data ** (exponent - 1))
    return _make(out, (a,), bw, "pow")


def square(a):
    a = as_tensor(a)

    def bw(g):
        a._accum(2.0 * g * a.data)
    return _make(a.data * a.data, (a,), bw, "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: a._accum(g / a.data), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: a._accum(g * 0.5 / out), "sqrt")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: a._accum(g * pos), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = _sigm(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)), "sigmoid")


def _sigm(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))
    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.data.shape)), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)
    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(part)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, np.expand_dims(t.data, axis).shape) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: a._accum(g), "broadcast")


def matmul(a, b):
    """Batched matrix product with numpy semantics (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- fused layers -----------------------------------------------------------

def affine(x, weight, bias=None):
    """``y = x @ W + b`` with W of shape (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(logits, tau: float = 1.0, axis: int = -1):
    """Temperature softmax ``exp(a/tau) / sum exp(a/tau)`` with max subtraction."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    z = logits.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        logits._accum(p * (g - dot) / tau)
    return _make(p, (logits,), bw, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        n = x.data.shape[-1]
        x._accum(inv / n * (n * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True)))
    normed = _make(xhat, (x,), bw, "layer_norm")
    return add(mul(normed, gamma), beta)


def batch_norm_train(x, axes: tuple, eps: float):
    """Standardize ``x`` with statistics over ``axes``; returns (xhat tensor, mean, var)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.data.size // mu.size

    def bw(g):
        gs = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        x._accum(inv / n * (n * g - gs - xhat * gx))
    return _make(xhat, (x,), bw, "batch_norm"), mu, var


def conv1d(x, weight, bias=None, padding: int = 1):
    """Cross-correlation of x (batch, C_in, L) with weight (C_out, C_in, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    c_out, c_in, k = weight.shape
    if x.ndim != 3 or x.shape[1] != c_in:
        raise ValueError(f"conv1d expects input (batch, {c_in}, L), got {x.shape}")
    if k < 1 or padding < 0 or padding > k - 1:
        raise ValueError(f"unsupported kernel/padding pair ({k}, {padding})")
    nb, _, length = x.shape
    l_out = length + 2 * padding - k + 1
    if l_out < 1:
        raise ValueError("input too short for kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # cols: (batch, L_out, C_in * k)
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (b, C_in, L_out, k)
    cols = cols.transpose(0, 2, 1, 3).reshape(nb, l_out, c_in * k)
    wmat = weight.data.reshape(c_out, c_in * k).T
    out = (cols @ wmat).transpose(0, 2, 1)

    def bw(g):
        gt = g.transpose(0, 2, 1)  # (b, L_out, C_out)
        if weight.requires_grad:
            gw = np.einsum("blc,bld->cd", gt, cols)
            weight._accum(gw.reshape(c_out, c_in, k))
        if x.requires_grad:
            dcols = (gt @ wmat.T).reshape(nb, l_out, c_in, k)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + l_out] += dcols[:, :, :, j].transpose(0, 2, 1)
            x._accum(dxp[:, :, padding:padding + length])
    y = _make(out, (x, weight), bw, "conv1d")
    if bias is not None:
        y = add(y, reshape(bias, (1, c_out, 1)))
    return y


# -- straight-through operators --------------------------------------------

def sign_ste(u, omega: float):
    """Hard sign forward (sgn(0) = +1); backward uses d/du [2 sigm(omega u) - 1]."""
    if omega <= 0:
        raise ValueError("annealing factor must be positive")
    u = as_tensor(u)
    s = _sigm(omega * u.data)
    if _SURROGATE_FORWARD:
        out = 2.0 * s - 1.0
    else:
        out = np.where(u.data >= 0, 1.0, -1.0).astype(u.data.dtype)

    def bw(g):
        u._accum(g * 2.0 * omega * s * (1.0 - s))
    return _make(out, (u,), bw, "sign_ste")


def straight_through(soft, hard: np.ndarray):
    """Forward ``hard`` exactly; backward passes the gradient to ``soft`` unchanged.

    Equivalent to ``soft + stopgrad(hard - soft)`` without the round-off of the
    explicit sum.
    """
    soft = as_tensor(soft)
    out = soft.data.copy() if _SURROGATE_FORWARD else np.asarray(hard, dtype=soft.data.dtype)
    return _make(out, (soft,), lambda g: soft._accum(g), "straight_through")


def top_n_mask(p: np.ndarray, n: int) -> np.ndarray:
    """0/1 mask over the last axis with ones at the ``n`` largest entries (ties -> lowest index)."""
    p = np.asarray(p)
    g = p.shape[-1]
    if n > g or n < 0:
        raise ValueError(f"cannot select {n} of {g} entries")
    idx = np.argsort(-p, axis=-1, kind="stable")[..., :n]
    m = np.zeros_like(p, dtype=np.float64)
    np.put_along_axis(m, idx, 1.0, axis=-1)
    return m


def topn_mask_ste(p, n: int):
    """Top-N hard mask forward, identity gradient to ``p``."""
    p = as_tensor(p)
    return straight_through(p, top_n_mask(p.data, n))


def stop_gradient(a):
    return as_tensor(a).detach()
