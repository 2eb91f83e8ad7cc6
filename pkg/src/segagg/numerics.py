"""Minimal reverse-mode autodiff over numpy float64 arrays.

Each differentiable op builds its output with :func:`_result`, passing a
closure that maps the output gradient to one gradient per parent (``None``
for parents that need none). :meth:`Tensor.backward` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes do not agree."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad and op == "leaf" else None
        )
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    # -- reverse mode -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any requires_grad tensor")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)), "mul",
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def leaky_relu(a: Tensor, slope: float = 0.3) -> Tensor:
    gate = np.where(a.data >= 0, 1.0, slope)
    return _result(a.data * gate, (a,), lambda g: (g * gate,), "leaky_relu")


# -- reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(a.data.mean(axis=axis), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of rank >= 2 and a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- layers ------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    w, xd = weight.data, x.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    out = xd @ w.T
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    return _result(out, parents, backward, "linear")


def conv_output_length(length: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, Cin, L]`` with ``kernel[Cout, Cin, k]``."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError("conv1d expects input [B, C, L] and kernel [Cout, Cin, k]")
    batch, cin, length = x.shape
    cout, kcin, k = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv1d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    lout = conv_output_length(length, k, stride, padding)
    if k > length + 2 * padding or lout < 1:
        raise DimensionError(f"conv1d: kernel {k} does not fit length {length} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # cols[b, c*k + j, t] = xp[b, c, t*stride + j]
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :lout]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(batch, cin * k, lout)
    wmat = kernel.data.reshape(cout, cin * k)
    out = wmat @ cols
    plen = xp.shape[2]

    def backward(g):
        gw = np.einsum("bot,bct->oc", g, cols, optimize=True).reshape(cout, cin, k)
        gcols = (wmat.T @ g).reshape(batch, cin, k, lout)
        gxp = np.zeros((batch, cin, plen), dtype=DTYPE)
        stop = (lout - 1) * stride + 1
        for j in range(k):
            gxp[:, :, j:j + stop:stride] += gcols[:, :, j]
        gx = gxp[:, :, padding:plen - padding] if padding else gxp
        return gx, gw

    return _result(out, (x, kernel), backward, "conv1d")


def maxpool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max over the last axis; gradient goes to the first maximum."""
    length = x.shape[-1]
    if window < 1 or length % window:
        raise DimensionError(f"maxpool1d: length {length} is not divisible by window {window}")
    grouped = x.data.reshape(*x.shape[:-1], length // window, window)
    arg = grouped.argmax(axis=-1)
    out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gg = np.zeros(grouped.shape, dtype=DTYPE)
        np.put_along_axis(gg, arg[..., None], g[..., None], axis=-1)
        return (gg.reshape(shape),)

    return _result(out, (x,), backward, "maxpool1d")


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean: Optional[np.ndarray] = None
        self.running_var: Optional[np.ndarray] = None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.running_mean is None:
            self.running_mean, self.running_var = mean.copy(), var.copy()
        else:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean
            self.running_var = m * self.running_var + (1.0 - m) * var


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = True,
) -> Tensor:
    """Per-channel normalization of ``x[B, C, L]``.

    Training mode normalizes with the (biased) batch statistics and folds them
    into ``state``; eval mode uses the running statistics.
    """
    if x.ndim != 3 or x.shape[1] != state.channels:
        raise DimensionError(f"batchnorm1d: expected [B, {state.channels}, L], got {x.shape}")
    eps = state.eps
    n = x.shape[0] * x.shape[2]
    if training:
        if n < 2:
            raise ValueError("batchnorm1d: training mode needs batch*length >= 2")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        state.update(mean, var)
    else:
        if state.running_mean is None:
            raise RuntimeError("batchnorm1d: eval mode before any running statistics were collected")
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm1d")


def gru_forward(
    x: Tensor,
    w_input: Tensor,
    w_hidden: Tensor,
    bias: Tensor,
    h0: Optional[Tensor] = None,
) -> Tensor:
    """Run a GRU over ``x[B, T, F]`` and return the last hidden state ``[B, H]``.

    ``w_input`` is ``[F, 3H]``, ``w_hidden`` is ``[H, 3H]`` and ``bias`` is
    ``[3H]``, each laid out as (update, reset, candidate). The reset gate
    scales the hidden state before its candidate projection:

        z = sig(x Wz + h Uz + bz);  r = sig(x Wr + h Ur + br)
        n = tanh(x Wn + (r*h) Un + bn);  h' = (1 - z) * n + z * h
    """
    batch, frames, _ = x.shape
    hidden = w_hidden.shape[0]
    if frames < 1:
        raise DimensionError("gru_forward: need at least one frame")
    if w_input.shape[1] != 3 * hidden or w_hidden.shape[1] != 3 * hidden or bias.shape != (3 * hidden,):
        raise DimensionError("gru_forward: inconsistent gate weight shapes")
    h = h0 if h0 is not None else Tensor(np.zeros((batch, hidden)))
    u_zr = w_hidden[:, : 2 * hidden]
    u_n = w_hidden[:, 2 * hidden:]
    projected = matmul(x, w_input) + bias  # [B, T, 3H]
    for t in range(frames):
        xt = projected[:, t, :]
        zr = sigmoid(xt[:, : 2 * hidden] + matmul(h, u_zr))
        z, r = zr[:, :hidden], zr[:, hidden:]
        n = tanh(xt[:, 2 * hidden:] + matmul(r * h, u_n))
        h = n + z * (h - n)
    return h


# -- losses and similarity ---------------------------------------------------

def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


def softmax(logits) -> np.ndarray:
    """Plain (non-differentiable) row softmax of an array or Tensor."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=DTYPE)
    z = np.exp(data - data.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cce(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of ``logits[B, classes]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"softmax_cce: {labels.shape} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"softmax_cce: labels must lie in [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / batch),)

    return _result(loss, (logits,), backward, "softmax_cce")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis (a scalar for 1-D inputs)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_similarity: zero-norm input (degenerate embedding)")
    dot = (a.data * b.data).sum(axis=-1)
    cos = dot / (na * nb)

    def backward(g):
        g = np.asarray(g)[..., None]
        c = cos[..., None]
        ga = g * (b.data / (na * nb)[..., None] - c * a.data / (na * na)[..., None])
        gb = g * (a.data / (na * nb)[..., None] - c * b.data / (nb * nb)[..., None])
        return ga, gb

    return _result(np.clip(cos, -1.0, 1.0), (a, b), backward, "cosine_similarity")


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
