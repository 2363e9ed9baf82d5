"""Dense rank-<=4 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``backward`` walks the recorded graph in reverse
topological order and accumulates gradients additively, so a tensor feeding
several consumers receives the sum of their contributions.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "mul",
    "split_channels",
    "concat_channels",
    "conv_depthwise",
    "conv_pointwise",
    "group_norm",
    "batch_norm",
    "gelu",
    "sigmoid",
    "softmax_channels",
    "bilinear_interpolate",
    "interpolation_matrix",
    "cross_entropy_with_logits",
    "bce_with_logits",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic: same-shape tensors or python scalars only
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, _affine(other, -1.0, 0.0))
        return _affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return _affine(self, -1.0, float(other))

    def __neg__(self):
        return _affine(self, -1.0, 0.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return _affine(self, 1.0 / float(other), 0.0)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return total(self) * (1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated (added
    to any existing value). Returns a mapping leaf -> gradient contributed by
    this call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    store: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            store[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return store


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)
    out = a.data / b.data
    return _record(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def _affine(x: Tensor, scale: float, shift: float) -> Tensor:
    return _record(x.data * scale + shift, (x,), lambda g: (g * scale,))


def total(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using the error function."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
    return _record(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of a (B, K, H, W) tensor."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (x,), back)


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of (B, K, H, W) logits against (B, H, W) labels."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    onehot = _one_hot(labels, logits.shape[1], logits.dtype)
    n = labels.size
    loss = -(onehot * logp).sum() / n

    def back(g):
        return (g * (np.exp(logp) - onehot) / n,)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed stably from logits."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype).reshape(z.shape)
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def back(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (p - t) / n,)

    return _record(np.asarray(loss, dtype=z.dtype), (logits,), back)


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], k) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1.0, axis=1)
    return out


# channel plumbing ------------------------------------------------------------


def _channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    src = x.shape

    def back(g):
        full = np.zeros(src, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop].copy(), (x,), back)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    channels = x.shape[1]
    if parts < 1 or channels % parts:
        raise ShapeError(f"cannot split {channels} channels into {parts} equal parts")
    step = channels // parts
    if parts == 1:
        return [x]
    return [_channel_slice(x, i * step, (i + 1) * step) for i in range(parts)]


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _record(np.concatenate([t.data for t in xs], axis=1), xs, back)


# convolutions ----------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, Iterable):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_depthwise(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
    bias: Tensor | None = None,
) -> Tensor:
    """Per-channel 2D cross-correlation with zero padding.

    ``kernel`` has shape (C, kh, kw); a (C, 1, 3) or (C, 3, 1) kernel gives a
    1D convolution along width or height.
    """
    if x.ndim != 4 or kernel.ndim != 3:
        raise ShapeError(f"conv_depthwise expects (B,C,H,W) and (C,kh,kw), got {x.shape}, {kernel.shape}")
    b, c, h, w = x.shape
    if kernel.shape[0] != c:
        raise ShapeError(f"conv_depthwise: input has {c} channels, kernel has {kernel.shape[0]}")
    _, kh, kw = kernel.shape
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_depthwise: empty output for input {x.shape}, kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    k = kernel.data
    out = np.zeros((b, c, oh, ow), dtype=np.result_type(x.data, k))
    hs = stride * (oh - 1) + 1
    ws = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + hs:stride, j:j + ws:stride] * k[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.empty_like(k) if kernel.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gxp is not None:
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += g * k[None, :, i, j, None, None]
                if gk is not None:
                    gk[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + hs:stride, j:j + ws:stride])
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, back)


def conv_pointwise(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: ``kernel`` is (C_out, C_in), ``bias`` is (C_out,)."""
    if x.ndim != 4 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv_pointwise: kernel {kernel.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv_pointwise: bias {bias.shape} does not match kernel {kernel.shape}")
    b, c, h, w = x.shape
    xf = x.data.reshape(b, c, h * w)
    out = np.matmul(kernel.data, xf)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, kernel.shape[0], h, w)

    def back(g):
        gf = g.reshape(b, kernel.shape[0], h * w)
        gx = np.matmul(kernel.data.T, gf).reshape(x.shape) if x.requires_grad else None
        gk = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0) if kernel.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, back)


# normalization ---------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = x.data.reshape(b, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxh = (g * gamma.data[None, :, None, None]).reshape(b, groups, m)
        xh = xhat.reshape(b, groups, m)
        gx = inv * (gxh - gxh.mean(axis=2, keepdims=True) - xh * (gxh * xh).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape), ggamma, gbeta)

    return _record(out, (x, gamma, beta), back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, PyTorch convention).
    """
    shape = (1, -1, 1, 1)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxh = g * gamma.data.reshape(shape)
        if training:
            gx = inv.reshape(shape) * (
                gxh
                - gxh.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxh * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxh * inv.reshape(shape)
        return (gx, ggamma, gbeta)

    return _record(out, (x, gamma, beta), back)


# resampling ------------------------------------------------------------------


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation extents must be >= 1, got {n_in} -> {n_out}")
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    a[rows, lo] = 1.0 - frac
    a[rows, lo + 1] += frac
    return a


def bilinear_interpolate(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with align-corners bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_interpolate: target extent must be positive, got ({out_h}, {out_w})")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = interpolation_matrix(h, out_h, x.dtype)
    aw = interpolation_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return _record(out, (x,), lambda g: (ah.T @ g @ aw,))
