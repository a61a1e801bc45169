"""Dense tensors with reverse-mode automatic differentiation.

Every operation records a node (inputs plus a backward rule) when any input
participates in gradient tracking. ``backward`` orders the reachable nodes
topologically and replays their rules once each, in reverse.

Data is stored as numpy arrays of the active default dtype (float32 unless a
``precision`` block says otherwise).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "tensor",
    "no_grad",
    "precision",
    "grad_enabled",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "square",
    "abs_",
    "clamp_min",
    "layer_norm",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "sum_",
    "mean",
    "l2_norm",
    "cosine_similarity",
    "conv2d",
    "bce_with_logits",
    "backward",
    "tape_of",
    "grad_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True
_DTYPE = np.float32


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable node recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    ``_parents`` and ``_backward`` are set only for tensors produced by a
    recorded operation; ``_backward(g)`` returns one gradient (or ``None``)
    per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _raise_item(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clamp_min(a, lo: float = 0.0) -> Tensor:
    """max(a, lo) elementwise; gradient passes where a > lo."""
    a = _as_tensor(a)
    mask = a.data > lo
    out = np.where(mask, a.data, np.asarray(lo, dtype=a.data.dtype))
    return _make(out, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5(1+th) + 0.5 x (1-th^2) c (1 + 3*0.044715 x^2)
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= x
        d *= 0.5 * _GELU_C
        d *= x2 * (3 * 0.044715) + 1.0
        d += 0.5
        d += 0.5 * th
        d *= g
        return (d,)

    return _make(out, (a,), bw)


# --------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """x[..., k] @ w[k, n] (+ b[n]) with a flattened 2-D weight gradient."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear shapes {x.shape} and {w.shape} are incompatible")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(*lead, wd.shape[1])
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out += b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def _check_axis(axis: int, ndim: int) -> None:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    parents = [x]
    gd = bd = None
    if gamma is not None:
        gamma = _as_tensor(gamma)
        gd = gamma.data
        out = xhat * gd
        parents.append(gamma)
    if beta is not None:
        beta = _as_tensor(beta)
        bd = beta.data
        out = out + bd
        parents.append(beta)

    def bw(g):
        grads = []
        gh = g * gd if gd is not None else g
        if x.requires_grad:
            gx = rstd / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                             - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            grads.append(gx)
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0) if beta.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, bw)


# --------------------------------------------------------------- shape plumbing
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, idx) -> Tensor:
    src_shape = a.shape
    dtype = a.data.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].ndim
    _check_axis(axis, ref)
    ax = axis % ref
    for t in ts[1:]:
        if t.ndim != ref or any(t.shape[i] != ts[0].shape[i] for i in range(ref) if i != ax):
            raise DimensionError(f"concat shapes {[x.shape for x in ts]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


# ------------------------------------------------------------------ reductions
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(g.dtype, copy=True),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def l2_norm(a, axis=None, eps: float = 0.0) -> Tensor:
    """Euclidean norm over ``axis`` (all entries when None)."""
    a = _as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    norm_k = np.sqrt(sq + eps)
    out = norm_k if axis is not None else norm_k.reshape(())
    if axis is not None:
        out = np.squeeze(norm_k, axis=axis)
    ad = a.data

    def bw(g):
        gk = g.reshape(norm_k.shape)
        safe = np.where(norm_k > 0, norm_k, 1.0)
        return (gk * ad / safe,)

    return _make(np.asarray(out), (a,), bw)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of the flattened trailing axes, one value per leading index.

    ``a`` and ``b`` of shape (B, ...) give a (B,) result; 1-D inputs give a scalar.
    The denominator is max(|a||b|, eps).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shapes {a.shape} and {b.shape} differ")
    if a.ndim <= 1:
        a2, b2 = a.data.reshape(1, -1), b.data.reshape(1, -1)
        scalar = True
    else:
        a2, b2 = a.data.reshape(a.shape[0], -1), b.data.reshape(b.shape[0], -1)
        scalar = False
    dot = (a2 * b2).sum(axis=1)
    na = np.sqrt((a2 * a2).sum(axis=1))
    nb = np.sqrt((b2 * b2).sum(axis=1))
    den = na * nb
    clipped = den <= eps
    den_c = np.where(clipped, eps, den)
    cos = dot / den_c

    def bw(g):
        g = np.asarray(g).reshape(-1, 1)
        inv = (1.0 / den_c)[:, None]
        na_s = np.where(na > 0, na, 1.0)[:, None]
        nb_s = np.where(nb > 0, nb, 1.0)[:, None]
        c = cos[:, None]
        keep = (~clipped)[:, None]
        ga = g * (b2 * inv - np.where(keep, c * a2 / (na_s * na_s), 0.0))
        gb = g * (a2 * inv - np.where(keep, c * b2 / (nb_s * nb_s), 0.0))
        return ga.reshape(a.shape), gb.reshape(b.shape)

    out = cos.reshape(()) if scalar else cos
    return _make(np.asarray(out), (a, b), bw)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits), in log-sum-exp form."""
    logits = _as_tensor(logits)
    z = logits.data
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=z.dtype).reshape(z.shape)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        return (g * (_np_sigmoid(z) - y) / n,)

    return _make(np.asarray(loss.mean()), (logits,), bw)


# --------------------------------------------------------------- convolution
def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Channel-last patches of x[B,H,W,C]: rows (B*Ho*Wo), columns ordered (kh, kw, C)."""
    B, H, W, C = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    sB, sH, sW, sC = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(B, Ho, Wo, kh, kw, C),
        strides=(sB, sH * stride, sW * stride, sH, sW, sC), writeable=False)
    return view.reshape(B * Ho * Wo, kh * kw * C), Ho, Wo


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[B,C,H,W] with kernel[F,C,kh,kw]."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {x.shape}")
    cols, Ho, Wo = _im2col(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), kh, kw, stride, padding)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(F, -1)  # (F, kh*kw*C)
    out = cols @ wmat.T
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    dtype = x.data.dtype

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, F)
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, C)
            gpad = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
            gx = gpad[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(np.ascontiguousarray(out), parents, bw)


# ----------------------------------------------------------------- backward
def tape_of(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, each once, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad.

    Leaf gradients add onto whatever is already stored, so repeated calls
    accumulate. Intermediate gradients are discarded once consumed.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.data.dtype)
    if not loss.requires_grad:
        return
    order = tape_of(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# --------------------------------------------------------------- grad check
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-3,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. The relative error of an entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Any NaN yields inf.
    ``max_entries`` checks a random subset of coordinates.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=_DTYPE, copy=True)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        return float("inf")
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_entries, replace=False)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[i])
            if not (np.isfinite(num) and np.isfinite(ana)):
                return float("inf")
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
