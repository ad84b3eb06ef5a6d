"""Small dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy arrays.  Every op records its parents and a closure that
maps the output gradient to parent gradients; :func:`backward` walks the
recorded graph in reverse topological order.  The op set is deliberately
fixed (what a tiny ViT, a Conv-BN-ReLU head and the training losses need),
which keeps gradient checks against :func:`finite_diff` exhaustive.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_GRAD_ENABLED = True


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


_BRANCH_LOG: Optional[List[np.ndarray]] = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every piecewise op evaluated inside the block.

    Yields a list that receives one boolean array per relu/abs/maximum/
    minimum/clip call.  Two evaluations with equal logs lie on the same
    smooth piece, which is what a finite-difference check needs.
    """
    global _BRANCH_LOG
    prev = _BRANCH_LOG
    _BRANCH_LOG = []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = prev


def _note_branch(*masks: np.ndarray) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.extend(np.array(m, dtype=bool) for m in masks)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    _note_branch(ad >= 0)
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def maximum(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    _note_branch(pick_a)

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0), ad.shape), _unbroadcast(np.where(pick_a, 0, g), bd.shape)

    return _make(np.where(pick_a, ad, bd), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    _note_branch(pick_a)

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0), ad.shape), _unbroadcast(np.where(pick_a, 0, g), bd.shape)

    return _make(np.where(pick_a, ad, bd), (a, b), bw, "minimum")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    _note_branch(ad < lo, ad > hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    ad = a.data
    _note_branch(ad > 0)
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(ad.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ----------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # stacked rows times one weight matrix: fold leading axes into a single gemm
        k, n = bd.shape
        rows = ad.reshape(-1, k)

        def bw_flat(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = rows.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((rows @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), bw_flat, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dt = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, slice)) for p in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dt)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[i] for i in ax]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def sq_norm(a: Tensor) -> Tensor:
    """Sum of squares of all entries."""
    ad = a.data
    return _make(np.asarray((ad * ad).sum()), (a,), lambda g: (2.0 * g * ad,), "sq_norm")


# ----------------------------------------------------------------------------
# normalization and convolution


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    if xd.shape[-1] < 2:
        raise ValueError("layernorm needs a last dim of at least 2")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = _unbroadcast(g * xhat, gd.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layernorm")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of N×C×H×W input with a C'×C×k×k kernel, same padding.

    k must be odd; zero padding of (k-1)/2 keeps the spatial size.
    """
    xd, wd = x.data, kernel.data
    if xd.ndim == 3:
        return reshape(conv2d(reshape(x, (1,) + xd.shape), kernel, bias), (wd.shape[0],) + xd.shape[1:])
    n, c, h, w = xd.shape
    co, ci, kh, kw = wd.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("conv2d needs an odd square kernel")
    pad = kh // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    offsets = [(dy, dx) for dy in range(kh) for dx in range(kw)]
    # im2col: n × (c·k·k) × (h·w), channel-major to match kernel.reshape(co, -1)
    cols = np.stack([xp[:, :, dy : dy + h, dx : dx + w] for dy, dx in offsets], axis=2).reshape(n, c * kh * kw, h * w)
    wmat = wd.reshape(co, c * kh * kw)
    out = (wmat @ cols).reshape(n, co, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)

    def bw(g):
        gm = g.reshape(n, co, h * w)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gcols = (wmat.T @ gm).reshape(n, c, kh * kw, h, w)
        gxp = np.zeros_like(xp)
        for j, (dy, dx) in enumerate(offsets):
            gxp[:, :, dy : dy + h, dx : dx + w] += gcols[:, :, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        self.momentum = momentum
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches = 0


def batchnorm(
    x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState, training: bool, eps: float = 1e-5
) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ValueError("batchnorm expects N×C×H×W input")
    n, c, h, w = xd.shape
    shape = (1, c, 1, 1)
    gd = gain.data.reshape(shape)
    if training:
        count = n * h * w
        if count < 2:
            raise ValueError("train-mode batchnorm needs N*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu.reshape(c)).astype(state.running_mean.dtype)
        unbiased = var.reshape(c) * count / (count - 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
        state.num_batches += 1

        def bw(g):
            gx_hat = g * gd
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        if state.num_batches == 0:
            raise RuntimeError("batchnorm eval mode used before any train-mode update")
        inv = 1.0 / np.sqrt(state.running_var.reshape(shape) + eps)
        xhat = (xd - state.running_mean.reshape(shape)) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * gd + bias.data.reshape(shape)).astype(xd.dtype)
    return _make(out, (x, gain, bias), bw, "batchnorm")


# ----------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` with every input before its consumers."""
    order: List[Tensor] = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def reachable_parameters(root: Tensor) -> List[Tensor]:
    """Leaf tensors with ``requires_grad`` that feed into ``root``."""
    return [n for n in topological_order(root) if n.requires_grad and n._backward is None]


def backward(loss: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Leaf tensors receive ``.grad``.  When ``params`` is given, returns a dict
    of gradients keyed by parameter name, with zeros for parameters the loss
    does not depend on.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    order = topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# verification oracle


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4, coords=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``coords`` restricts evaluation to a subset of flat indices; the other
    entries of the returned array are NaN.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"objective is not finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
