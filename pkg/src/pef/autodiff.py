"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation is a *primitive*: a function that computes its
output array eagerly and, when any input requires a gradient, attaches a
closure mapping the output gradient to input gradients. The graph is rebuilt
on every forward pass (define-by-run); :func:`backward` replays it in reverse
topological order.

Two precision modes are supported. Gradient checks and oracles run in
``float64``; training runs in ``float32`` for speed::

    with precision("float64"):
        x = Tensor(np.random.randn(3, 4), requires_grad=True)
        y = softmax(x, axis=-1)
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "UnknownPrimitive", "GradientError", "CheckReport",
    "PRIMITIVES", "primitive_forward", "backward", "topological_order",
    "finite_difference_check", "precision", "get_default_dtype",
    "set_default_dtype", "no_grad", "as_tensor",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat",
    "slice_", "softmax", "layer_norm", "gelu", "sigmoid", "exp", "sum_", "mean",
    "l2_normalize", "depthwise_conv2d", "lookup", "l1_distance",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Input shapes violate a primitive's contract (a caller bug)."""


class UnknownPrimitive(KeyError):
    pass


class GradientError(RuntimeError):
    pass


_state = threading.local()
_DEFAULT_DTYPE = np.dtype(np.float64)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", _DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str | None = None

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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(out: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = grad_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


PRIMITIVES: dict[str, Callable[..., Tensor]] = {}


def _primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn
    return register


def primitive_forward(op: str, inputs: Sequence, **params) -> Tensor:
    """Apply the primitive registered as ``op`` to ``inputs``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise UnknownPrimitive(op) from None
    if op == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


# --- elementwise and linear algebra -----------------------------------------

@_primitive("add")
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


@_primitive("sub")
def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


@_primitive("mul")
def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


@_primitive("scale")
def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


@_primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d inputs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn, "matmul")


@_primitive("transpose")
def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose needs a >= 2-d input")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"transpose: invalid permutation {axes} for {x.ndim}-d input")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


@_primitive("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


@_primitive("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = _check_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


@_primitive("slice")
def slice_(x: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not isinstance(item, (slice, int, np.integer, type(Ellipsis))):
            raise ShapeError("slice supports basic indexing only; use lookup for gathers")
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(np.array(out), (x,), grad_fn, "slice")


# --- nonlinearities and normalization ---------------------------------------

@_primitive("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


@_primitive("layer_norm")
def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), grad_fn, "layer_norm")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@_primitive("gelu")
def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return _make(out, (x,), grad_fn, "gelu")


@_primitive("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


@_primitive("exp")
def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


@_primitive("sum")
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "sum")


@_primitive("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1) if x.size else 1

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "mean")


@_primitive("l2_normalize")
def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """x / (||x|| + eps) along ``axis``."""
    axis = _check_axis(axis, x.ndim, "l2_normalize")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = norm + eps
    y = x.data / denom

    def grad_fn(g):
        safe = np.where(norm > 0, norm, 1.0)
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        return (g / denom - x.data * dot / (denom * denom * safe),)

    return _make(y, (x,), grad_fn, "l2_normalize")


# --- structured primitives --------------------------------------------------

@_primitive("depthwise_conv2d")
def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Per-channel 3x3 convolution, padding 1, channels-last ``(B, H, W, C)``."""
    if stride not in (1, 2):
        raise ShapeError(f"depthwise_conv2d supports stride 1 or 2, got {stride}")
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects (B, H, W, C), got {x.shape}")
    c = x.shape[-1]
    if w.shape != (3, 3, c):
        raise ShapeError(f"depthwise_conv2d kernel must be (3, 3, {c}), got {w.shape}")
    if b is not None and b.shape != (c,):
        raise ShapeError(f"depthwise_conv2d bias must be ({c},), got {b.shape}")
    _, h, wd, _ = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    out = np.zeros((x.shape[0], ho, wo, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + span_h:stride, j:j + span_w:stride, :] * w.data[i, j]
    if b is not None:
        out += b.data

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(3):
            for j in range(3):
                window = (slice(None), slice(i, i + span_h, stride),
                          slice(j, j + span_w, stride), slice(None))
                gxp[window] += g * w.data[i, j]
                gw[i, j] = (g * xp[window]).sum(axis=(0, 1, 2))
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, grad_fn, "depthwise_conv2d")


@_primitive("lookup")
def lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` along axis 0 (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim < 1:
        raise ShapeError("lookup table must be at least 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"lookup index out of range for table of {table.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), grad_fn, "lookup")


@_primitive("l1_distance")
def l1_distance(a: Tensor, b) -> Tensor:
    """Sum of absolute differences over the last axis."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)
    return _make(np.abs(diff).sum(axis=-1), (a, b),
                 lambda g: (g[..., None] * sign, -g[..., None] * sign), "l1_distance")


@_primitive("softmax_cross_entropy")
def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy of ``softmax(logits)`` against integer targets."""
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    n_cls = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise ShapeError("softmax_cross_entropy: target class out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None],
                          np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (g[..., None] * p,)

    return _make(out, (logits,), grad_fn, "softmax_cross_entropy")


# --- reverse pass -----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input before its output."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GradientError("root is not connected to any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- finite differences -----------------------------------------------------

@dataclass
class CheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_probes: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_probes} probes)")


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                            tolerance: float = 1e-4, max_probes: int | None = None,
                            rng: np.random.Generator | None = None,
                            name: str = "f") -> CheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    ``x`` is perturbed in place and restored. With ``max_probes`` only a random
    subset of coordinates is probed. The relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if x.dtype != np.float64:
        raise GradientError("finite-difference checks require float64 tensors")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise GradientError("finite_difference_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise GradientError("f is not finite at x")
    if out.requires_grad:
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    x.grad = None

    flat = x.data.reshape(-1)
    probes = np.arange(flat.size)
    if max_probes is not None and flat.size > max_probes:
        rng = rng or np.random.default_rng(0)
        probes = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
    worst = 0.0
    with no_grad():
        for i in probes:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientError(f"f is not finite at probe {i}")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return CheckReport(name, float(worst), tolerance, int(len(probes)))
