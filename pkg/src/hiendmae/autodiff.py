"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive below computes its
forward value eagerly and, when any input requires a gradient, records a
closure that maps the output cotangent to the input cotangents. ``backward``
walks the recorded graph in reverse topological order.

Floating point width is a process-wide switch: 32-bit for training, 64-bit
for gradient checking (see :func:`precision`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from hiendmae.errors import NonFinite, NotScalar, ShapeMismatch

LN_EPS = 1e-6

_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_dtype() -> np.dtype:
    return _state["dtype"]


def set_precision(bits: int) -> None:
    if bits == 32:
        _state["dtype"] = np.dtype(np.float32)
    elif bits == 64:
        _state["dtype"] = np.dtype(np.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global float width."""
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference-only forward passes)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _dtype=None):
        arr = np.asarray(data, dtype=_dtype or get_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ("name", "no_decay")

    def __init__(self, data, name: str = "", no_decay: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.no_decay = no_decay

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    out = Tensor(data, _dtype=data.dtype)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    z = x.data / np.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(z))
    out = (x.data * cdf).astype(x.data.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x.data * pdf)).astype(x.data.dtype, copy=False),)

    return _node(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims {a.shape} vs {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, bw, "linear")


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose needs ndim >= 2, got {a.shape}")
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- normalisation


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeMismatch(f"softmax over empty last dim: {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis with population variance, then affine."""
    n = x.shape[-1]
    if n < 1 or gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------- indexing


def gather(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` (rows by default)."""
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeMismatch(f"gather: index out of range for axis of length {n}")

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(np.moveaxis(out, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _node(np.take(x.data, idx, axis=ax), (x,), bw, "gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    ax = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]} along {axis}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tensors, bw, "concat")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def masked_mse(pred: Tensor, target: Tensor, masked_idx) -> Tensor:
    """Mean squared error over the rows listed in ``masked_idx`` only.

    ``pred`` and ``target`` are (N, k); rows not in ``masked_idx`` neither
    contribute to the value nor receive gradient.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"masked_mse: pred {pred.shape} vs target {target.shape}")
    idx = np.asarray(masked_idx, dtype=np.int64)
    diff = pred.data[idx] - target.data[idx]
    count = diff.size
    value = np.asarray((diff * diff).sum() / count, dtype=pred.data.dtype)

    def bw(g):
        scale_ = 2.0 * g / count
        gp = np.zeros_like(pred.data)
        gp[idx] = diff * scale_
        gt = np.zeros_like(target.data)
        gt[idx] = -diff * scale_
        return gp, gt

    return _node(value, (pred, target), bw, "masked_mse")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; interior gradients are
    recomputed each call.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            p.grad = np.array(gp, dtype=p.data.dtype) if p.grad is None else p.grad + gp
    for n in interior:
        if n is not loss:
            n.grad = None


# ---------------------------------------------------------------- gradient check


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
    coords_per_param: int | None = 8,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central differences in 64-bit mode.

    ``f`` must rebuild the graph from ``params`` on every call. Parameters
    are promoted to float64 for the duration and restored afterwards.
    Returns the max over sampled coordinates of
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = list(params)
    saved = [p.data for p in params]
    saved_grads = [p.grad for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision(64):
        try:
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            loss = f()
            if not np.isfinite(loss.data).all():
                raise NonFinite("loss is not finite at the base point")
            backward(loss)
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                n = flat.size
                if coords_per_param is None or coords_per_param >= n:
                    coords = np.arange(n)
                else:
                    coords = rng.choice(n, size=coords_per_param, replace=False)
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    fp = f().item()
                    flat[c] = orig - eps
                    fm = f().item()
                    flat[c] = orig
                    num = (fp - fm) / (2.0 * eps)
                    ana = float(a.reshape(-1)[c])
                    if not (np.isfinite(num) and np.isfinite(ana)):
                        raise NonFinite(f"non-finite gradient at {getattr(p, 'name', '?')}[{c}]")
                    rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                    worst = max(worst, rel)
        finally:
            for p, d, g in zip(params, saved, saved_grads):
                p.data = d
                p.grad = g
    return worst
