"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  The tape is rebuilt
on every forward pass.  All arrays are float64.

Leading batch axes are supported by the matmul/add/mul ops through numpy
broadcasting; gradients are summed back to the operand shapes.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "concat",
    "gumbel_noise",
    "gumbel_softmax_sample",
    "cross_entropy_rows",
    "entropy",
    "backward",
    "finite_difference_check",
    "LAYER_NORM_EPS",
    "PROB_FLOOR",
]

LAYER_NORM_EPS = 1e-5
# cross-entropy clamps target probabilities at this floor before the log
PROB_FLOOR = 1e-300


class ShapeError(ValueError):
    pass


class Tensor:
    """Node of the dynamic computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    need = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=need, _parents=parents if need else (), _backward=fn if need else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), fn, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def fn(g):
        a.grad += c * g

    return _node(a.data * c, (a,), fn, "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def fn(g):
        a.grad += g * on

    return _node(np.where(on, a.data, 0.0), (a,), fn, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # stable in both tails
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def fn(g):
        a.grad += g * out * (1.0 - out)

    return _node(out, (a,), fn, "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def fn(g):
        a.grad += g * out

    return _node(out, (a,), fn, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    out = np.log(a.data)

    def fn(g):
        a.grad += g / a.data

    return _node(out, (a,), fn, "log")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _node(out, (a, b), fn, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")

    def fn(g):
        a.grad += np.swapaxes(g, -1, -2)

    return _node(np.swapaxes(a.data, -1, -2).copy(), (a,), fn, "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def fn(g):
        a.grad += g.reshape(a.shape)

    return _node(out, (a,), fn, "reshape")


def sum(a, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.shape)

    return _node(np.asarray(out, dtype=np.float64), (a,), fn, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t.grad += piece

    return _node(out, tuple(ts), fn, "concat")


# ---------------------------------------------------------------------------
# normalisations


def softmax(a, temperature=None, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``a / temperature``.

    ``temperature`` may be a float or a scalar Tensor (trainable).  Entries
    where ``mask`` is False receive probability exactly zero; every row must
    keep at least one unmasked entry.
    """
    a = as_tensor(a)
    if temperature is not None:
        if isinstance(temperature, Tensor):
            if temperature.data.size != 1:
                raise ShapeError(f"softmax: temperature must be scalar, got shape {temperature.shape}")
            if float(temperature.data) <= 0:
                raise ValueError("softmax: temperature must be positive")
            a = mul(a, _reciprocal(temperature))
        else:
            if temperature <= 0:
                raise ValueError("softmax: temperature must be positive")
            a = scale(a, 1.0 / temperature)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError(f"softmax: mask shape {mask.shape} incompatible with {x.shape}") from None
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        a.grad += out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _node(out, (a,), fn, "softmax")


def _reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def fn(g):
        a.grad += -g * out * out

    return _node(out, (a,), fn, "reciprocal")


def layer_norm(a, gain, offset, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and offset."""
    a, gain, offset = as_tensor(a), as_tensor(gain), as_tensor(offset)
    n = a.shape[-1]
    if gain.shape != (n,) or offset.shape != (n,):
        raise ShapeError(f"layer_norm: gain/offset shapes {gain.shape}, {offset.shape} do not match features {n}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + offset.data

    def fn(g):
        if gain.requires_grad:
            gain.grad += (g * xhat).reshape(-1, n).sum(axis=0)
        if offset.requires_grad:
            offset.grad += g.reshape(-1, n).sum(axis=0)
        if a.requires_grad:
            gx = g * gain.data
            a.grad += inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    return _node(out, (a, gain, offset), fn, "layer_norm")


# ---------------------------------------------------------------------------
# losses and sampling


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log(u))`` with ``u`` strictly inside (0, 1)."""
    u = rng.random(shape)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(h, temperature: float, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> Tensor:
    """Relaxed categorical draw ``softmax((log h + g) / temperature)``.

    ``h`` holds one simplex vector per row of its last axis.  Pass ``noise``
    to freeze the Gumbel draws (finite-difference checks, limit tests).
    """
    h = as_tensor(h)
    if temperature <= 0:
        raise ValueError(f"gumbel_softmax_sample: temperature must be > 0, got {temperature}")
    if np.any(h.data <= 0):
        raise ValueError("gumbel_softmax_sample: h must be strictly positive")
    if np.any(np.abs(h.data.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("gumbel_softmax_sample: h must sum to 1")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax_sample: need rng or noise")
        noise = gumbel_noise(rng, h.shape)
    return softmax(add(log(h), noise), temperature=temperature)


def cross_entropy_rows(x_hat, x) -> Tensor:
    """Summed negative log-likelihood of one-hot rows ``x`` under ``x_hat``.

    Every row of ``x_hat`` (any leading axes) is a distribution over the last
    axis.  Target probabilities are clamped at ``PROB_FLOOR``; clamped
    entries pass no gradient.
    """
    x_hat = as_tensor(x_hat)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"cross_entropy_rows: shapes {x_hat.shape} and {x.shape} differ")
    p = (x_hat.data * x).sum(axis=-1)
    clamped = p < PROB_FLOOR
    pc = np.where(clamped, PROB_FLOOR, p)
    out = -np.log(pc).sum()

    def fn(g):
        coef = np.where(clamped, 0.0, -g / pc)
        x_hat.grad += coef[..., None] * x

    return _node(np.asarray(out), (x_hat,), fn, "cross_entropy_rows")


def entropy(h) -> Tensor:
    """Shannon entropy ``-sum h ln h`` summed over all rows, with 0 ln 0 = 0.

    The gradient at an exactly-zero entry is taken as 0.
    """
    h = as_tensor(h)
    p = h.data
    pos = p > 0
    lp = np.log(np.where(pos, p, 1.0))
    out = -(p * lp).sum()

    def fn(g):
        h.grad += np.where(pos, -g * (lp + 1.0), 0.0)

    return _node(np.asarray(out), (h,), fn, "entropy")


# ---------------------------------------------------------------------------
# graph traversal


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    Calling twice without zeroing grads accumulates: each call adds one
    full gradient on top of whatever ``grad`` already holds.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    previous = [n.grad for n in order]
    for n in order:
        n.grad = np.zeros_like(n.data)
    root.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for n, g in zip(order, previous):
        n.grad += g


def finite_difference_check(f: Callable[[Sequence[Tensor]], Tensor], point: Iterable[np.ndarray], step: float = 1e-5,
                            zero_tol: float = 0.0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` builds a scalar graph from leaf tensors; it must be deterministic.
    The relative error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-12)``.  Coordinates where both ``|a|`` and
    ``|c|`` are at most ``zero_tol`` count as agreeing: a gradient that is
    identically zero (a key bias under softmax, say) leaves only round-off
    in the difference quotient, and a ratio of two noise terms means nothing.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(f(leaves))
    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = leaves[k].grad
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f([Tensor(x) for x in arrays]).item()
            flat[i] = orig - step
            fm = f([Tensor(x) for x in arrays]).item()
            flat[i] = orig
            central = (fp - fm) / (2 * step)
            an = analytic.reshape(-1)[i]
            if abs(an) <= zero_tol and abs(central) <= zero_tol:
                continue
            err = abs(an - central) / (abs(an) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
