"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and a vector-Jacobian product, so any
scalar built from Tensor ops can be differentiated with ``backward``.
Values are checked for NaN/Inf after every primitive; a non-finite result
raises ``NumericsError`` instead of propagating silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericsError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


def _check_finite(arr: Array, op: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by '{op}'")
    return arr


class Tensor:
    """Immutable dense array node in the autodiff graph.

    Leaf tensors are created from raw values; interior nodes remember their
    parents and a ``vjp`` callback mapping the output gradient to per-parent
    gradients. ``data`` must never be mutated after construction.
    """

    __slots__ = ("data", "_parents", "_vjp")

    def __init__(self, values, _parents: tuple = (), _vjp: Callable | None = None,
                 _op: str = "tensor"):
        self.data = _check_finite(_as_array(values), _op)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- arithmetic ---------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    reduce_axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if reduce_axes:
        grad = grad.sum(axis=reduce_axes, keepdims=True)
    return grad


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


def _binary(a, b, op: str, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    out_data = fwd(a.data, b.data)

    def vjp(grad: Array):
        return (_unbroadcast(vjp_a(grad, a.data, b.data), a.shape),
                _unbroadcast(vjp_b(grad, a.data, b.data), b.shape))

    return Tensor(out_data, (a, b), vjp, op)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def _quiet_div(x, y):
    # non-finite results raise NumericsError; keep numpy's warning quiet
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / y


def div(a, b) -> Tensor:
    return _binary(a, b, "div", _quiet_div,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b) -> Tensor:
    """Batched matrix product: ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    if not _broadcastable(a.shape[:-2], b.shape[:-2]):
        raise DimensionError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def vjp(grad: Array):
        ga = _unbroadcast(grad @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ grad, b.shape)
        return ga, gb

    return Tensor(out_data, (a, b), vjp, "matmul")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(grad: Array):
        return (grad.transpose(inv),)

    return Tensor(x.data.transpose(axes), (x,), vjp, "transpose")


def moveaxis(x, src: int, dst: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes.insert(dst % x.ndim, axes.pop(src % x.ndim))
    return transpose(x, axes)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    old = x.shape

    def vjp(grad: Array):
        return (grad.reshape(old),)

    return Tensor(x.data.reshape(shape), (x,), vjp, "reshape")


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if not _broadcastable(x.shape, shape):
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}")
    old = x.shape

    def vjp(grad: Array):
        return (_unbroadcast(grad, old),)

    return Tensor(np.broadcast_to(x.data, shape).copy(), (x,), vjp, "broadcast_to")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    in_shape = x.shape

    def vjp(grad: Array):
        if axis is None:
            return (np.broadcast_to(grad, in_shape).copy(),)
        g = grad if keepdims else np.expand_dims(grad, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Tensor(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def mean_last_axis(x, keepdims: bool = True) -> Tensor:
    x = as_tensor(x)
    n = x.shape[-1]
    return tsum(x, axis=-1, keepdims=keepdims) * (1.0 / n)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(x.data)

    def vjp(grad: Array):
        return (grad * 0.5 / out_data,)

    return Tensor(out_data, (x,), vjp, "sqrt")


def absolute(x) -> Tensor:
    x = as_tensor(x)

    def vjp(grad: Array):
        return (grad * np.sign(x.data),)

    return Tensor(np.abs(x.data), (x,), vjp, "abs")


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay honest."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def vjp(grad: Array):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (grad * (cdf + x.data * pdf),)

    return Tensor(x.data * cdf, (x,), vjp, "gelu")


def softmax_last_axis(x) -> Tensor:
    """Numerically stable softmax over the last axis (max-subtraction)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_last_axis: empty last axis in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def vjp(grad: Array):
        inner = (grad * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (grad - inner),)

    return Tensor(out_data, (x,), vjp, "softmax")


def concat_last_axis(parts: Iterable) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_last_axis: need at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last_axis: leading shapes differ, {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(grad: Array):
        return tuple(np.split(grad, splits, axis=-1))

    return Tensor(np.concatenate([p.data for p in parts], axis=-1),
                  tuple(parts), vjp, "concat")


def slice_last_axis(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[-1]):
        raise DimensionError(
            f"slice_last_axis: [{start}:{stop}] out of range for width {x.shape[-1]}")
    in_shape = x.shape

    def vjp(grad: Array):
        full = np.zeros(in_shape)
        full[..., start:stop] = grad
        return (full,)

    return Tensor(x.data[..., start:stop].copy(), (x,), vjp, "slice")


def gather_rows(table, ids: Array) -> Tensor:
    """Embedding lookup: ``table[v, d]`` indexed by an integer array of ids.

    Output shape is ``ids.shape + (d,)``; the backward pass scatter-adds into
    the table so unused rows receive exactly zero gradient.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-d, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("gather_rows: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"gather_rows: id out of range [0, {table.shape[0]}) in lookup")
    n_rows = table.shape[0]

    def vjp(grad: Array):
        g = np.zeros((n_rows, table.shape[1]))
        np.add.at(g, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        return (g,)

    return Tensor(table.data[ids], (table,), vjp, "gather")


def mean_std_last_axis(x, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-slice mean and std over the last axis.

    Uses population (biased) variance; ``std = sqrt(var + eps)`` so it is
    strictly positive even on constant slices.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"mean_std_last_axis: empty last axis in {x.shape}")
    if eps <= 0:
        raise ContractError("mean_std_last_axis: eps must be > 0")
    mean = mean_last_axis(x)
    centered = x - mean
    var = mean_last_axis(centered * centered)
    std = sqrt(var + eps)
    return mean, std


# -- reverse pass ------------------------------------------------------------


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Array]:
    """Gradient of a scalar ``loss`` with respect to each named parameter.

    Parameters not reachable from ``loss`` get a zero gradient of matching
    shape. The returned record maps each name to exactly one array.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topo):
        grad = grads.get(id(node))
        if grad is None or node._vjp is None:
            continue
        for parent, pgrad in zip(node._parents, node._vjp(grad)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pgrad
            else:
                grads[key] = pgrad

    record: dict[str, Array] = {}
    for name, p in params.items():
        if name in record:
            raise ContractError(f"backward: duplicate parameter name '{name}'")
        g = grads.get(id(p))
        record[name] = np.zeros(p.shape) if g is None else np.asarray(g)
        if record[name].shape != p.shape:
            raise ContractError(
                f"backward: gradient shape {record[name].shape} != param "
                f"shape {p.shape} for '{name}'")
    return record


def finite_difference_gradient(fn: Callable[[Array], float], x0: Array,
                               step: float = 1e-5,
                               indices: Iterable[tuple] | None = None) -> Array:
    """Central finite differences of a scalar function, the gradient oracle.

    ``fn`` maps an array of ``x0``'s shape to a float. When ``indices`` is
    given, only those entries are probed (others stay zero).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    if indices is None:
        indices = np.ndindex(*x0.shape)
    for idx in indices:
        bumped = x0.copy()
        bumped[idx] = x0[idx] + step
        hi = fn(bumped)
        bumped[idx] = x0[idx] - step
        lo = fn(bumped)
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: Array, b: Array) -> float:
    """Max elementwise relative error with a unit floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
