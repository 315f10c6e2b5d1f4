"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every numeric value in the model lives in a :class:`Tensor` wrapping a
numpy float64 array. Operations record an implicit graph (child holds
references to its parents plus a vector-Jacobian closure) which
:func:`backward` walks in reverse topological order. Gradients
accumulate across backward calls, so optimizers must reset them between
steps.

Buffer allocations (values and gradient arrays alike) are reported to
any active :class:`AllocationMeter`, giving peak-memory numbers that are
deterministic functions of the computation, independent of the OS
allocator.
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


# ---------------------------------------------------------------------------
# allocation accounting

_METERS: list["AllocationMeter"] = []


class AllocationMeter:
    """Tracks live and peak bytes of tensor buffers created while active.

    Used as a context manager around a measured region. Buffers acquired
    inside the region release their bytes when garbage collected; after
    the region closes, late releases are ignored so `peak_bytes` remains
    the region's high-water mark.
    """

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self._open = False

    def __enter__(self) -> "AllocationMeter":
        self.live_bytes = 0
        self.peak_bytes = 0
        self._open = True
        _METERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _METERS.remove(self)
        self._open = False

    def acquire(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        if self._open:
            self.live_bytes -= nbytes


def _track_buffer(arr: np.ndarray) -> None:
    if not _METERS:
        return
    nbytes = arr.nbytes
    meters = list(_METERS)
    for m in meters:
        m.acquire(nbytes)
    weakref.finalize(arr, _release_buffer, meters, nbytes)


def _release_buffer(meters: list[AllocationMeter], nbytes: int) -> None:
    for m in meters:
        m.release(nbytes)


# ---------------------------------------------------------------------------
# autodiff state

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self) -> None:
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc) -> None:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


class Tensor:
    """A dense float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _vjp: Callable | None = None,
        _track: bool = True,
    ) -> None:
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        if _track:
            _track_buffer(arr)

    # -- introspection ------------------------------------------------------

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, or zeros if this tensor never entered a graph."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data, _track=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def mT(self) -> "Tensor":
        return transpose_last(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), _track=False)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents do not match for {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), vjp)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def tlog(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, (a,), vjp)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, 0.5*x*(1 + erf(x/sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.data.shape[axis] if isinstance(axis, int) else int(
        np.prod([a.data.shape[i] for i in axis])
    )

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.shape).copy(),)

    return _make(out, (a,), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(out, (a, b), vjp)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(out, (a, b), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, _coerce(lo)), _coerce(hi))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        return _unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)

    return _make(out, (a, b), vjp)


def transpose_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError("transpose_last needs at least 2 dimensions")
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    t = _make(out, (a,), vjp)
    return t


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), vjp)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup into a [K, d] table; gradients scatter-add per row."""
    idx = np.asarray(idx, dtype=np.intp)
    out = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (full,)

    return _make(out, (table,), vjp)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select one entry along the last axis per leading position."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(f"gather_last: index shape {idx.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# composite operations


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(a.data.max(axis=axis, keepdims=True), _track=False)
    z = sub(a, shift)
    return sub(z, tlog(tsum(texp(z), axis=axis, keepdims=True)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return texp(log_softmax(a, axis=axis))


def group_norm(
    x: Tensor,
    num_groups: int,
    weight: Tensor,
    bias: Tensor,
    eps: float = 1e-8,
) -> Tensor:
    """Zero-mean unit-variance normalization per token per group.

    The last axis is split into `num_groups` equal groups; statistics are
    computed within each group independently for every leading position.
    """
    channels = x.shape[-1]
    if channels % num_groups != 0:
        raise DimensionError(f"group_norm: {num_groups} groups do not divide {channels} channels")
    gshape = x.shape[:-1] + (num_groups, channels // num_groups)
    xg = reshape(x, gshape)
    mu = tmean(xg, axis=-1, keepdims=True)
    xc = sub(xg, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    y = mul(xc, power(add(var, _coerce(eps)), -0.5))
    y = reshape(y, x.shape)
    return add(mul(y, weight), bias)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-8) -> Tensor:
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    return mul(mul(x, power(add(ms, _coerce(eps)), -0.5)), weight)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    return add(mul(mul(xc, power(add(var, _coerce(eps)), -0.5)), weight), bias)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate gradients of everything `loss` depends on.

    Repeated calls without resetting gradients accumulate, matching the
    usual multi-backward contract.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            buf = np.zeros_like(node.data)
            _track_buffer(buf)
            node.grad = buf
        node.grad += g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = local.get(id(p))
            # first contribution may alias a vjp output (even a view), so
            # joins allocate rather than mutate in place
            local[id(p)] = pg if acc is None else acc + pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# constructors


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
