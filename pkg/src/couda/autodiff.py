"""Minimal reverse-mode automatic differentiation over float64 arrays.

Operations record themselves on a global tape while gradient recording is
enabled.  ``backward`` walks the tape in reverse record order and returns a
gradient map keyed by leaf tensor.  Broadcasting is limited to
scalar-with-tensor so shape bugs surface as errors instead of silently
expanding.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional link into the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; every method maps onto a primitive below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of nodes; record order is a valid topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._vjp = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_tape = Tape()
_recording = True


def get_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def new_tape():
    """Open a fresh tape for one training step; cleared on exit."""
    global _tape
    previous = _tape
    _tape = Tape()
    try:
        yield _tape
    finally:
        _tape.clear()
        _tape = previous


@contextlib.contextmanager
def no_grad():
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _recording and any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
        _tape.record(out)
    else:
        out._parents = ()
        out._vjp = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    # t was a scalar broadcast against a larger tensor
    return np.full(t.shape, g.sum())


def _elementwise_out(a: Tensor, b: Tensor, value: np.ndarray) -> np.ndarray:
    # keep the larger operand's shape when a size-1 tensor meets a bigger one
    if _is_scalar(a) and not _is_scalar(b):
        return value.reshape(b.shape)
    if _is_scalar(b) and not _is_scalar(a):
        return value.reshape(a.shape)
    return value


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    av, bv = _scalar_view(a, b)
    out = _elementwise_out(a, b, av + bv)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("subtract", a, b)
    av, bv = _scalar_view(a, b)
    out = _elementwise_out(a, b, av - bv)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("multiply", a, b)
    av, bv = _scalar_view(a, b)
    out = _elementwise_out(a, b, av * bv)

    def vjp(g):
        return _unbroadcast(g * bv, a), _unbroadcast(g * av, b)

    return _make(out, (a, b), vjp, "multiply")


def _scalar_view(a: Tensor, b: Tensor):
    # size-1 arrays of any rank collapse to 0-d so numpy never broadcasts ranks
    av = a.data.reshape(()) if _is_scalar(a) and not _is_scalar(b) else a.data
    bv = b.data.reshape(()) if _is_scalar(b) and not _is_scalar(a) else b.data
    return av, bv


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # multiplying by the mask keeps NaN visible instead of clipping it to zero
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: expected 2-D input, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax")


def log(x, floor: float | None = LOG_FLOOR) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped (zero gradient there)."""
    x = as_tensor(x)
    if floor is None:
        v = x.data
        mask = np.ones_like(v)
    else:
        mask = (x.data >= floor).astype(np.float64)
        v = np.maximum(x.data, floor)
    return _make(np.log(v), (x,), lambda g: (g * mask / v,), "log")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    out = x.data**p

    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        return (g * p * x.data ** (p - 1.0),)

    return _make(out, (x,), vjp, "power")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    if axis is None:
        return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")
    out = x.data.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), vjp, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), vjp, "concat")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot map {x.shape} to {shape}")
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


class _Reverse:
    """Backward marker for gradient reversal: the scale is applied at the leaves."""

    __slots__ = ("scale",)

    def __init__(self, scale: float):
        self.scale = scale

    def __call__(self, g):
        return (self.scale * g,)


def grad_reverse(x, coeff: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-coeff``."""
    if not coeff > 0:
        raise ConfigError(f"grad_reverse: coeff must be positive, got {coeff}")
    x = as_tensor(x)
    return _make(x.data, (x,), _Reverse(-float(coeff)), "grad_reverse")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from every reachable leaf (plus any ``params`` given, which
    get zeros when unreachable) to its gradient.  ``.grad`` is set on the same
    leaves.  The tape is not consumed, so a second call yields the same map.

    Cotangents that crossed a gradient reversal travel in a separate stream
    keyed by the accumulated scale, and the scale is multiplied in once at the
    leaf.  A leaf reached only through a reversal therefore gets exactly
    ``scale * (gradient of the same graph without the reversal)``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    streams: dict[int, dict[float, np.ndarray]] = {id(loss): {1.0: np.ones(loss.shape)}}
    leaves: dict[int, Tensor] = {}

    def push(parent: Tensor, scale: float, pg) -> None:
        acc = streams.setdefault(id(parent), {})
        acc[scale] = acc[scale] + pg if scale in acc else pg
        if parent._vjp is None:
            leaves[id(parent)] = parent

    if not loss.requires_grad:
        pass
    elif loss._vjp is None:
        leaves[id(loss)] = loss
    else:
        for node in reversed(_tape.nodes):
            incoming = streams.pop(id(node), None)
            if incoming is None:
                continue
            parent = node._parents[0] if node._parents else None
            if isinstance(node._vjp, _Reverse):
                if parent.requires_grad:
                    for scale, g in incoming.items():
                        push(parent, scale * node._vjp.scale, g)
                continue
            for scale, g in incoming.items():
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is not None and parent.requires_grad:
                        push(parent, scale, pg)

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        total = None
        for scale, g in streams[key].items():
            term = g if scale == 1.0 else scale * g
            total = term if total is None else total + term
        result[leaf] = np.asarray(total, dtype=np.float64).reshape(leaf.shape)
    for p in params or ():
        if p not in result:
            result[p] = np.zeros(p.shape)
    for leaf, g in result.items():
        leaf.grad = g
    return result
