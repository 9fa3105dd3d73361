"""Reverse-mode differentiation over an explicit operation record.

Every operation executed through a :class:`Tape` appends an :class:`OpRecord`
(kind, input ids, output id, cached forward values).  ``Tape.backward`` walks
that record in reverse; ``Tape.replay`` re-executes it forward.  Arrays are
float64 numpy arrays and are frozen once recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "UnknownNodeError",
    "OpRecord",
    "Tape",
    "Tensor",
    "add",
    "add_bias",
    "column",
    "cross_entropy",
    "element",
    "finite_diff",
    "frobenius_norm",
    "matmul",
    "mean",
    "mul",
    "relu",
    "row",
    "row_scale",
    "scalar_multiply",
    "scale_by",
    "softmax",
    "sub",
    "sum_all",
    "take_rows",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the domain of an operation."""


class UnknownNodeError(LookupError):
    """A node id that does not belong to the tape."""


def _frozen(value, copy: bool = True) -> np.ndarray:
    arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64).view()
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable handle to a value recorded on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.requires[self.id]

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_multiply(self, -1.0)


@dataclass(frozen=True)
class OpRecord:
    kind: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Op:
    forward: Callable
    backward: Callable


_OPS: dict[str, _Op] = {}


def _register(kind: str, forward: Callable, backward: Callable) -> None:
    _OPS[kind] = _Op(forward, backward)


class Tape:
    """Computation record: node values plus the ordered list of operations."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.requires: list[bool] = []
        self.leaves: dict[int, str] = {}
        self.records: list[OpRecord] = []

    def _new_node(self, value: np.ndarray, requires: bool) -> int:
        self.values.append(value)
        self.requires.append(requires)
        return len(self.values) - 1

    def param(self, value) -> Tensor:
        node = self._new_node(_frozen(value), True)
        self.leaves[node] = "param"
        return Tensor(self, node)

    def const(self, value) -> Tensor:
        # read-only view: callers must not mutate the source array afterwards
        node = self._new_node(_frozen(value, copy=False), False)
        self.leaves[node] = "const"
        return Tensor(self, node)

    def lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return value
        return self.const(value)

    def emit(self, kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        op = _OPS[kind]
        arrays = [t.data for t in inputs]
        out, cache = op.forward(arrays, attrs)
        out = np.asarray(out, dtype=np.float64)
        out.setflags(write=False)
        requires = any(t.requires_grad for t in inputs)
        node = self._new_node(out, requires)
        self.records.append(OpRecord(kind, tuple(t.id for t in inputs), node, attrs, cache))
        return Tensor(self, node)

    def _check_id(self, node_id: int) -> None:
        if not (0 <= node_id < len(self.values)):
            raise UnknownNodeError(f"node id {node_id} is not on this tape")

    def backward(self, loss: Tensor, wanted: Iterable[int | Tensor]) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` with respect to every id in ``wanted``.

        Nodes not on a path to ``loss`` get zero gradients.
        """
        ids = [w.id if isinstance(w, Tensor) else int(w) for w in wanted]
        for node_id in ids:
            self._check_id(node_id)
        if loss.data.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            if rec.output > loss.id:
                continue
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            if rec.output in ids:
                grads[rec.output] = g
            arrays = [self.values[i] for i in rec.inputs]
            in_grads = _OPS[rec.kind].backward(g, arrays, self.values[rec.output], rec.cache, rec.attrs)
            for node_id, gi in zip(rec.inputs, in_grads):
                if gi is None or not self.requires[node_id]:
                    continue
                if node_id in grads:
                    grads[node_id] = grads[node_id] + gi
                else:
                    grads[node_id] = gi
        return {
            i: np.array(grads[i]) if i in grads else np.zeros_like(self.values[i])
            for i in ids
        }

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-execute every recorded operation; leaves may be overridden."""
        values = list(self.values)
        for node_id, value in (leaf_values or {}).items():
            self._check_id(node_id)
            if node_id not in self.leaves:
                raise UnknownNodeError(f"node id {node_id} is not a leaf")
            values[node_id] = _frozen(value)
        for rec in self.records:
            out, _ = _OPS[rec.kind].forward([values[i] for i in rec.inputs], rec.attrs)
            values[rec.output] = np.asarray(out, dtype=np.float64)
        return values


def _tape_of(*items) -> Tape:
    for item in items:
        if isinstance(item, Tensor):
            return item.tape
    raise TypeError("at least one operand must be a Tensor")


def _binary(kind, a, b, **attrs) -> Tensor:
    tape = _tape_of(a, b)
    return tape.emit(kind, [tape.lift(a), tape.lift(b)], **attrs)


# -- matmul ---------------------------------------------------------------

def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b, {}


def _matmul_bwd(g, xs, out, cache, attrs):
    a, b = xs
    return g @ b.T, a.T @ g


_register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b) -> Tensor:
    return _binary("matmul", a, b)


# -- elementwise ----------------------------------------------------------

def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _add_fwd(xs, attrs):
    _same_shape("add", *xs)
    return xs[0] + xs[1], {}


_register("add", _add_fwd, lambda g, xs, out, c, a: (g, g))


def _sub_fwd(xs, attrs):
    _same_shape("sub", *xs)
    return xs[0] - xs[1], {}


_register("sub", _sub_fwd, lambda g, xs, out, c, a: (g, -g))


def _mul_fwd(xs, attrs):
    _same_shape("mul", *xs)
    return xs[0] * xs[1], {}


_register("mul", _mul_fwd, lambda g, xs, out, c, a: (g * xs[1], g * xs[0]))


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = np.full(a.shape, float(b))
    return _binary("add", a, b)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b)


def _bias_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.shape != (a.shape[1],):
        raise DimensionError(f"add_bias: shapes {a.shape} and {b.shape} incompatible")
    return a + b, {}


_register("add_bias", _bias_fwd, lambda g, xs, out, c, a: (g, g.sum(axis=0)))


def add_bias(a, b) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix."""
    return _binary("add_bias", a, b)


_register(
    "scalar_multiply",
    lambda xs, attrs: (xs[0] * attrs["c"], {}),
    lambda g, xs, out, cache, attrs: (g * attrs["c"],),
)


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    return a.tape.emit("scalar_multiply", [a], c=float(c))


def _scale_by_fwd(xs, attrs):
    s, a = xs
    if s.size != 1:
        raise DimensionError(f"scale_by: scale must be scalar, got {s.shape}")
    return s.reshape(()) * a, {}


def _scale_by_bwd(g, xs, out, cache, attrs):
    s, a = xs
    return np.reshape(np.sum(g * a), s.shape), g * s.reshape(())


_register("scale_by", _scale_by_fwd, _scale_by_bwd)


def scale_by(s, a) -> Tensor:
    """Multiply tensor ``a`` by the scalar tensor ``s`` (gradient flows to both)."""
    return _binary("scale_by", s, a)


def _row_scale_fwd(xs, attrs):
    a, c = xs
    if a.ndim != 2 or c.shape != (a.shape[0],):
        raise DimensionError(f"row_scale: shapes {a.shape} and {c.shape} incompatible")
    return a * c[:, None], {}


def _row_scale_bwd(g, xs, out, cache, attrs):
    a, c = xs
    return g * c[:, None], np.sum(g * a, axis=1)


_register("row_scale", _row_scale_fwd, _row_scale_bwd)


def row_scale(a, c) -> Tensor:
    """Scale row i of ``a`` by ``c[i]``."""
    return _binary("row_scale", a, c)


_register(
    "relu",
    lambda xs, attrs: (np.maximum(xs[0], 0.0), {}),
    lambda g, xs, out, cache, attrs: (g * (xs[0] > 0),),
)


def relu(a: Tensor) -> Tensor:
    return a.tape.emit("relu", [a])


# -- softmax / losses -----------------------------------------------------

def _softmax_fwd(xs, attrs):
    (z,) = xs
    if z.size == 0 or z.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    mask = attrs.get("mask")
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        if mask.shape != z.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != {z.shape}")
        if not mask.any(axis=-1).all():
            raise DomainError("softmax mask removes every entry of a row")
        zm = np.where(mask, z, -np.inf)
        e = np.where(mask, np.exp(zm - zm.max(axis=-1, keepdims=True)), 0.0)
    return e / e.sum(axis=-1, keepdims=True), {}


def _softmax_bwd(g, xs, out, cache, attrs):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


_register("softmax", _softmax_fwd, _softmax_bwd)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False are exactly 0."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return a.tape.emit("softmax", [a], mask=mask)


def _ce_fwd(xs, attrs):
    (z,) = xs
    targets = attrs["targets"]
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy expects batch x classes logits, got {z.shape}")
    if targets.shape != (z.shape[0],):
        raise DimensionError(f"{targets.shape[0]} targets for {z.shape[0]} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= z.shape[1]):
        raise IndexError(f"target index out of range for {z.shape[1]} classes")
    top = np.argmax(z, axis=1)
    rows = np.arange(z.shape[0])
    shifted = z - z[rows, top][:, None]
    rest = np.exp(shifted)
    rest[rows, top] = 0.0
    # log(1 + rest) keeps precision when one class dominates
    logsumexp = np.log1p(rest.sum(axis=1))
    logp = shifted[np.arange(z.shape[0]), targets] - logsumexp
    return -logp.mean(), {"shifted": shifted, "logsumexp": logsumexp}


def _ce_bwd(g, xs, out, cache, attrs):
    (z,) = xs
    n = z.shape[0]
    p = np.exp(cache["shifted"] - cache["logsumexp"][:, None])
    p[np.arange(n), attrs["targets"]] -= 1.0
    return (g * p / n,)


_register("cross_entropy", _ce_fwd, _ce_bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax probability of integer ``targets``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    return logits.tape.emit("cross_entropy", [logits], targets=targets)


def _frob_fwd(xs, attrs):
    return np.sqrt(np.sum(xs[0] * xs[0])), {}


def _frob_bwd(g, xs, out, cache, attrs):
    if out == 0.0:
        return (np.zeros_like(xs[0]),)
    return (g * xs[0] / out,)


_register("frobenius_norm", _frob_fwd, _frob_bwd)


def frobenius_norm(a: Tensor) -> Tensor:
    return a.tape.emit("frobenius_norm", [a])


# -- reductions and indexing ----------------------------------------------

_register(
    "sum",
    lambda xs, attrs: (np.sum(xs[0]), {}),
    lambda g, xs, out, cache, attrs: (np.full(xs[0].shape, float(g)),),
)
_register(
    "mean",
    lambda xs, attrs: (np.mean(xs[0]), {}),
    lambda g, xs, out, cache, attrs: (np.full(xs[0].shape, float(g) / xs[0].size),),
)


def sum_all(a: Tensor) -> Tensor:
    return a.tape.emit("sum", [a])


def mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise DomainError("mean of an empty tensor")
    return a.tape.emit("mean", [a])


def _take_fwd(xs, attrs):
    (table,) = xs
    idx = attrs["index"]
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    return table[idx], {}


def _take_bwd(g, xs, out, cache, attrs):
    grad = np.zeros_like(xs[0])
    np.add.at(grad, attrs["index"], g)
    return (grad,)


_register("take_rows", _take_fwd, _take_bwd)


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of ``table`` (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    return table.tape.emit("take_rows", [table], index=index)


def _select_fwd(xs, attrs):
    return xs[0][attrs["key"]], {}


def _select_bwd(g, xs, out, cache, attrs):
    grad = np.zeros_like(xs[0])
    grad[attrs["key"]] = g
    return (grad,)


_register("select", _select_fwd, _select_bwd)


def element(a: Tensor, index: tuple[int, ...] | int) -> Tensor:
    """Scalar entry ``a[index]`` as a 0-d tensor."""
    key = index if isinstance(index, tuple) else (index,)
    return a.tape.emit("select", [a], key=key)


def row(a: Tensor, i: int) -> Tensor:
    return a.tape.emit("select", [a], key=(int(i),))


def column(a: Tensor, j: int) -> Tensor:
    return a.tape.emit("select", [a], key=(slice(None), int(j)))


# -- numeric oracle -------------------------------------------------------

def finite_diff(fn: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        f_plus = fn(x.copy())
        flat[j] = orig - step
        f_minus = fn(x.copy())
        flat[j] = orig
        gflat[j] = (f_plus - f_minus) / (2.0 * step)
    return grad
