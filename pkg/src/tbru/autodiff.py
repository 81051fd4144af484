"""Dense float64 tensors with a recorded-operation tape.

Every forward op appends one node to the tape of its inputs; ``Tape.backward``
sweeps the nodes in reverse creation order. Graphs are rebuilt per example, so
recurrences chosen at runtime are differentiated exactly like static ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A value on a tape. ``node_id`` is the index of the producing node."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    def __len__(self) -> int:
        return self.value.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray, list], None] | None


class Tape:
    """Append-only record of forward operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, value: np.ndarray, inputs: Sequence[Tensor],
                backward=None, check: bool = True) -> Tensor:
        nid = len(self.nodes)
        ids = tuple(t.node_id for t in inputs)
        for t in inputs:
            if t.tape is not self:
                raise ValueError("tensors from different tapes cannot be combined")
        if check and not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        self.nodes.append(_Node(op, ids, backward))
        return Tensor(value, self, nid)

    def leaf(self, value, name: str | None = None) -> Tensor:
        arr = np.asarray(value, dtype=DTYPE)
        t = self._record("leaf", arr, ())
        if name is not None:
            self.leaves[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self._record("const", np.asarray(value, dtype=DTYPE), ())

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Register each named array as a leaf; returns name -> Tensor."""
        return {name: self.leaf(arr, name) for name, arr in params.items()}

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.tape is not self:
            raise ValueError("loss belongs to another tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.value)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            node.backward(g, grads)
        return Gradients(self, grads)

    def check_acyclic(self) -> bool:
        return all(i < nid for nid, node in enumerate(self.nodes) for i in node.inputs)


@dataclass
class Gradients:
    tape: Tape
    by_node: list = field(repr=False)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.by_node[t.node_id]
        return np.zeros_like(t.value) if g is None else g

    def for_leaves(self) -> dict[str, np.ndarray]:
        """Gradient per named leaf; unreachable leaves get zeros."""
        return {name: self[t] for name, t in self.tape.leaves.items()}


def _acc(grads: list, nid: int, g: np.ndarray) -> None:
    cur = grads[nid]
    if cur is None:
        grads[nid] = np.array(g, dtype=DTYPE, copy=True)
    else:
        cur += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either side may be a 1-D vector."""
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise ShapeError("matmul needs 1-D or 2-D operands")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
    out = av @ bv
    ia, ib = a.node_id, b.node_id

    def backward(g, grads):
        if av.ndim == 2 and bv.ndim == 2:
            _acc(grads, ia, g @ bv.T)
            _acc(grads, ib, av.T @ g)
        elif av.ndim == 2:  # matrix . vector
            _acc(grads, ia, np.outer(g, bv))
            _acc(grads, ib, av.T @ g)
        elif bv.ndim == 2:  # vector . matrix
            _acc(grads, ia, bv @ g)
            _acc(grads, ib, np.outer(av, g))
        else:  # dot product
            _acc(grads, ia, g * bv)
            _acc(grads, ib, g * av)

    return a.tape._record("matmul", np.asarray(out, dtype=DTYPE), (a, b), backward)


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    ia, ib = a.node_id, b.node_id

    def backward(g, grads):
        _acc(grads, ia, g)
        _acc(grads, ib, g)

    return a.tape._record("add", a.value + b.value, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    ia, ib = a.node_id, b.node_id

    def backward(g, grads):
        _acc(grads, ia, g)
        _acc(grads, ib, -g)

    return a.tape._record("sub", a.value - b.value, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    ia, ib = a.node_id, b.node_id

    def backward(g, grads):
        _acc(grads, ia, g * bv)
        _acc(grads, ib, g * av)

    return a.tape._record("mul", av * bv, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g * k)

    return a.tape._record("scale", a.value * k, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split form avoids overflow in exp for large |x|
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g * out * (1.0 - out))

    return a.tape._record("sigmoid", out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g * (1.0 - out * out))

    return a.tape._record("tanh", out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g * mask)

    return a.tape._record("relu", a.value * mask, (a,), backward)


def identity(a: Tensor) -> Tensor:
    return a


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g * out)

    return a.tape._record("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    x = a.value
    if (x <= 0).any():
        raise ValueError("log of non-positive value")
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g / x)

    return a.tape._record("log", np.log(x), (a,), backward)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "log": log, "exp": exp, "relu": relu}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(a: Tensor, kind: str, b: Tensor | None = None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- structural -----------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty list")
    if len(parts) == 1:
        return parts[0]
    vals = [p.value for p in parts]
    nd = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != nd or v.shape[:axis] + v.shape[axis + 1:] != \
                vals[0].shape[:axis] + vals[0].shape[axis + 1:]:
            raise ShapeError("concat: shapes disagree off the concatenation axis")
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    ids = [p.node_id for p in parts]

    def backward(g, grads):
        for nid, lo, hi in zip(ids, bounds[:-1], bounds[1:]):
            if hi > lo:
                _acc(grads, nid, np.take(g, np.arange(lo, hi), axis=axis))

    return parts[0].tape._record("concat", out, parts, backward)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape vectors into rows of a matrix."""
    if not parts:
        raise ValueError("stack of an empty list")
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack")
    out = np.stack([p.value for p in parts])
    ids = [p.node_id for p in parts]

    def backward(g, grads):
        for k, nid in enumerate(ids):
            _acc(grads, nid, g[k])

    return parts[0].tape._record("stack", out, parts, backward)


def transpose(a: Tensor) -> Tensor:
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, g.T)

    return a.tape._record("transpose", a.value.T, (a,), backward)


def slice_(a: Tensor, lo: int, hi: int) -> Tensor:
    ia = a.node_id
    shape = a.value.shape

    def backward(g, grads):
        full = np.zeros(shape, dtype=DTYPE)
        full[lo:hi] = g
        _acc(grads, ia, full)

    return a.tape._record("slice", a.value[lo:hi], (a,), backward)


def row(table: Tensor, index: int) -> Tensor:
    """Embedding lookup; the gradient lands in one row of ``table``."""
    if not 0 <= index < table.value.shape[0]:
        raise IndexError(f"row {index} out of range for table of {table.value.shape[0]}")
    it = table.node_id
    shape = table.value.shape

    def backward(g, grads):
        cur = grads[it]
        if cur is None:
            cur = grads[it] = np.zeros(shape, dtype=DTYPE)
        cur[index] += g

    return table.tape._record("row", table.value[index].copy(), (table,), backward)


def sum_(a: Tensor) -> Tensor:
    ia = a.node_id
    shape = a.value.shape

    def backward(g, grads):
        _acc(grads, ia, np.broadcast_to(g, shape))

    return a.tape._record("sum", np.asarray(a.value.sum()), (a,), backward)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("add_n of an empty list")
    for p in parts[1:]:
        _same_shape(parts[0], p, "add_n")
    if len(parts) == 1:
        return parts[0]
    ids = [p.node_id for p in parts]

    def backward(g, grads):
        for nid in ids:
            _acc(grads, nid, g)

    out = np.sum([p.value for p in parts], axis=0)
    return parts[0].tape._record("add_n", out, parts, backward)


def pick(a: Tensor, index: int) -> Tensor:
    """Scalar element ``a[index]`` of a vector."""
    ia = a.node_id
    shape = a.value.shape

    def backward(g, grads):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        _acc(grads, ia, full)

    return a.tape._record("pick", np.asarray(a.value[index]), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max()
    e = np.exp(z)
    p = e / e.sum()
    ia = a.node_id

    def backward(g, grads):
        _acc(grads, ia, p * (g - np.dot(g, p)))

    return a.tape._record("softmax", p, (a,), backward)


def masked_log_softmax(logits: Tensor, allowed) -> Tensor:
    """Log-probabilities over ``allowed`` indices; others are -inf.

    ``allowed`` is a boolean mask or an iterable of indices.
    """
    z = logits.value
    mask = _as_mask(allowed, z.shape[0])
    if not mask.any():
        raise ValueError("masked_log_softmax: empty allowed set")
    za = z[mask]
    m = za.max()
    lse = m + np.log(np.exp(za - m).sum())
    out = np.full_like(z, -np.inf)
    out[mask] = za - lse
    probs = np.where(mask, np.exp(out), 0.0)
    il = logits.node_id

    def backward(g, grads):
        gm = np.where(mask, g, 0.0)
        _acc(grads, il, gm - probs * gm.sum())

    if not np.isfinite(out[mask]).all():
        raise NonFiniteError("non-finite log-probability over allowed decisions")
    return logits.tape._record("masked_log_softmax", out, (logits,), backward, check=False)


def _as_mask(allowed, k: int) -> np.ndarray:
    if isinstance(allowed, np.ndarray) and allowed.dtype == bool:
        if allowed.shape != (k,):
            raise ShapeError("mask length does not match logits")
        return allowed
    mask = np.zeros(k, dtype=bool)
    mask[list(allowed)] = True
    return mask


# -- verification ---------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tol for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
    turning finite-difference noise into huge ratios."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray],
                      step: float = 1e-5, tol: float = 1e-4,
                      names: Iterable[str] | None = None,
                      corrupt: Callable[[dict], None] | None = None) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` receives a mapping of parameter name -> leaf Tensor and must return a
    scalar Tensor. ``params`` arrays are perturbed in place and restored.
    ``corrupt`` may mutate the analytic gradients before comparison (negative
    control for the checker itself).
    """
    tape = Tape()
    loss = f(tape.watch(params))
    analytic = tape.backward(loss).for_leaves()
    if corrupt is not None:
        corrupt(analytic)

    def value() -> float:
        t = Tape()
        return float(f(t.watch(params)).value)

    entries = []
    for name in (names if names is not None else params):
        arr = params[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = value()
            flat[k] = orig - step
            down = value()
            flat[k] = orig
            nflat[k] = (up - down) / (2 * step)
        err = relative_error(analytic[name], numeric)
        k = int(np.argmax(err)) if err.size else 0
        idx = np.unravel_index(k, arr.shape) if err.size else ()
        entries.append(GradCheckEntry(
            name, float(err.max()) if err.size else 0.0, tuple(int(i) for i in idx),
            float(analytic[name].reshape(-1)[k]) if err.size else 0.0,
            float(nflat[k]) if err.size else 0.0))
    return GradCheckReport(entries, tol)
