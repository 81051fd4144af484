"""Network cells and recurrent-input aggregation.

Cells are pure functions of (parameters, inputs). Parameters arrive as tape
leaves so the same code serves training, inference and gradient checks.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

AGGREGATIONS = ("concat_fixed", "mean", "attention")


def aggregate_recurrent(inputs: Sequence[Tensor], policy: str, *, slots: int | None = None,
                        query: Tensor | None = None, wq: Tensor | None = None,
                        wk: Tensor | None = None) -> Tensor:
    """Combine a set of linked hidden vectors into one vector.

    ``concat_fixed`` keeps recurrence order and needs exactly ``slots`` inputs.
    ``attention`` weights inputs by softmax((wq q) . (wk k_j)).
    """
    if policy == "concat_fixed":
        if slots is not None and len(inputs) != slots:
            raise ShapeError(f"concat_fixed expects {slots} inputs, got {len(inputs)}")
        return ad.concat(list(inputs))
    if not inputs:
        raise ValueError(f"{policy} aggregation over an empty set")
    if policy == "mean":
        return ad.scale(ad.add_n(list(inputs)), 1.0 / len(inputs))
    if policy == "attention":
        if query is None:
            raise ValueError("attention needs a query")
        keys = ad.stack(list(inputs))                    # n x H
        q = query if wq is None else wq @ query
        proj = keys if wk is None else keys @ ad.transpose(wk)
        weights = ad.softmax(proj @ q)                   # n
        return weights @ keys
    raise ValueError(f"unknown aggregation {policy!r}")


def lstm_step(w: Tensor, b: Tensor, x: Tensor, c_prev: Tensor | None) -> tuple[Tensor, Tensor]:
    """Gate order in ``w`` rows: input, forget, output, candidate.

    ``x`` is the concatenation [m(s) || aggregated recurrences].
    """
    hdim = b.value.shape[0] // 4
    if x.value.shape[0] == 0:
        raise ValueError("lstm cell needs at least one input source")
    if w.value.shape[1] != x.value.shape[0]:
        raise ShapeError(f"lstm input has {x.value.shape[0]} dims, weights expect {w.value.shape[1]}")
    gates = w @ x + b
    i = ad.sigmoid(ad.slice_(gates, 0, hdim))
    f = ad.sigmoid(ad.slice_(gates, hdim, 2 * hdim))
    o = ad.sigmoid(ad.slice_(gates, 2 * hdim, 3 * hdim))
    g = ad.tanh(ad.slice_(gates, 3 * hdim, 4 * hdim))
    c = i * g if c_prev is None else f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "linear": ad.identity}


def mlp_forward(layers: Sequence[tuple[Tensor, Tensor]], m: Tensor, activation: str = "relu") -> Tensor:
    act = ACTIVATIONS[activation]
    h = m
    for w, b in layers:
        if w.value.shape[1] != h.value.shape[0]:
            raise ShapeError(f"mlp layer expects {w.value.shape[1]} inputs, got {h.value.shape[0]}")
        h = act(w @ h + b)
    return h


def decision_logits(w: Tensor, b: Tensor | None, h: Tensor) -> Tensor:
    if w.value.shape[1] != h.value.shape[0]:
        raise ShapeError(f"output layer expects {w.value.shape[1]} dims, got {h.value.shape[0]}")
    out = w @ h
    return out if b is None else out + b


def argmax_allowed(scores: np.ndarray, mask: np.ndarray) -> int:
    """Highest-scoring allowed index; ties go to the lowest index."""
    masked = np.where(mask, scores, -np.inf)
    return int(np.argmax(masked))


def xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def lstm_init(rng: np.random.Generator, in_dim: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    w = np.concatenate([xavier(rng, hidden, in_dim) for _ in range(4)])
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return w, b
