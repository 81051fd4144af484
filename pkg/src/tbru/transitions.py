"""Transition systems: shift-only, tagger and arc-standard.

States are frozen dataclasses so ``apply`` is pure and states can be shared.
Token positions are 1-based sentence indices throughout. A gold head equal to
the token's own index marks the root.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

LEFT_TO_RIGHT = "left_to_right"
RIGHT_TO_LEFT = "right_to_left"
DIRECTIONS = (LEFT_TO_RIGHT, RIGHT_TO_LEFT)


class TransitionError(ValueError):
    pass


class NonProjectiveError(TransitionError):
    pass


@dataclass(frozen=True)
class ShiftOnlyState:
    pointer: int
    n: int
    direction: str = LEFT_TO_RIGHT

    @property
    def token(self) -> int:
        """Sentence position under the pointer."""
        return self.pointer if self.direction == LEFT_TO_RIGHT else self.n - self.pointer + 1


@dataclass(frozen=True)
class TaggerState:
    emitted: tuple[int, ...]
    n: int

    @property
    def token(self) -> int:
        return len(self.emitted) + 1


@dataclass(frozen=True)
class ParserState:
    """Arc-standard configuration.

    ``heads[t]``/``labels[t]`` hold the attached head and label id of token t
    (0 and -1 when unattached; index 0 unused). ``last_modifier_step[t]`` is the
    global step of the last decision that shifted t or gave it a child.
    """

    stack: tuple[int, ...]
    buffer_pointer: int
    n: int
    heads: tuple[int, ...]
    labels: tuple[int, ...]
    last_modifier_step: tuple[int, ...]
    direction: str = LEFT_TO_RIGHT
    num_applied: int = 0

    def position(self, k: int) -> int:
        """Sentence position of the k-th token in reading order (1-based)."""
        return k if self.direction == LEFT_TO_RIGHT else self.n - k + 1

    @property
    def buffer_empty(self) -> bool:
        return self.buffer_pointer > self.n

    @property
    def arcs(self) -> frozenset[tuple[int, int, int]]:
        return frozenset((h, d, self.labels[d]) for d, h in enumerate(self.heads) if h > 0)

    def children(self, t: int) -> list[int]:
        return [d for d, h in enumerate(self.heads) if h == t]


def is_projective(heads: Sequence[int]) -> bool:
    """``heads`` is 1-based per token (list index i -> token i+1), root = self."""
    arcs = [(min(h, d), max(h, d)) for d, h in enumerate(heads, start=1) if h != d]
    for a, b in arcs:
        for c, e in arcs:
            if a < c < b < e:
                return False
    return True


def is_tree(heads: Sequence[int]) -> bool:
    n = len(heads)
    roots = [d for d, h in enumerate(heads, start=1) if h == d]
    if len(roots) != 1 or any(not 1 <= h <= n for h in heads):
        return False
    for d in range(1, n + 1):
        seen = set()
        while heads[d - 1] != d:
            if d in seen:
                return False
            seen.add(d)
            d = heads[d - 1]
    return True


class TransitionSystem:
    kind: str = ""
    decision_vocab: tuple[str, ...] = ()

    @property
    def num_decisions(self) -> int:
        return len(self.decision_vocab)

    def allowed_mask(self, state) -> np.ndarray:
        mask = np.zeros(self.num_decisions, dtype=bool)
        mask[list(self.allowed(state))] = True
        return mask

    def _check_allowed(self, state, d: int) -> None:
        if d not in self.allowed(state):
            raise TransitionError(f"decision {d} not allowed in {state}")

    def run(self, n: int, decisions: Sequence[int], **kw):
        state = self.initial_state(n, **kw)
        for step, d in enumerate(decisions, start=1):
            state = self.apply(state, d, step)
        return state

    def oracle_sequence(self, sentence, **kw) -> list[int]:
        state = self.initial_state(len(sentence), **kw)
        out = []
        step = 0
        while not self.is_terminal(state):
            d = self.gold_oracle(state, sentence)
            out.append(d)
            step += 1
            state = self.apply(state, d, step)
        return out


class ShiftOnlySystem(TransitionSystem):
    kind = "shift_only"
    decision_vocab = ("advance",)
    ADVANCE = 0

    def __init__(self, direction: str = LEFT_TO_RIGHT):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        self.direction = direction

    def initial_state(self, n: int) -> ShiftOnlyState:
        _check_length(n)
        return ShiftOnlyState(1, n, self.direction)

    def allowed(self, state: ShiftOnlyState) -> tuple[int, ...]:
        if self.is_terminal(state):
            raise TransitionError("allowed() on a terminal state")
        return (self.ADVANCE,)

    def apply(self, state: ShiftOnlyState, d: int, step: int = 0) -> ShiftOnlyState:
        self._check_allowed(state, d)
        return replace(state, pointer=state.pointer + 1)

    def is_terminal(self, state: ShiftOnlyState) -> bool:
        return state.pointer == state.n + 1

    def num_steps(self, n: int) -> int:
        return n

    def gold_oracle(self, state, sentence=None) -> int:
        return self.ADVANCE


class TaggerSystem(TransitionSystem):
    """Emits one tag per token, left to right. Gold tags come from ``field``."""

    kind = "tagger"

    def __init__(self, tags: Sequence[str], field: str = "pos"):
        if not tags:
            raise ValueError("tagger needs a non-empty tag set")
        self.decision_vocab = tuple(tags)
        self.field = field
        self._index = {t: i for i, t in enumerate(self.decision_vocab)}

    def initial_state(self, n: int) -> TaggerState:
        _check_length(n)
        return TaggerState((), n)

    def allowed(self, state: TaggerState) -> tuple[int, ...]:
        if self.is_terminal(state):
            raise TransitionError("allowed() on a terminal state")
        return tuple(range(self.num_decisions))

    def apply(self, state: TaggerState, d: int, step: int = 0) -> TaggerState:
        self._check_allowed(state, d)
        return replace(state, emitted=state.emitted + (d,))

    def is_terminal(self, state: TaggerState) -> bool:
        return len(state.emitted) == state.n

    def num_steps(self, n: int) -> int:
        return n

    def gold_tags(self, sentence) -> list[int]:
        tags = getattr(sentence, self.field)
        if tags is None:
            raise TransitionError(f"sentence has no gold {self.field!r} annotation")
        try:
            return [self._index[t] for t in tags]
        except KeyError as e:
            raise TransitionError(f"gold tag {e.args[0]!r} not in tag set") from None

    def gold_oracle(self, state: TaggerState, sentence) -> int:
        return self.gold_tags(sentence)[len(state.emitted)]


class ArcStandardSystem(TransitionSystem):
    """Decision 0 is Shift, 1..L are LeftArc+label, L+1..2L RightArc+label."""

    kind = "arc_standard"
    SHIFT = 0

    def __init__(self, labels: Sequence[str], direction: str = LEFT_TO_RIGHT):
        if not labels:
            raise ValueError("arc-standard needs at least one label")
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        self.labels = tuple(labels)
        self.direction = direction
        self._label_index = {l: i for i, l in enumerate(self.labels)}
        self.decision_vocab = ("SHIFT",) + tuple(f"LEFT:{l}" for l in self.labels) + \
            tuple(f"RIGHT:{l}" for l in self.labels)

    def left(self, label: int) -> int:
        return 1 + label

    def right(self, label: int) -> int:
        return 1 + len(self.labels) + label

    def decode(self, d: int) -> tuple[str, int]:
        """(kind, label id) with kind in SHIFT/LEFT/RIGHT."""
        L = len(self.labels)
        if d == 0:
            return "SHIFT", -1
        if 1 <= d <= L:
            return "LEFT", d - 1
        if L < d <= 2 * L:
            return "RIGHT", d - 1 - L
        raise TransitionError(f"decision {d} out of range")

    def initial_state(self, n: int) -> ParserState:
        _check_length(n)
        zeros = (0,) * (n + 1)
        return ParserState((), 1, n, zeros, (-1,) * (n + 1), zeros, self.direction)

    def allowed(self, state: ParserState) -> tuple[int, ...]:
        if self.is_terminal(state):
            raise TransitionError("allowed() on a terminal state")
        out = []
        if not state.buffer_empty:
            out.append(self.SHIFT)
        if len(state.stack) >= 2:
            out.extend(range(1, 1 + 2 * len(self.labels)))
        return tuple(out)

    def apply(self, state: ParserState, d: int, step: int = 0) -> ParserState:
        self._check_allowed(state, d)
        kind, lab = self.decode(d)
        lms = list(state.last_modifier_step)
        if kind == "SHIFT":
            tok = state.position(state.buffer_pointer)
            lms[tok] = step
            return replace(state, stack=state.stack + (tok,),
                           buffer_pointer=state.buffer_pointer + 1,
                           last_modifier_step=tuple(lms),
                           num_applied=state.num_applied + 1)
        *rest, s1, s0 = state.stack
        if kind == "LEFT":
            head, dep = s0, s1
        else:
            head, dep = s1, s0
        heads = list(state.heads)
        labels = list(state.labels)
        heads[dep] = head
        labels[dep] = lab
        lms[head] = step
        return replace(state, stack=tuple(rest) + (head,), heads=tuple(heads),
                       labels=tuple(labels), last_modifier_step=tuple(lms),
                       num_applied=state.num_applied + 1)

    def is_terminal(self, state: ParserState) -> bool:
        return state.buffer_empty and len(state.stack) == 1

    def num_steps(self, n: int) -> int:
        return 2 * n - 1

    def gold_oracle(self, state: ParserState, sentence) -> int:
        heads = sentence.heads
        labels = sentence.dep_labels
        if heads is None:
            raise TransitionError("sentence has no gold heads")
        if len(state.stack) >= 2:
            s1, s0 = state.stack[-2], state.stack[-1]
            if heads[s1 - 1] == s0 and self._complete(state, s1, heads):
                return self.left(self._label_id(labels, s1))
            if heads[s0 - 1] == s1 and self._complete(state, s0, heads):
                return self.right(self._label_id(labels, s0))
        if state.buffer_empty:
            raise NonProjectiveError("no oracle decision: gold tree is not projective")
        return self.SHIFT

    def _complete(self, state: ParserState, t: int, heads) -> bool:
        gold = sum(1 for d, h in enumerate(heads, start=1) if h == t and d != t)
        return gold == sum(1 for h in state.heads if h == t)

    def _label_id(self, labels, t: int) -> int:
        if labels is None:
            return 0
        try:
            return self._label_index[labels[t - 1]]
        except KeyError:
            raise TransitionError(f"gold label {labels[t - 1]!r} not in label set") from None


def _check_length(n: int) -> None:
    if n < 1:
        raise TransitionError("empty sentence")


def input_pointer(state) -> int:
    """Sentence position of the next input token.

    Once the buffer is exhausted the sentinel ``n`` is returned.
    """
    if isinstance(state, ParserState):
        if state.buffer_empty:
            return state.n
        return state.position(state.buffer_pointer)
    if isinstance(state, ShiftOnlyState):
        return state.token if state.pointer <= state.n else state.n
    if isinstance(state, TaggerState):
        return min(state.token, state.n)
    raise TypeError(f"no input pointer for {type(state).__name__}")


def subtree(state: ParserState, which: str) -> int:
    """Global step of the last decision that shifted or extended the token in
    stack slot ``which`` ('S0' top, 'S1' second)."""
    depth = {"S0": 1, "S1": 2}[which]
    if len(state.stack) < depth:
        raise TransitionError(f"stack too shallow for {which}")
    return state.last_modifier_step[state.stack[-depth]]


def make_system(kind: str, *, tags: Sequence[str] = (), labels: Sequence[str] = (),
                direction: str = LEFT_TO_RIGHT, field: str = "pos") -> TransitionSystem:
    if kind == "shift_only":
        return ShiftOnlySystem(direction)
    if kind == "tagger":
        return TaggerSystem(tags, field)
    if kind == "arc_standard":
        return ArcStandardSystem(labels, direction)
    raise ValueError(f"unknown transition system {kind!r}")
