import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbru.data import Sentence, gen_synthetic_trees
from tbru.transitions import (
    RIGHT_TO_LEFT, ArcStandardSystem, NonProjectiveError, ShiftOnlySystem, TaggerSystem,
    TransitionError, input_pointer, is_projective, is_tree, make_system, subtree,
)

LABELS = ("comp", "mod", "root")


def parser():
    return ArcStandardSystem(LABELS)


def stacked(n, shifts):
    sys = parser()
    state = sys.initial_state(n)
    for step in range(1, shifts + 1):
        state = sys.apply(state, sys.SHIFT, step)
    return sys, state


def test_initial_states():
    s = ShiftOnlySystem().initial_state(3)
    assert s.pointer == 1
    t = TaggerSystem(["A"]).initial_state(4)
    assert t.emitted == ()
    p = parser().initial_state(2)
    assert p.stack == () and p.buffer_pointer == 1 and not p.arcs
    with pytest.raises(TransitionError):
        parser().initial_state(0)


def test_allowed_sets():
    assert ShiftOnlySystem().allowed(ShiftOnlySystem().initial_state(2)) == (0,)
    sys, s = stacked(3, 1)
    assert sys.allowed(s) == (sys.SHIFT,)
    sys, s = stacked(2, 2)
    assert sys.allowed(s) == tuple(range(1, 1 + 2 * len(LABELS)))
    sys, s = stacked(3, 2)
    assert sys.SHIFT in sys.allowed(s) and len(sys.allowed(s)) == 1 + 2 * len(LABELS)
    mask = sys.allowed_mask(s)
    assert mask.dtype == bool and mask.all()


def test_allowed_on_terminal_raises():
    sys, s = stacked(1, 1)
    with pytest.raises(TransitionError):
        sys.allowed(s)


def test_apply_shift_left_right():
    sys, s = stacked(3, 2)  # stack [1, 2], next 3
    shifted = sys.apply(s, sys.SHIFT, 3)
    assert shifted.stack == (1, 2, 3) and shifted.buffer_pointer == 4
    left = sys.apply(s, sys.left(1), 3)
    assert left.stack == (2,) and left.arcs == {(2, 1, 1)}
    right = sys.apply(s, sys.right(0), 3)
    assert right.stack == (1,) and right.arcs == {(1, 2, 0)}
    # apply is pure
    assert s.stack == (1, 2) and not s.arcs


def test_apply_rejects_disallowed():
    sys, s = stacked(3, 1)
    with pytest.raises(TransitionError):
        sys.apply(s, sys.left(0), 2)


def test_terminal_and_num_steps():
    sys, s = stacked(1, 1)
    assert sys.is_terminal(s)
    assert sys.num_steps(1) == 1 and sys.num_steps(5) == 9
    assert ShiftOnlySystem().num_steps(4) == 4
    assert TaggerSystem(["A"]).num_steps(4) == 4


def test_input_pointer():
    sys = parser()
    s = sys.initial_state(3)
    assert input_pointer(s) == 1
    s = sys.apply(s, 0, 1)
    assert input_pointer(s) == 2
    _, done = stacked(3, 3)
    assert input_pointer(done) == 3
    r2l = ArcStandardSystem(LABELS, RIGHT_TO_LEFT).initial_state(4)
    assert input_pointer(r2l) == 4


def test_subtree_steps():
    sys, s = stacked(3, 2)
    assert subtree(s, "S0") == 2 and subtree(s, "S1") == 1
    s = sys.apply(s, sys.left(0), 7)
    assert subtree(s, "S0") == 7
    with pytest.raises(TransitionError):
        subtree(s, "S1")


def test_oracle_on_small_tree():
    # 1 <- 2 -> 3, root 2
    sent = Sentence(("a", "b", "c"), heads=(2, 2, 2), dep_labels=("mod", "root", "mod"))
    sys = parser()
    seq = sys.oracle_sequence(sent)
    assert seq == [0, 0, sys.left(1), 0, sys.right(1)]
    final = sys.run(3, seq)
    assert final.heads[1:] == (2, 0, 2)


def test_oracle_rejects_nonprojective():
    heads = (3, 4, 3, 3)  # 1->3 crosses 2->4
    assert not is_projective(heads)
    sent = Sentence(("a", "b", "c", "d"), heads=heads, dep_labels=("mod",) * 2 + ("root", "mod"))
    with pytest.raises(NonProjectiveError):
        parser().oracle_sequence(sent)


def test_tagger_oracle_and_field():
    sent = Sentence(("a", "b"), pos=("N", "V"), keep_drop=("KEEP", "DROP"))
    assert TaggerSystem(["N", "V"]).oracle_sequence(sent) == [0, 1]
    kd = TaggerSystem(["DROP", "KEEP"], field="keep_drop")
    assert kd.oracle_sequence(sent) == [1, 0]
    with pytest.raises(TransitionError):
        TaggerSystem(["X"]).oracle_sequence(sent)


def test_make_system():
    assert make_system("shift_only").kind == "shift_only"
    assert make_system("tagger", tags=["A"]).kind == "tagger"
    assert make_system("arc_standard", labels=["x"]).num_decisions == 3
    with pytest.raises(ValueError):
        make_system("swap")


def test_is_tree():
    assert is_tree((2, 2, 2))
    assert not is_tree((2, 1, 3))
    assert not is_tree((1, 2))


@st.composite
def projective_heads(draw, max_n=15):
    """Random projective tree by recursive interval splitting."""
    n = draw(st.integers(1, max_n))
    heads = [0] * n

    def build(lo, hi, head):
        if lo > hi:
            return
        root = draw(st.integers(lo, hi))
        heads[root - 1] = head if head else root
        build(lo, root - 1, root)
        build(root + 1, hi, root)

    build(1, n, 0)
    return tuple(heads)


@settings(max_examples=200, deadline=None)
@given(projective_heads(), st.sampled_from(["left_to_right", "right_to_left"]))
def test_oracle_round_trip(heads, direction):
    n = len(heads)
    labels = tuple("root" if h == d else "mod" for d, h in enumerate(heads, start=1))
    sent = Sentence(tuple("w" for _ in heads), heads=heads, dep_labels=labels)
    sys = ArcStandardSystem(LABELS, direction)
    seq = sys.oracle_sequence(sent)
    assert len(seq) == 2 * n - 1
    final = sys.run(n, seq)
    assert sys.is_terminal(final)
    root = final.stack[0]
    rebuilt = tuple(root if d == root else final.heads[d] for d in range(1, n + 1))
    assert rebuilt == heads
    assert all(LABELS[final.labels[d]] == labels[d - 1] for d in range(1, n + 1) if d != root)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_random_derivations_are_trees(n, seed):
    rng = np.random.default_rng(seed)
    sys = parser()
    state = sys.initial_state(n)
    steps = 0
    while not sys.is_terminal(state):
        allowed = sys.allowed(state)
        steps += 1
        state = sys.apply(state, int(rng.choice(allowed)), steps)
    assert steps == 2 * n - 1
    root = state.stack[0]
    heads = tuple(root if d == root else state.heads[d] for d in range(1, n + 1))
    assert is_tree(heads) and is_projective(heads)


def test_synthetic_trees_are_oracle_derivable():
    corpus = gen_synthetic_trees(50, max_len=12, seed=3)
    sys = parser()
    for s in corpus.sentences:
        seq = sys.oracle_sequence(s)
        assert len(seq) == 2 * len(s) - 1
