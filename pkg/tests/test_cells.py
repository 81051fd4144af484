import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tbru import autodiff as ad
from tbru.autodiff import ShapeError, Tape
from tbru.cells import (
    aggregate_recurrent, argmax_allowed, decision_logits, lstm_init, lstm_step, mlp_forward,
)


def leaves(t, *xs):
    return [t.leaf(np.asarray(x, dtype=float)) for x in xs]


def test_concat_fixed_order_and_arity():
    t = Tape()
    a, b = leaves(t, [1, 2], [3])
    np.testing.assert_array_equal(aggregate_recurrent([a, b], "concat_fixed", slots=2).value, [1, 2, 3])
    with pytest.raises(ShapeError):
        aggregate_recurrent([a], "concat_fixed", slots=2)


def test_attention_identical_keys_is_mean():
    t = Tape()
    k = [t.leaf(np.array([1.0, -2.0])) for _ in range(3)]
    q = t.leaf(np.array([0.3, 0.7]))
    out = aggregate_recurrent(k, "attention", query=q)
    np.testing.assert_allclose(out.value, [1.0, -2.0])
    (single,) = leaves(t, [4.0, 5.0])
    np.testing.assert_allclose(aggregate_recurrent([single], "attention", query=q).value, [4, 5])


def test_empty_aggregation_errors():
    t = Tape()
    (q,) = leaves(t, [1.0])
    for policy in ("mean", "attention"):
        with pytest.raises(ValueError):
            aggregate_recurrent([], policy, query=q)
    with pytest.raises(ValueError):
        aggregate_recurrent(leaves(t, [1.0]), "sum")


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 5), st.just(3)), elements=st.floats(-5, 5)),
       arrays(float, 3, elements=st.floats(-5, 5)))
def test_attention_is_convex_combination(keys, query):
    t = Tape()
    out = aggregate_recurrent([t.leaf(k) for k in keys], "attention", query=t.leaf(query)).value
    assert np.all(out >= keys.min(axis=0) - 1e-9)
    assert np.all(out <= keys.max(axis=0) + 1e-9)


def test_lstm_zero_params():
    t = Tape()
    w, b, x = leaves(t, np.zeros((8, 3)), np.zeros(8), np.zeros(3))
    h, c = lstm_step(w, b, x, None)
    np.testing.assert_array_equal(h.value, 0)
    (c0,) = leaves(t, [2.0, -4.0])
    h, c = lstm_step(w, b, x, c0)
    np.testing.assert_allclose(c.value, [1.0, -2.0])


def test_lstm_rejects_bad_input():
    t = Tape()
    w, b, x = leaves(t, np.zeros((8, 3)), np.zeros(8), np.zeros(2))
    with pytest.raises(ShapeError):
        lstm_step(w, b, x, None)
    w0, x0 = leaves(t, np.zeros((8, 0)), np.zeros(0))
    with pytest.raises(ValueError):
        lstm_step(w0, b, x0, None)


def test_lstm_init_forget_bias():
    w, b = lstm_init(np.random.default_rng(0), 5, 3)
    assert w.shape == (12, 5)
    np.testing.assert_array_equal(b, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


def test_lstm_three_step_gradient():
    rng = np.random.default_rng(2)
    w, b = lstm_init(rng, 5, 3)
    params = {"w": w, "b": b + rng.normal(size=12) * 0.1,
              "x": rng.normal(size=(3, 2))}

    def f(P):
        c = None
        hs = []
        prev = P["w"].tape.constant(np.zeros(3))
        for k in range(3):
            x = ad.concat([ad.row(P["x"], k), prev])
            prev, c = lstm_step(P["w"], P["b"], x, c)
            hs.append(prev)
        return ad.sum_(ad.mul(ad.add_n(hs), ad.add_n(hs)))

    assert ad.finite_diff_check(f, params).passed


def test_mlp_identity_and_relu():
    t = Tape()
    w, b, m = leaves(t, np.eye(3), np.zeros(3), [1.0, -2.0, 3.0])
    np.testing.assert_array_equal(mlp_forward([(w, b)], m, "linear").value, [1, -2, 3])
    (neg,) = leaves(t, [-1.0, -2.0, -3.0])
    np.testing.assert_array_equal(mlp_forward([(w, b)], neg, "relu").value, 0)
    with pytest.raises(ShapeError):
        mlp_forward([(w, b)], t.leaf(np.ones(2)))


def test_mlp_gradient():
    rng = np.random.default_rng(3)
    params = {"w1": rng.normal(size=(4, 3)), "b1": rng.normal(size=4),
              "w2": rng.normal(size=(2, 4)), "b2": rng.normal(size=2), "m": rng.normal(size=3)}

    def f(P):
        return ad.sum_(mlp_forward([(P["w1"], P["b1"]), (P["w2"], P["b2"])], P["m"], "tanh"))

    assert ad.finite_diff_check(f, params).passed


def test_decision_logits():
    t = Tape()
    w, h, bias = leaves(t, [[0, 1, 0], [0, 0, 1]], [5.0, 6.0, 7.0], [0.5, -0.5])
    np.testing.assert_array_equal(decision_logits(w, None, h).value, [6, 7])
    (zero,) = leaves(t, np.zeros(3))
    np.testing.assert_array_equal(decision_logits(w, bias, zero).value, [0.5, -0.5])
    np.testing.assert_array_equal(decision_logits(w, None, zero).value, [0, 0])
    with pytest.raises(ShapeError):
        decision_logits(w, None, t.leaf(np.ones(2)))


def test_argmax_ties_and_mask():
    assert argmax_allowed(np.array([1.0, 3.0, 3.0]), np.array([True, True, True])) == 1
    assert argmax_allowed(np.array([1.0, 3.0, 3.0]), np.array([True, False, True])) == 2


def test_cells_are_pure():
    rng = np.random.default_rng(4)
    w, b = lstm_init(rng, 4, 2)
    x = rng.normal(size=4)
    outs = []
    for _ in range(2):
        t = Tape()
        h, c = lstm_step(t.leaf(w), t.leaf(b), t.leaf(x), None)
        outs.append(h.value.tobytes() + c.value.tobytes())
    assert outs[0] == outs[1]
