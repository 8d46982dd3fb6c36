import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcotta import autodiff as ad
from pcotta.errors import ContractError, ShapeError, TapeError


def _param(rng, shape, name="p", positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return ad.Parameter(x, name=name)


UNARY = {
    "neg": (ad.neg, False),
    "square": (ad.square, False),
    "sqrt": (ad.sqrt, True),
    "exp": (ad.exp, False),
    "log": (ad.log, True),
    "sigmoid": (ad.sigmoid, False),
    "tanh": (ad.tanh, False),
    "normalize_last": (ad.normalize_last, False),
    "softmax_last": (ad.softmax_last, False),
    "log_softmax_last": (ad.log_softmax_last, False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, positive = UNARY[name]
    rng = np.random.default_rng(0)
    p = _param(rng, (3, 4), positive=positive)
    w = rng.normal(size=(3, 4))
    assert ad.finite_diff_check(lambda: ad.sum_(fn(p) * w), [p]) < 1e-6


def test_relu_gradient_away_from_kink():
    p = ad.Parameter(np.array([-1.5, -0.2, 0.3, 2.0]))
    assert ad.finite_diff_check(lambda: ad.sum_(ad.relu(p) * np.arange(1.0, 5.0)), [p]) < 1e-8


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_binary_broadcast_gradients(op):
    rng = np.random.default_rng(1)
    a = _param(rng, (2, 3, 4), "a")
    b = _param(rng, (3, 1), "b", positive=True)
    assert ad.finite_diff_check(lambda: ad.sum_(ad.square(op(a, b))), [a, b]) < 1e-6


def test_matmul_and_linear_gradients():
    rng = np.random.default_rng(2)
    x = _param(rng, (2, 5, 3), "x")
    w = _param(rng, (3, 4), "w")
    b = _param(rng, (4,), "b")
    assert ad.finite_diff_check(lambda: ad.sum_(ad.square(ad.linear(x, w, b))), [x, w, b]) < 1e-6
    assert ad.finite_diff_check(lambda: ad.sum_(ad.tanh(ad.matmul(x, w))), [x, w]) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_reductions_and_shape_ops():
    rng = np.random.default_rng(3)
    p = _param(rng, (3, 4, 2))
    w = rng.normal(size=(4, 3))
    fns = [
        lambda: ad.sum_(ad.mean(p, axis=-1) * w.T),
        lambda: ad.sum_(ad.max_(p, axis=1)),
        lambda: ad.sum_(ad.square(ad.reshape(p, (6, 4)))),
        lambda: ad.sum_(ad.transpose(p, (2, 0, 1))[0] * w.T),
        lambda: ad.sum_(ad.square(ad.concat([p, p * 2.0], axis=1))),
        lambda: ad.sum_(ad.square(ad.stack([p, ad.exp(p)], axis=0))),
        lambda: ad.sum_(ad.square(ad.take(p, (Ellipsis, np.array([0, 0, 3]), slice(None))))),
        lambda: ad.sum_(ad.square(ad.broadcast_to(ad.expand_dims(p, 0), (2, 3, 4, 2)))),
        lambda: ad.sum_(ad.where(p.data > 0, ad.square(p), ad.exp(p))),
    ]
    for f in fns:
        assert ad.finite_diff_check(f, [p]) < 1e-6


def test_take_boolean_mask_accumulates():
    p = ad.Parameter(np.arange(6.0).reshape(3, 2))
    mask = np.array([True, False, True])
    with ad.Tape() as tape:
        tape.backward(ad.sum_(ad.take(p, mask)))
    np.testing.assert_array_equal(p.grad, [[1, 1], [0, 0], [1, 1]])


def test_max_gradient_goes_to_first_argmax():
    p = ad.Parameter(np.array([1.0, 3.0, 3.0, 0.0]))
    with ad.Tape() as tape:
        tape.backward(ad.max_(p, axis=0))
    np.testing.assert_array_equal(p.grad, [0, 1, 0, 0])


def test_normalize_zero_vector_is_zero():
    out = ad.normalize_last(np.zeros((2, 3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_backward_twice_raises():
    p = ad.Parameter(np.ones(3))
    with ad.Tape() as tape:
        loss = ad.sum_(p)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)


def test_backward_needs_scalar():
    p = ad.Parameter(np.ones(3))
    with ad.Tape() as tape:
        with pytest.raises(ContractError):
            tape.backward(p * 2.0)


def test_no_grad_records_nothing():
    p = ad.Parameter(np.ones(3))
    with ad.Tape():
        with ad.no_grad():
            out = ad.sum_(p * 2.0)
    assert not out.requires_grad


def test_frozen_parameter_gets_no_gradient_and_no_update():
    a = ad.Parameter(np.ones(3), name="a")
    b = ad.Parameter(np.ones(3), name="b", trainable=False)
    opt = ad.AdamW([a, b], lr=0.1)
    with ad.Tape() as tape:
        tape.backward(ad.sum_(ad.square(a * b)))
    opt.step()
    np.testing.assert_array_equal(b.data, 1.0)
    assert np.all(a.data < 1.0)


def test_astype_round_trips_gradient_dtype():
    p = ad.Parameter(np.ones(3, dtype=np.float32))
    with ad.Tape() as tape:
        tape.backward(ad.sum_(ad.square(ad.astype(p, np.float64))))
    assert p.grad.dtype == np.float32
    np.testing.assert_allclose(p.grad, 2.0)


def test_adamw_first_step_matches_hand_computation():
    # one step from x=1 with grad g: m=0.1g, v=0.001g^2, bias-corrected -> update lr*sign(g)
    x = ad.Parameter(np.array([1.0, -2.0]), name="x")
    opt = ad.AdamW([x], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)
    with ad.Tape() as tape:
        tape.backward(ad.sum_(ad.square(x)))
    g = np.array([2.0, -4.0])
    expected = np.array([1.0, -2.0]) * (1 - 0.01 * 0.05) - 0.01 * g / (np.abs(g) + 1e-8)
    opt.step()
    np.testing.assert_allclose(x.data, expected, rtol=1e-6)


def test_adamw_two_steps_against_reference_loop():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=5)
    x = ad.Parameter(x0.copy(), name="x")
    opt = ad.AdamW([x], lr=0.05, weight_decay=0.01)
    ref, m, v = x0.astype(np.float32).astype(np.float64), np.zeros(5), np.zeros(5)
    for t in range(1, 4):
        with ad.Tape() as tape:
            tape.backward(ad.sum_(ad.exp(x)))
        g = np.exp(ref)
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.05 * 0.01) - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(x.data, ref, rtol=1e-5)


def test_cosine_schedule():
    opt = ad.AdamW([], lr=1.0, horizon=10)
    assert opt.lr_at(0) == pytest.approx(1.0)
    assert opt.lr_at(5) == pytest.approx(0.5)
    assert opt.lr_at(10) == pytest.approx(0.0, abs=1e-12)
    assert ad.AdamW([], lr=0.3).lr_at(1000) == 0.3


def test_optimizer_state_round_trip():
    x = ad.Parameter(np.ones(4), name="x")
    opt = ad.AdamW([x], lr=0.1)
    with ad.Tape() as tape:
        tape.backward(ad.sum_(ad.square(x)))
    opt.step()
    state = opt.state_arrays()
    y = ad.Parameter(x.data.copy(), name="x")
    opt2 = ad.AdamW([y], lr=0.1)
    opt2.load_state_arrays(state)
    for o, p in ((opt, x), (opt2, y)):
        with ad.Tape() as tape:
            tape.backward(ad.sum_(ad.square(p)))
        o.step()
    np.testing.assert_array_equal(x.data, y.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(4, 7))
    s = ad.softmax_last(x).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(ad.log_softmax_last(x).data), s, atol=1e-6)


def test_finite_diff_check_detects_wrong_gradient():
    p = ad.Parameter(np.array([0.3, -0.7]))

    def bad():
        return ad.make_op(np.sum(p.data**2), (p,), lambda g: (g * 3 * p.data,))

    assert ad.finite_diff_check(bad, [p]) > 0.1
    assert math.isfinite(ad.finite_diff_check(lambda: ad.sum_(ad.square(p)), [p]))
