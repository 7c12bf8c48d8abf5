import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from rotinv import nn
from rotinv.nn import ops

import gradcheck

TOL = 1e-4


def rng(seed):
    return np.random.default_rng(seed)


# -- tape ------------------------------------------------------------------------------

def test_backward_needs_scalar():
    tape = nn.Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(nn.mul(x, x))


def test_tape_is_single_use():
    tape = nn.Tape()
    x = tape.watch(np.array([2.0]))
    loss = nn.total(nn.mul(x, x))
    tape.backward(loss)
    assert_allclose(x.grad, [4.0])
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_shared_input_accumulates():
    tape = nn.Tape()
    x = tape.watch(np.array([1.5, -2.0]))
    tape.backward(nn.total(nn.add(nn.mul(x, x), nn.scale(x, 3.0))))
    assert_allclose(x.grad, 2 * np.array([1.5, -2.0]) + 3.0)


def test_plain_arrays_need_no_tape():
    out = nn.dense(np.ones((2, 3)), np.ones((3, 4)), np.zeros(4))
    assert out.tape is None
    assert_array_equal(out.data, np.full((2, 4), 3.0))


# -- finite-difference checks ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_dense_gradient(seed):
    r = rng(seed)
    inputs = {"x": r.standard_normal((4, 5)), "W": r.standard_normal((5, 3)), "b": r.standard_normal(3)}
    assert gradcheck.check(lambda a: nn.dense(a["x"], a["W"], a["b"]), inputs, r) < TOL


@pytest.mark.parametrize("C,O,stride,padding", [(1, 4, 1, 1), (1, 3, 2, 1), (6, 1, 1, 1), (5, 2, 2, 1), (3, 3, 1, 0)])
def test_conv_gradient_both_strategies(C, O, stride, padding):
    r = rng(C * 10 + O)
    inputs = {"x": r.standard_normal((2, 6, 6, C)), "K": r.standard_normal((3, 3, C, O)), "b": r.standard_normal(O)}
    f = lambda a: nn.conv2d(a["x"], a["K"], a["b"], stride=stride, padding=padding)
    assert gradcheck.check(f, inputs, r) < TOL


def _conv_reference(x, K, b, stride, padding):
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    kh, kw, _, O = K.shape
    Ho = (xp.shape[1] - kh) // stride + 1
    Wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((x.shape[0], Ho, Wo, O))
    for i in range(Ho):
        for j in range(Wo):
            win = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            out[:, i, j, :] = np.einsum("nhwc,hwco->no", win, K) + b
    return out


@pytest.mark.parametrize("C,O", [(1, 4), (6, 1), (3, 3)])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loops(C, O, stride):
    r = rng(7)
    x, K, b = r.standard_normal((2, 7, 5, C)), r.standard_normal((3, 3, C, O)), r.standard_normal(O)
    assert_allclose(nn.conv2d(x, K, b, stride, 1).data, _conv_reference(x, K, b, stride, 1), rtol=1e-12, atol=1e-12)


def test_conv_strategies_agree():
    r = rng(3)
    x, K, b = r.standard_normal((2, 8, 8, 4)), r.standard_normal((3, 3, 4, 5)), r.standard_normal(5)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    a, _ = ops._conv_im2col(xp, K, b, 1, 8, 8)
    c, _ = ops._conv_shift(xp, K, b, 1, 8, 8)
    assert_allclose(a, c, rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.conv2d(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))


@pytest.mark.parametrize("fn", [nn.relu, nn.sigmoid, nn.exp])
def test_pointwise_gradients(fn):
    r = rng(11)
    inputs = {"x": gradcheck.away_from_zero(r, (3, 7))}
    assert gradcheck.check(lambda a: fn(a["x"]), inputs, r) < TOL


def test_sigmoid_is_overflow_safe():
    with np.errstate(over="raise"):
        out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0], dtype=np.float32)).data
    assert_array_equal(out, np.array([0.0, 0.5, 1.0], dtype=np.float32))


def test_upsample_gradient():
    r = rng(5)
    assert gradcheck.check(lambda a: nn.upsample_nearest(a["x"], 2), {"x": r.standard_normal((2, 3, 2, 3))}, r) < TOL


def test_reparameterize_gradient():
    r = rng(2)
    eps = r.standard_normal((4, 3))
    inputs = {"mu": r.standard_normal((4, 3)), "lv": r.standard_normal((4, 3))}
    assert gradcheck.check(lambda a: nn.reparameterize(a["mu"], a["lv"], eps), inputs, r) < TOL


def test_reparameterize_value():
    z = nn.reparameterize(np.array([[1.0]]), np.array([[np.log(4.0)]]), np.array([[0.5]])).data
    assert_allclose(z, [[2.0]])


def test_kl_gradient_and_value():
    r = rng(4)
    inputs = {"mu": r.standard_normal((5, 3)), "lv": r.standard_normal((5, 3))}
    assert gradcheck.check(lambda a: nn.kl_diag_gaussian(a["mu"], a["lv"]), inputs, r) < TOL
    assert_allclose(nn.kl_diag_gaussian(np.zeros((2, 4)), np.zeros((2, 4))).data, [0.0, 0.0])
    # closed form for one coordinate: 0.5 (1 + e - 1 - 1)
    assert_allclose(nn.kl_diag_gaussian(np.array([[1.0]]), np.array([[1.0]])).data, [0.5 * (np.e - 1)])


def test_bernoulli_nll_gradient_and_value():
    r = rng(6)
    target = r.random((3, 4, 4))
    inputs = {"r": r.uniform(0.02, 0.98, (3, 4, 4))}
    assert gradcheck.check(lambda a: nn.bernoulli_nll(target, a["r"]), inputs, r) < TOL
    assert_allclose(nn.bernoulli_nll(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).data, [2 * np.log(2)])


def test_bernoulli_nll_clamps():
    out = nn.bernoulli_nll(np.array([[1.0]]), np.array([[0.0]])).data
    assert np.isfinite(out).all()
    assert_allclose(out, [-np.log(ops.BCE_CLAMP)], rtol=1e-6)
    tape = nn.Tape()
    rec = tape.watch(np.array([[0.0, 1.0]]))
    tape.backward(nn.total(nn.bernoulli_nll(np.array([[1.0, 0.0]]), rec)))
    assert_array_equal(rec.grad, [[0.0, 0.0]])


def test_squared_distance_and_unit_rows_gradients():
    r = rng(9)
    inputs = {"a": r.standard_normal((4, 3)), "b": r.standard_normal((4, 3))}
    assert gradcheck.check(lambda a: nn.squared_distance(a["a"], a["b"]), inputs, r) < TOL
    assert gradcheck.check(lambda a: nn.unit_rows(a["a"]), {"a": r.standard_normal((6, 2)) + 0.5}, r) < TOL


def test_unit_rows_rejects_zero():
    with pytest.raises(nn.DegeneratePoseError):
        nn.unit_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=2).filter(lambda v: np.hypot(*v) > 1e-3))
def test_unit_rows_norm(v):
    u = nn.unit_rows(np.array([v])).data
    assert abs(np.hypot(*u[0]) - 1.0) < 1e-12


def test_rows_and_reshape_gradients():
    r = rng(12)
    f = lambda a: nn.reshape(nn.rows(a["x"], 1, 3), (2, 6))
    assert gradcheck.check(f, {"x": r.standard_normal((4, 3, 2))}, r) < TOL


def test_f32_stays_f32():
    x = np.ones((2, 3), dtype=np.float32)
    W = np.ones((3, 2), dtype=np.float32)
    out = nn.sigmoid(nn.dense(x, W, np.zeros(2, np.float32)))
    assert out.dtype == np.float32


# -- optimizer ----------------------------------------------------------------------------------

def test_adam_first_step_is_lr():
    p = {"x": np.array([0.0])}
    st0 = nn.AdamState.for_params(p, lr=0.1)
    new, st1 = nn.adam_step(p, {"x": np.array([1.0])}, st0)
    # mhat = 1, vhat = 1 after bias correction
    assert_allclose(new["x"], [-0.1 / (1 + 1e-8)], rtol=0, atol=1e-15)
    assert st1.t == 1 and st0.t == 0
    assert_array_equal(p["x"], [0.0])


def test_adam_zero_gradient_uses_momentum():
    p = {"x": np.array([0.0])}
    s = nn.AdamState.for_params(p, lr=0.1)
    p, s = nn.adam_step(p, {"x": np.array([1.0])}, s)
    p, s = nn.adam_step(p, {"x": np.array([0.0])}, s)
    m, v = 0.9 * 0.1, 0.999 * 0.001
    expect = -0.1 / (1 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert_allclose(p["x"], [expect], rtol=1e-12)


def test_adam_minimizes_quadratic():
    p = {"x": np.array([0.0])}
    s = nn.AdamState.for_params(p, lr=0.1)
    for _ in range(200):
        p, s = nn.adam_step(p, {"x": 2 * (p["x"] - 3)}, s)
    assert abs(p["x"][0] - 3) < 1e-3


def test_adam_rejects_bad_gradients():
    p = {"a": np.zeros(2), "b": np.zeros(3)}
    s = nn.AdamState.for_params(p)
    with pytest.raises(nn.NonFiniteGradientError, match="'b'"):
        nn.adam_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan, 0.0])}, s)
    with pytest.raises(KeyError, match="'b'"):
        nn.adam_step(p, {"a": np.zeros(2)}, s)
    with pytest.raises(ValueError, match="shape"):
        nn.adam_step(p, {"a": np.zeros(2), "b": np.zeros(4)}, s)
    assert s.t == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_adam_is_pure(seed, steps):
    r = rng(seed)
    p = {"w": r.standard_normal((2, 2))}
    s = nn.AdamState.for_params(p)
    g = {"w": r.standard_normal((2, 2))}
    a = nn.adam_step(p, g, s)[0]["w"]
    b = nn.adam_step(p, g, s)[0]["w"]
    assert_array_equal(a, b)
    assert s.t == 0


def test_glorot_bounds():
    w = nn.glorot_uniform(rng(0), (30, 20), 30, 20)
    assert np.abs(w).max() <= np.sqrt(6 / 50)
    assert w.dtype == np.float32
