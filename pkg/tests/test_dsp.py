import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal
from scipy import signal

from wawenet import dsp
from wawenet.errors import InvalidLength, InvalidShape, StateError

from gradcheck import REL_TOL, numeric_grad, rel_error

finite = st.floats(-10, 10, allow_nan=False, width=64)


# -- FIR filtering ----------------------------------------------------------

def test_fir_matches_scipy_correlation(rng):
    x = rng.standard_normal(200)
    h = rng.standard_normal(3)
    expected = signal.correlate(x, h, mode="same") + 0.25
    assert_allclose(dsp.fir_filter(x, h, 0.25), expected, rtol=1e-12, atol=1e-12)


def test_fir_impulse_response_is_reversed_kernel():
    x = np.zeros(9)
    x[4] = 1.0
    y = dsp.fir_filter(x, [1.0, 2.0, 3.0])
    assert_array_equal(y[3:6], [3.0, 2.0, 1.0])


def test_fir_errors():
    with pytest.raises(InvalidLength):
        dsp.fir_filter(np.zeros(0), [1, 2, 3])
    with pytest.raises(InvalidShape):
        dsp.fir_filter(np.zeros(5), [1, 2])


def test_fir_bank_matches_per_channel_sum(rng):
    x = rng.standard_normal((2, 3, 40))
    w = rng.standard_normal((5, 3, 3))
    off = rng.standard_normal(5)
    y = dsp.fir_bank(x, w, off)
    for b in range(2):
        for o in range(5):
            ref = sum(dsp.fir_filter(x[b, c], w[o, c]) for c in range(3)) + off[o]
            assert_allclose(y[b, o], ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("cin", [1, 2, 7])
def test_fir_bank_float32_paths_agree(rng, cin):
    x = rng.standard_normal((3, cin, 64)).astype(np.float32)
    w = rng.standard_normal((6, cin, 3)).astype(np.float32)
    off = rng.standard_normal(6).astype(np.float32)
    fast = dsp.fir_bank(x, w, off)
    slow = dsp.fir_bank(np.asfortranarray(x), w, off)
    assert fast.dtype == np.float32
    assert_allclose(fast, slow, rtol=1e-5, atol=1e-5)
    g = rng.standard_normal(fast.shape).astype(np.float32)
    _, gw1, go1 = dsp.fir_bank_backward(x, w, g, input_grad=False)
    _, gw2, go2 = dsp.fir_bank_backward(np.asfortranarray(x), w, g, input_grad=True)
    assert_allclose(gw1, gw2, rtol=1e-4, atol=1e-4)
    assert_allclose(go1, go2, rtol=1e-5, atol=1e-4)


@given(arrays(np.float64, 16, elements=finite), arrays(np.float64, 16, elements=finite),
       st.floats(-3, 3), st.floats(-3, 3))
def test_fir_is_linear(x1, x2, a, b):
    h = np.array([0.3, -1.2, 0.7])
    lhs = dsp.fir_filter(a * x1 + b * x2, h)
    rhs = a * dsp.fir_filter(x1, h) + b * dsp.fir_filter(x2, h)
    assert_allclose(lhs, rhs, atol=1e-9)


# -- gain/bias, HWR ---------------------------------------------------------

def test_gain_bias_per_channel(rng):
    x = rng.standard_normal((2, 3, 5)).astype(np.float32)
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, -1.0])
    y = dsp.apply_gain_bias(x, a, b)
    assert_allclose(y, x * a[:, None] + b[:, None], rtol=1e-6, atol=1e-6)
    with pytest.raises(InvalidShape):
        dsp.apply_gain_bias(x, np.ones(4), np.zeros(4))


def test_hwr_and_zero_gradient_at_kink():
    x = np.array([-1.0, 0.0, 2.0])
    assert_array_equal(dsp.hwr(x), [0.0, 0.0, 2.0])
    assert_array_equal(dsp.hwr_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


@given(arrays(np.float64, 32, elements=finite))
def test_hwr_idempotent_and_nonnegative(x):
    y = dsp.hwr(x)
    assert np.all(y >= 0)
    assert_array_equal(dsp.hwr(y), y)


def test_hwr_mean_of_unit_sine():
    n = np.arange(48000)
    x = np.sin(2 * np.pi * 100 * n / 16000)
    assert abs(dsp.hwr(x).mean() - 1 / np.pi) < 1e-3


# -- pooling -----------------------------------------------------------------

@pytest.mark.parametrize("m", [2, 3, 4])
def test_pool_equals_filter_then_subsample(rng, m):
    x = rng.standard_normal((2, 3, 12 * m))
    filtered = signal.lfilter(np.ones(m) / m, [1.0], x, axis=-1)
    assert_allclose(dsp.avg_pool(x, m), filtered[..., m - 1::m], rtol=1e-12, atol=1e-14)


@given(st.sampled_from([2, 3, 4]), st.integers(1, 40), st.data())
def test_pool_preserves_dc(m, blocks, data):
    x = data.draw(arrays(np.float64, m * blocks, elements=finite))
    assert abs(dsp.avg_pool(x, m).mean() - x.mean()) <= 1e-9


def test_pool_errors():
    with pytest.raises(InvalidLength):
        dsp.avg_pool(np.zeros(7), 2)
    with pytest.raises(InvalidShape):
        dsp.avg_pool(np.zeros(10), 5)


@pytest.mark.parametrize("m", [2, 3, 4])
def test_pool_compiled_and_reference_agree(rng, m):
    x = rng.standard_normal((3, 4, 6 * m)).astype(np.float32)
    assert_array_equal(dsp.avg_pool(x, m), dsp.avg_pool(np.asfortranarray(x), m))
    g = rng.standard_normal((3, 4, 6)).astype(np.float32)
    assert_array_equal(dsp.avg_pool_backward(g, m), dsp.avg_pool_backward(np.asfortranarray(g), m))


# -- dense -------------------------------------------------------------------

def test_dense_shape_checks(rng):
    w, c = rng.standard_normal((2, 5)), np.zeros(2)
    assert dsp.dense_map(rng.standard_normal(5), w, c).shape == (2,)
    with pytest.raises(InvalidShape):
        dsp.dense_map(np.zeros(4), w, c)
    with pytest.raises(InvalidShape):
        dsp.dense_map(np.array([np.nan] * 5), w, c)


# -- batch normalization -----------------------------------------------------

def test_batch_norm_train_mode_output_statistics(rng):
    x = rng.standard_normal((4, 3, 50)) * 3 + 2
    p = dsp.NormParams.identity(3, np.float64)
    y = dsp.batch_norm(x, p, training=True)
    assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-12)
    assert_allclose(y.var(axis=(0, 2)), 1, rtol=1e-4)


def test_running_stats_use_unbiased_variance(rng):
    x = rng.standard_normal((2, 1, 5))
    p = dsp.NormParams.identity(1, np.float64)
    dsp.batch_norm(x, p, training=True)
    assert_allclose(p.running_mean, 0.1 * x.mean(), rtol=1e-12)
    assert_allclose(p.running_var, 0.9 + 0.1 * x.var(ddof=1), rtol=1e-12)


def test_eval_mode_is_folded_gain_bias(rng):
    p = dsp.NormParams(rng.uniform(0.5, 2, 3), rng.standard_normal(3), rng.standard_normal(3),
                       rng.uniform(0.5, 2, 3))
    x = rng.standard_normal((2, 3, 7))
    a, b = p.folded()
    expected = (x - p.running_mean[:, None]) / np.sqrt(p.running_var[:, None] + p.eps) * p.gamma[:, None] \
        + p.beta[:, None]
    assert_allclose(dsp.batch_norm(x, p), expected, rtol=1e-12, atol=1e-12)
    assert_allclose(dsp.batch_norm(x, p), a[:, None] * x + b[:, None], rtol=1e-12, atol=1e-12)


def test_batch_statistics_need_two_values():
    with pytest.raises(InvalidShape):
        dsp.batch_statistics(np.zeros((1, 2, 1)))


@pytest.mark.parametrize("training", [True, False])
def test_norm_backward_compiled_matches_reference(rng, training):
    x = rng.standard_normal((3, 4, 20)).astype(np.float32)
    g = rng.standard_normal((3, 4, 20)).astype(np.float32)
    p = dsp.NormParams.identity(4)
    p.gamma[:] = rng.uniform(0.5, 2, 4)
    fast = dsp.batch_norm_backward(x, p, g, training)
    slow = dsp.batch_norm_backward(np.asfortranarray(x), p, np.asfortranarray(g), training)
    for u, v in zip(fast, slow):
        assert_allclose(u, v, rtol=1e-5, atol=1e-5)


def test_layer_backward_without_forward_raises():
    layer = dsp.HalfWaveRect()
    with pytest.raises(StateError):
        layer.backward(np.ones(3))


# -- gradient checks (float64) ----------------------------------------------

def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def test_grad_fir_filter(rng):
    x, h, r = rng.standard_normal(12), rng.standard_normal(3), rng.standard_normal(12)
    off = np.array([0.3])
    gx, gh, goff = dsp.fir_filter_backward(x, h, r)
    f = lambda: float(np.dot(r, dsp.fir_filter(x, h, off[0])))
    assert rel_error(gx, numeric_grad(f, x)) < REL_TOL
    assert rel_error(gh, numeric_grad(f, h)) < REL_TOL
    assert rel_error(goff, numeric_grad(f, off)) < REL_TOL


def test_grad_fir_bank(rng):
    x = rng.standard_normal((2, 3, 10))
    w, off = rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
    r = rng.standard_normal((2, 4, 10))
    gx, gw, goff = dsp.fir_bank_backward(x, w, r)
    f = lambda: float(np.sum(r * dsp.fir_bank(x, w, off)))
    for analytic, arr in ((gx, x), (gw, w), (goff, off)):
        assert rel_error(analytic, numeric_grad(f, arr)) < REL_TOL


def test_grad_gain_bias(rng):
    x, a, b = rng.standard_normal((2, 3, 6)), rng.standard_normal(3), rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 6))
    gx, ga, gb = dsp.gain_bias_backward(x, a, r)
    f = lambda: float(np.sum(r * dsp.apply_gain_bias(x, a, b)))
    for analytic, arr in ((gx, x), (ga, a), (gb, b)):
        assert rel_error(analytic, numeric_grad(f, arr)) < REL_TOL


def test_grad_hwr(rng):
    x, r = _away_from_zero(rng, 20), rng.standard_normal(20)
    f = lambda: float(np.dot(r, dsp.hwr(x)))
    assert rel_error(dsp.hwr_backward(x, r), numeric_grad(f, x)) < REL_TOL


@pytest.mark.parametrize("m", [2, 3, 4])
def test_grad_avg_pool(rng, m):
    x, r = rng.standard_normal((2, 2, 4 * m)), rng.standard_normal((2, 2, 4))
    f = lambda: float(np.sum(r * dsp.avg_pool(x, m)))
    assert rel_error(dsp.avg_pool_backward(r, m), numeric_grad(f, x)) < REL_TOL


def test_grad_dense(rng):
    v, w, c = rng.standard_normal((3, 5)), rng.standard_normal((2, 5)), rng.standard_normal(2)
    r = rng.standard_normal((3, 2))
    gv, gw, gc = dsp.dense_backward(v, w, r)
    f = lambda: float(np.sum(r * dsp.dense_map(v, w, c)))
    for analytic, arr in ((gv, v), (gw, w), (gc, c)):
        assert rel_error(analytic, numeric_grad(f, arr)) < REL_TOL


@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(rng, training):
    x = rng.standard_normal((3, 2, 5))
    p = dsp.NormParams(rng.uniform(0.5, 2, 2), rng.standard_normal(2),
                       rng.standard_normal(2), rng.uniform(0.5, 2, 2))
    r = rng.standard_normal((3, 2, 5))
    gx, gg, gb = dsp.batch_norm_backward(x, p, r, training)
    f = lambda: float(np.sum(r * dsp.batch_norm(x, p, training=training, update_running=False)))
    for analytic, arr in ((gx, x), (gg, p.gamma), (gb, p.beta)):
        assert rel_error(analytic, numeric_grad(f, arr)) < REL_TOL


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("m", [2, 3, 4])
def test_fused_gain_hwr_pool_matches_stages(rng, m, dtype):
    x = rng.standard_normal((3, 5, 8 * m)).astype(dtype)
    a, b = rng.uniform(-2, 2, 5), rng.normal(0, 0.5, 5)
    staged = dsp.avg_pool(dsp.hwr(dsp.apply_gain_bias(x, a, b)), m)
    tol = dict(rtol=4 * np.finfo(dtype).eps, atol=4 * np.finfo(dtype).eps)
    assert_allclose(dsp.gain_hwr_pool(x, a, b, m), staged, **tol)
    assert_allclose(dsp.gain_hwr_pool(np.asfortranarray(x), a, b, m), staged, **tol)
