import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbseg.errors import InvalidArgumentError, InvalidStateError
from nbseg.tensorcore import (
    SELU_ALPHA,
    SELU_LAMBDA,
    AdamState,
    Tensor,
    adam_step,
    concat_channels,
    conv2d_same,
    dropout,
    finite_diff_check,
    glorot_bound,
    glorot_uniform_init,
    init_adam,
    make_rng,
    max_pool2,
    selu,
    softmax_channels,
    transposed_conv2,
    weighted_cross_entropy,
)


def param(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


# -- glorot ------------------------------------------------------------------


def test_glorot_bound_100_100():
    assert glorot_bound(100, 100) == pytest.approx(0.17321, abs=1e-5)
    t = glorot_uniform_init(100, 100, (200, 50), make_rng(0))
    assert np.abs(t.data).max() <= 0.17321


def test_glorot_bound_1_2():
    assert glorot_bound(1, 2) == pytest.approx(math.sqrt(2), abs=1e-12)
    assert glorot_bound(1, 2) == pytest.approx(1.41421, abs=1e-5)


def test_glorot_mean_near_zero():
    t = glorot_uniform_init(3, 5, (1_000_000,), make_rng(1), dtype=np.float64)
    assert abs(t.data.mean()) < 0.01


@pytest.mark.parametrize("fans", [(0, 3), (3, 0), (-1, 2)])
def test_glorot_rejects_bad_fans(fans):
    with pytest.raises(InvalidArgumentError):
        glorot_uniform_init(*fans, (2, 2), make_rng(0))


def test_glorot_is_deterministic():
    a = glorot_uniform_init(9, 9, (3, 3, 1, 1), make_rng(5))
    b = glorot_uniform_init(9, 9, (3, 3, 1, 1), make_rng(5))
    assert np.array_equal(a.data, b.data)


# -- selu --------------------------------------------------------------------


def test_selu_values():
    assert selu(Tensor(np.array([0.0]))).data[0] == 0.0
    assert selu(Tensor(np.array([1.0]))).data[0] == pytest.approx(1.0507)
    assert selu(Tensor(np.array([-50.0]))).data[0] == pytest.approx(-SELU_LAMBDA * SELU_ALPHA, rel=1e-12)
    assert -SELU_LAMBDA * SELU_ALPHA == pytest.approx(-1.75810, abs=5e-5)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_selu_monotone(a, b):
    lo, hi = sorted((a, b))
    y = selu(Tensor(np.array([lo, hi]))).data
    assert y[0] <= y[1]


def test_selu_continuous_at_zero():
    y = selu(Tensor(np.array([-1e-9, 0.0, 1e-9]))).data
    assert np.all(np.abs(y) < 1e-8)


def test_selu_self_normalizing_stack():
    rng = make_rng(11)
    width = 64
    x = rng.standard_normal((100_000, width))
    for _ in range(20):
        w = glorot_uniform_init(width, width, (width, width), rng, dtype=np.float64).data
        x = selu(Tensor(x @ w)).data
    assert abs(x.mean()) < 0.2
    assert 0.5 <= x.var() <= 1.5


# -- conv --------------------------------------------------------------------


def test_conv_identity_kernel():
    x = make_rng(0).standard_normal((2, 5, 6, 1))
    y = conv2d_same(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1))).data
    assert np.array_equal(y, x)


def test_conv_all_ones_hand_sum():
    x = np.ones((1, 3, 3, 1))
    y = conv2d_same(Tensor(x), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1))).data[0, :, :, 0]
    assert y[1, 1] == 9
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4
    assert y[0, 1] == 6


def test_conv_output_shape():
    rng = make_rng(0)
    y = conv2d_same(Tensor(rng.random((2, 5, 7, 3))), Tensor(rng.random((3, 3, 3, 4))), Tensor(np.zeros(4)))
    assert y.shape == (2, 5, 7, 4)


def test_conv_matches_direct_loop():
    rng = make_rng(3)
    x = rng.standard_normal((1, 4, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    y = conv2d_same(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(y)
    for i in range(4):
        for j in range(5):
            for co in range(3):
                ref[0, i, j, co] = (xp[0, i:i + 3, j:j + 3, :] * w[:, :, :, co]).sum() + b[co]
    assert np.allclose(y, ref)


def test_conv_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        conv2d_same(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))
    with pytest.raises(InvalidArgumentError):
        conv2d_same(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((2, 2, 2, 1))), Tensor(np.zeros(1)))


# -- pooling -----------------------------------------------------------------


def test_max_pool_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert max_pool2(Tensor(x)).data.item() == 4


def test_max_pool_shape():
    assert max_pool2(Tensor(np.zeros((1, 8, 8, 3)))).shape == (1, 4, 4, 3)


def test_max_pool_tie_goes_to_top_left():
    x = param(np.full((1, 4, 4, 1), 2.0))
    y = max_pool2(x)
    assert np.all(y.data == 2.0)
    y.backward()
    expect = np.zeros((4, 4))
    expect[0::2, 0::2] = 1
    assert np.array_equal(x.grad[0, :, :, 0], expect)


def test_max_pool_rejects_odd():
    with pytest.raises(InvalidArgumentError):
        max_pool2(Tensor(np.zeros((1, 3, 4, 1))))


# -- transposed conv ---------------------------------------------------------


def test_transposed_conv_shape():
    rng = make_rng(0)
    y = transposed_conv2(Tensor(rng.random((1, 4, 4, 8))), Tensor(rng.random((2, 2, 8, 5))), Tensor(np.zeros(5)))
    assert y.shape == (1, 8, 8, 5)


def test_transposed_conv_single_pixel_scatter():
    y = transposed_conv2(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((2, 2, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(y.data, np.ones((1, 2, 2, 1)))


def test_transposed_conv_kernel_placement():
    x = np.zeros((1, 2, 2, 1))
    x[0, 1, 0, 0] = 1.0
    w = np.arange(4.0).reshape(2, 2, 1, 1)
    y = transposed_conv2(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data[0, :, :, 0]
    assert np.array_equal(y[2:4, 0:2], w[:, :, 0, 0])
    assert y.sum() == w.sum()


def test_transposed_conv_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        transposed_conv2(Tensor(np.zeros((1, 2, 2, 3))), Tensor(np.zeros((2, 2, 2, 1))), Tensor(np.zeros(1)))


# -- dropout -----------------------------------------------------------------


def test_dropout_inference_identity():
    x = Tensor(np.arange(10.0))
    assert np.array_equal(dropout(x, 0.2, make_rng(0), training=False).data, x.data)


def test_dropout_rate_zero_identity():
    x = Tensor(np.arange(10.0))
    assert np.array_equal(dropout(x, 0.0, make_rng(0), training=True).data, x.data)


def test_dropout_expectation():
    y = dropout(Tensor(np.ones(1_000_000)), 0.2, make_rng(4), training=True).data
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 1.25}


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_rate(rate):
    with pytest.raises(InvalidArgumentError):
        dropout(Tensor(np.ones(3)), rate, make_rng(0), training=True)


def test_dropout_backward_uses_mask():
    x = param(np.ones(1000))
    y = dropout(x, 0.5, make_rng(2), training=True)
    y.backward()
    assert np.array_equal(x.grad, y.data)


# -- softmax / loss ----------------------------------------------------------


def test_softmax_values():
    p = softmax_channels(Tensor(np.array([[[[0.0, 0, 0], [1000.0, 0, 0], [1.0, 2, 3]]]]))).data[0, 0]
    assert np.allclose(p[0], 1 / 3)
    assert np.array_equal(p[1], [1.0, 0.0, 0.0])
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(p[2], e / e.sum())
    assert np.allclose(p[2], [0.09003, 0.24473, 0.66524], atol=5e-6)


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-100, 100))
def test_softmax_shift_invariant(logits, c):
    x = np.array(logits).reshape(1, 1, 1, 3)
    p = softmax_channels(Tensor(x)).data
    q = softmax_channels(Tensor(x + c)).data
    assert abs(p.sum() - 1) < 1e-6
    assert np.allclose(p, q, atol=1e-6)


def one_hot(labels, c=3):
    return np.eye(c)[labels]


def test_wce_perfect_prediction_is_zero():
    t = one_hot(make_rng(0).integers(0, 3, (2, 4, 4)))
    assert weighted_cross_entropy(Tensor(t.copy()), t, np.ones((4, 4))).data == 0.0


def test_wce_uniform_prediction_is_ln3():
    t = one_hot(make_rng(0).integers(0, 3, (2, 4, 4)))
    loss = weighted_cross_entropy(Tensor(np.full(t.shape, 1 / 3)), t, np.ones((4, 4))).data
    assert float(loss) == pytest.approx(math.log(3), abs=1e-12)
    assert float(loss) == pytest.approx(1.0986, abs=1e-4)


def test_wce_linear_in_weights():
    rng = make_rng(1)
    t = one_hot(rng.integers(0, 3, (1, 5, 5)))
    p = softmax_channels(Tensor(rng.standard_normal(t.shape))).data
    w = rng.random((5, 5))
    a = float(weighted_cross_entropy(Tensor(p), t, w).data)
    b = float(weighted_cross_entropy(Tensor(p), t, 2 * w).data)
    assert b == pytest.approx(2 * a, rel=1e-12)
    assert a >= 0


def test_wce_rejects_non_one_hot():
    t = np.full((1, 2, 2, 3), 0.5)
    with pytest.raises(InvalidArgumentError):
        weighted_cross_entropy(Tensor(np.full(t.shape, 1 / 3)), t, np.ones((2, 2)))


def test_wce_logit_gradient_is_weighted_p_minus_t():
    rng = make_rng(7)
    logits = param(rng.standard_normal((2, 3, 3, 3)))
    t = one_hot(rng.integers(0, 3, (2, 3, 3)))
    w = rng.random((3, 3))
    p = softmax_channels(logits)
    weighted_cross_entropy(p, t, w).backward()
    expect = w[None, :, :, None] * (p.data - t) / (2 * 3 * 3)
    assert np.allclose(logits.grad, expect, atol=1e-12)


def test_wce_zero_only_where_weight_positive_matters():
    t = one_hot(np.array([[[0, 1], [2, 0]]]))
    p = t.copy()
    p[0, 0, 0] = [0.0, 1.0, 0.0]  # wrong but weight 0
    w = np.array([[0.0, 1.0], [1.0, 1.0]])
    assert weighted_cross_entropy(Tensor(p), t, w).data == 0.0


# -- adam --------------------------------------------------------------------


def test_adam_zero_gradient_noop():
    p = param(np.arange(5.0))
    before = p.data.copy()
    state = init_adam([p])
    adam_step([p], [np.zeros(5)], state)
    assert np.array_equal(p.data, before)
    assert state.step_count == 1


def test_adam_first_step_magnitude():
    p = param(np.zeros(4))
    state = init_adam([p], learning_rate=1e-3)
    adam_step([p], [np.full(4, 4.0)], state)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert np.allclose(p.data, -1e-3 * 4.0 / (4.0 + 1e-8), rtol=0, atol=1e-15)


def test_adam_minimises_quadratic():
    x = param(np.array([5.0]))
    state = init_adam([x], learning_rate=1e-2)
    for _ in range(5000):
        adam_step([x], [2 * x.data], state)
    assert abs(x.data[0]) < 0.01


def test_adam_uninitialised_state():
    with pytest.raises(InvalidStateError):
        adam_step([param([1.0])], [np.zeros(1)], AdamState())


def test_adam_step_count_increments():
    p = param(np.ones(3))
    state = init_adam([p])
    for k in range(1, 4):
        adam_step([p], [np.ones(3)], state)
        assert state.step_count == k


def test_adam_deterministic_trajectories():
    def run():
        rng = make_rng(9)
        p = param(rng.standard_normal(10))
        state = init_adam([p])
        for _ in range(50):
            adam_step([p], [rng.standard_normal(10)], state)
        return p.data.copy()

    assert np.array_equal(run(), run())


# -- gradient checks ---------------------------------------------------------


def test_fd_identity_op():
    x = param(make_rng(0).standard_normal((2, 3)))
    assert finite_diff_check(lambda t: t, x) < 1e-6


def test_fd_selu():
    x = param(make_rng(0).standard_normal((2, 4, 4, 3)))
    assert finite_diff_check(selu, x, eps=1e-4) < 1e-3


def test_fd_conv_weights():
    rng = make_rng(1)
    xin = Tensor(rng.standard_normal((2, 5, 5, 3)))
    w = param(rng.standard_normal((3, 3, 3, 2)))
    b = Tensor(np.zeros(2))
    probe = rng.random((2, 5, 5, 2))
    assert finite_diff_check(lambda t: conv2d_same(xin, t, b), w, probe=probe) < 1e-3


def test_backward_accumulates_shared_input():
    x = param(np.array([1.0, -2.0, 3.0]))
    y = concat_channels([x, x])
    y.backward()
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])
