import math

import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest

from coverid import autodiff as ad
from coverid.autodiff import KinkLog, Parameter, RunningStats, Tape, Tensor, gradient_check, off_kink_sampler


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def ones(c):
    return t(np.ones(c))


def zeros(c):
    return t(np.zeros(c))


def conv_loops(x, w, stride, pad):
    """Direct cross-correlation, independent of the im2col path."""
    N, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, K, Ho, Wo))
    for n in range(N):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, k, i, j] = np.sum(patch * w[k])
    return out


# -- conv2d ------------------------------------------------------------------


def test_conv_ones_gives_nine():
    out = ad.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_1x1_and_zero_weights():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    np.testing.assert_array_equal(ad.conv2d(t(x), t(np.eye(3)[:, :, None, None])).data, x)
    assert not ad.conv2d(t(x), t(np.zeros((2, 3, 3, 3))), padding=1).data.any()


@hypothesis.settings(max_examples=25, deadline=None)
@hypothesis.given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(5, 8),
    st.integers(5, 8),
    st.sampled_from([1, 3]),
    st.integers(1, 2),
    st.integers(0, 1),
    st.integers(0, 2**16),
)
def test_conv_matches_loops(n, c, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(2, c, k, k))
    np.testing.assert_allclose(ad.conv2d(t(x), t(wt), stride, pad).data, conv_loops(x, wt, stride, pad), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        ad.conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        ad.conv2d(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 3, 3))))


# -- normalization -----------------------------------------------------------


def test_batch_norm2d_train_statistics_and_running_update():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(8, 4, 5, 5))
    stats = RunningStats.fresh(4, np.float64)
    y = ad.batch_norm2d(t(x), ones(4), zeros(4), stats, training=True).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    n = 8 * 5 * 5
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batch_norm_eval_is_affine():
    x = np.random.default_rng(2).normal(size=(3, 2, 4, 4))
    stats = RunningStats.fresh(2, np.float64)
    y = ad.batch_norm2d(t(x), t([2.0, 2.0]), t([1.0, 1.0]), stats, training=False).data
    np.testing.assert_allclose(y, 2 * x / np.sqrt(1 + ad.EPS) + 1, rtol=1e-12)
    f = x[:, :, 0, 0]
    y1 = ad.batch_norm1d(t(f), t([2.0, 2.0]), t([1.0, 1.0]), RunningStats.fresh(2, np.float64), training=False).data
    np.testing.assert_allclose(y1, 2 * f / np.sqrt(1 + ad.EPS) + 1, rtol=1e-12)


def test_batch_norm_constant_channel_gives_beta():
    x = np.full((4, 1, 3, 3), 7.0)
    y = ad.batch_norm2d(t(x), ones(1), t([0.5]), RunningStats.fresh(1, np.float64), training=True).data
    np.testing.assert_allclose(y, 0.5)
    y1 = ad.batch_norm1d(t(np.full((5, 2), -3.0)), ones(2), t([0.25, -1.0]), RunningStats.fresh(2, np.float64), True)
    np.testing.assert_allclose(y1.data, [[0.25, -1.0]] * 5)


def test_batch_norm1d_train_statistics():
    f = np.random.default_rng(3).normal(5, 3, size=(16, 6))
    y = ad.batch_norm1d(t(f), ones(6), zeros(6), RunningStats.fresh(6, np.float64), training=True).data
    assert np.abs(y.mean(0)).max() < 1e-5
    np.testing.assert_allclose(y.var(0), 1.0, atol=1e-3)


def test_batch_norm_rejects_single_sample_in_train_mode():
    with pytest.raises(ValueError):
        ad.batch_norm2d(t(np.ones((1, 2, 3, 3))), ones(2), zeros(2), RunningStats.fresh(2), training=True)
    with pytest.raises(ValueError):
        ad.batch_norm1d(t(np.ones((1, 2))), ones(2), zeros(2), RunningStats.fresh(2), training=True)


def test_batch_norm_train_eval_consistency():
    rng = np.random.default_rng(4)
    stats = RunningStats.fresh(3, np.float64)
    g, b = t([1.5, 0.7, 1.0]), t([0.1, -0.2, 0.0])
    for _ in range(120):
        ad.batch_norm2d(t(rng.normal(2.0, 3.0, (16, 3, 4, 4))), g, b, stats, training=True)
    x = rng.normal(2.0, 3.0, (64, 3, 4, 4))
    train_out = ad.batch_norm2d(t(x), g, b, RunningStats.fresh(3, np.float64), training=True).data
    eval_out = ad.batch_norm2d(t(x), g, b, stats, training=False).data
    rms = np.sqrt(np.mean((train_out - eval_out) ** 2)) / np.sqrt(np.mean(train_out**2))
    assert rms < 0.05


def test_instance_norm_cases():
    const = ad.instance_norm2d(t(np.full((2, 3, 4, 4), 5.0)), ones(3), zeros(3)).data
    assert not const.any()
    x = np.random.default_rng(5).normal(2, 4, size=(3, 2, 5, 6))
    y = ad.instance_norm2d(t(x), ones(2), zeros(2)).data
    assert np.abs(y.mean(axis=(2, 3))).max() < 1e-5
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-3)
    pair = np.stack([x[0], -x[0]])
    yp = ad.instance_norm2d(t(pair), ones(2), zeros(2)).data
    np.testing.assert_allclose(yp[0], -yp[1], atol=1e-12)
    with pytest.raises(ValueError):
        ad.instance_norm2d(t(np.ones((1, 1, 1, 1))), ones(1), zeros(1))


# -- pointwise, pooling, linear, loss ----------------------------------------


def test_relu_values_and_zero_subgradient():
    x = t([-1.0, 0.0, 2.0], grad=True)
    with Tape() as tape:
        y = ad.relu(x)
    tape.backward(y)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    np.testing.assert_array_equal(x.grad, [0, 0, 1])
    assert not ad.relu(t(-np.ones(4))).data.any()


def test_max_pool_cases():
    np.testing.assert_array_equal(ad.max_pool2d(t(np.full((1, 1, 5, 5), 2.0))).data, 2.0)
    peak = np.zeros((1, 1, 5, 5))
    peak[0, 0, 2, 2] = 4.0
    out = ad.max_pool2d(t(peak)).data[0, 0]
    np.testing.assert_array_equal(out, [[0, 0, 0], [0, 4, 0], [0, 0, 0]])
    ramp = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ad.max_pool2d(t(ramp), k=2, stride=2, padding=0).data[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(ad.max_pool2d(t(ramp)).data[0, 0], [[5, 7], [13, 15]])


def test_max_pool_routes_ties_to_first_index():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    with Tape() as tape:
        y = ad.max_pool2d(x, k=2, stride=2, padding=0)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_linear_cases():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(ad.linear(t(x), t(np.eye(2))).data, x)
    np.testing.assert_array_equal(ad.linear(t(np.zeros((1, 2))), t(np.ones((3, 2))), t([1.0, 2, 3])).data, [[1, 2, 3]])
    np.testing.assert_array_equal(ad.linear(t(x), t([[1.0, 2.0], [3.0, 4.0]])).data, [[5, 11]])


def test_cross_entropy_values():
    assert abs(ad.softmax_cross_entropy(t(np.zeros((3, 10))), [0, 4, 9]).data - math.log(10)) < 1e-6
    big = np.zeros((1, 5))
    big[0, 2] = 100.0
    assert ad.softmax_cross_entropy(t(big), [2]).data < 1e-6
    assert abs(ad.softmax_cross_entropy(t([[1.0, 2.0, 3.0]]), [2]).data - 0.40761) < 1e-5
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(t(np.zeros((1, 3))), [3])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = t([[1.0, 2.0, 3.0], [0.5, 0.0, -1.0]], grad=True)
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(z, [2, 0])
    tape.backward(loss)
    p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
    np.testing.assert_allclose(z.grad, (p - np.eye(3)[[2, 0]]) / 2)


def test_plumbing_ops():
    x = t(np.random.default_rng(6).normal(size=(2, 6, 3, 3)))
    lo, hi = ad.split_channels(x, 3)
    np.testing.assert_array_equal(ad.concat_channels([lo, hi]).data, x.data)
    np.testing.assert_array_equal(ad.add(x, t(np.zeros(x.shape))).data, x.data)
    a, b = t(np.ones(3), grad=True), t(np.ones(3), grad=True)
    g = np.array([1.0, -2.0, 3.0])
    with Tape() as tape:
        s = ad.add(a, b)
    tape.backward(s, g)
    np.testing.assert_array_equal(a.grad, g)
    np.testing.assert_array_equal(b.grad, g)
    with pytest.raises(ValueError):
        ad.add(t(np.ones(2)), t(np.ones(3)))


def test_shared_input_gradients_accumulate():
    x = t([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ad.add(ad.relu(x), x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_tape_means_no_recording():
    x = t([1.0], grad=True)
    y = ad.relu(x)
    assert not y.requires_grad


def test_parameter_buffers_match_shape():
    p = Parameter(np.zeros((2, 3)))
    assert p.adam_m.shape == p.adam_v.shape == p.data.shape
    assert p.step_count == 0 and p.requires_grad


# -- gradient checker ----------------------------------------------------------


def test_gradcheck_examples_seed_7():
    assert gradient_check(ad.linear, [(4, 3), (2, 3)], seed=7).passed
    conv = gradient_check(lambda x, w: ad.conv2d(x, w, padding=1), [(2, 3, 8, 8), (2, 3, 3, 3)], seed=7, max_coords=200)
    assert conv.passed, conv
    assert gradient_check(ad.relu, [(4, 5)], seed=7, sampler=off_kink_sampler(0.1)).passed


def test_gradcheck_composite_chain():
    def chain(x, w, g, b):
        h = ad.conv2d(x, w, padding=1)
        h = ad.instance_norm2d(h, g, b)
        return ad.relu(h)

    rep = gradient_check(chain, [(2, 2, 5, 5), (3, 2, 3, 3), (3,), (3,)], seed=3, freeze_kinks=True)
    assert rep.passed, rep


def test_gradcheck_detects_wrong_backward():
    def wrong(x):
        return ad._emit(x.data**2, (x,), lambda g: (g * x.data,))  # should be 2x

    rep = gradient_check(wrong, [(5,)], seed=0)
    assert not rep.passed
    assert rep.max_rel_error > 0.1


def test_kink_log_replays_decisions():
    x = t([-0.5, 0.5])
    with KinkLog() as log:
        ad.relu(x)
    with log:
        y = ad.relu(t([0.5, -0.5]))
    np.testing.assert_array_equal(y.data, [0.0, -0.5])


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        x = t(rng.normal(size=(2, 2, 6, 6)), grad=True)
        w = t(rng.normal(size=(3, 2, 3, 3)), grad=True)
        with Tape() as tape:
            out = ad.max_pool2d(ad.relu(ad.conv2d(x, w, padding=1)))
        tape.backward(out)
        return out.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()
