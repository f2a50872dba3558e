import numpy as np
import pytest
from scipy.signal import correlate2d

from momentumct.nn import (
    AdamState,
    ConvLayer,
    Denoiser,
    NumericalError,
    TrainHyper,
    adam_step,
    conv2d,
    conv2d_backward,
    denoiser_apply,
    denoiser_train_layer,
    init_denoiser,
    mse_loss_and_grads,
    spectral_normalize,
    zero_denoiser,
)


def reference_conv(weight, bias, x):
    """Channel-last 'same' cross-correlation with explicit loops over channels."""
    out = np.zeros(x.shape[:2] + (weight.shape[0],))
    for o in range(weight.shape[0]):
        for c in range(weight.shape[1]):
            out[..., o] += correlate2d(x[..., c], weight[o, c], mode="same")
        out[..., o] += bias[o]
    return out


def reference_conv_t(weight, g):
    out = np.zeros(g.shape[:2] + (weight.shape[1],))
    for o in range(weight.shape[0]):
        for c in range(weight.shape[1]):
            out[..., c] += correlate2d(g[..., o], weight[o, c, ::-1, ::-1], mode="same")
    return out


def oracle_operator_norm(weight, hw, iters=100, seed=7):
    """Independent 100-iteration power method on W^T W, built on scipy correlations."""
    u = np.random.default_rng(seed).standard_normal(hw + (weight.shape[1],))
    for _ in range(iters):
        u = reference_conv_t(weight, reference_conv(weight, np.zeros(weight.shape[0]), u))
        u /= np.linalg.norm(u)
    return np.linalg.norm(reference_conv(weight, np.zeros(weight.shape[0]), u))


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


# --------------------------------------------------------------------------- conv


def test_delta_kernel_is_identity(rng):
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    x = rng.standard_normal((9, 9, 1))
    np.testing.assert_array_equal(conv2d(ConvLayer(w, np.zeros(1)), x), x)


def test_box_kernel_on_constant():
    x = np.full((8, 8, 1), 2.5)
    y = conv2d(ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1)), x)
    assert y[4, 4, 0] == pytest.approx(9 * 2.5)
    assert y[0, 0, 0] == pytest.approx(4 * 2.5)  # zero padding at the corner


def test_conv_matches_reference(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    x = rng.standard_normal((7, 6, 3))
    np.testing.assert_allclose(conv2d(ConvLayer(w, b), x), reference_conv(w, b, x), atol=1e-12)


def test_conv_rejects_bad_shapes(rng):
    layer = ConvLayer(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="channels"):
        conv2d(layer, np.zeros((5, 5, 2)))
    with pytest.raises(ValueError, match="odd"):
        ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))


def _fd_check(f, param, analytic, h=1e-6, n=30, rng=None):
    flat = param.reshape(-1)
    idx = rng.choice(flat.size, size=min(n, flat.size), replace=False)
    errs = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        fd = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        errs.append(abs(fd - a) / max(abs(fd), abs(a), 1e-8))
    return max(errs)


def test_conv_backward_finite_differences(rng):
    layer = ConvLayer(rng.standard_normal((3, 1, 3, 3)), rng.standard_normal(3))
    x = rng.standard_normal((8, 8, 1))
    g = rng.standard_normal((8, 8, 3))
    out, cache = conv2d(layer, x, return_cache=True)
    gx, gw, gb = conv2d_backward(layer, g, cache)

    def obj():
        return float(np.sum(conv2d(layer, x) * g))

    assert _fd_check(obj, x, gx, rng=rng) < 1e-5
    assert _fd_check(obj, layer.weight, gw, rng=rng) < 1e-5
    assert _fd_check(obj, layer.bias, gb, rng=rng) < 1e-5


@pytest.mark.parametrize("variant", ["simplecnn", "dn-rsn"])
def test_denoiser_loss_gradients(rng, variant):
    d = init_denoiser(variant, channels=4, seed=3, dtype=np.float64)
    x = rng.random((2, 8, 8)) * 0.03
    ref = rng.random((2, 8, 8)) * 0.03
    _, grads = mse_loss_and_grads(d, x, ref)
    params = d.params()
    for p, g in zip(params, grads):
        def obj():
            return mse_loss_and_grads(d.with_params(params), x, ref)[0]

        assert _fd_check(obj, p, g, h=1e-6, rng=rng) < 1e-5


# --------------------------------------------------------------------------- denoiser


def test_zero_weights_residual_is_identity(rng):
    x = rng.random((16, 16))
    np.testing.assert_array_equal(denoiser_apply(zero_denoiser("simplecnn", 8), x), x)
    np.testing.assert_array_equal(denoiser_apply(zero_denoiser("simplecnn-rsn", 8), x), x)


def test_zero_weights_dn_is_zero(rng):
    assert not denoiser_apply(zero_denoiser("dn-rsn", 8), rng.random((16, 16))).any()


@pytest.mark.parametrize("n", [32, 64, 512])
def test_output_shape_matches_input(n):
    d = init_denoiser("simplecnn", seed=0)
    x = np.full((n, n), 0.02)
    assert denoiser_apply(d, x).shape == (n, n)


def test_batch_and_single_agree(rng):
    d = init_denoiser("simplecnn", channels=8, seed=2, dtype=np.float64)
    xs = rng.random((3, 12, 12)) * 0.02
    batch = denoiser_apply(d, xs)
    for k in range(3):
        np.testing.assert_allclose(batch[k], denoiser_apply(d, xs[k]), atol=1e-15)


def test_unknown_variant():
    with pytest.raises(ValueError):
        Denoiser([], "wavresnet")


# --------------------------------------------------------------------------- spectral norm


def test_scalar_layer_normalizes_to_one():
    layer = ConvLayer(np.full((1, 1, 1, 1), 3.0), np.zeros(1))
    out = spectral_normalize(layer, (4, 4), power_iters=3)
    assert out.weight[0, 0, 0, 0] == pytest.approx(1.0)


def test_normalization_is_idempotent(rng):
    layer = ConvLayer(rng.standard_normal((4, 2, 3, 3)), np.zeros(4))
    once = spectral_normalize(layer, (8, 8), power_iters=500)
    twice = spectral_normalize(once, (8, 8), power_iters=5)
    np.testing.assert_allclose(twice.weight, once.weight, atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_normalized_layers_have_unit_norm(seed):
    r = np.random.default_rng(seed)
    layer = ConvLayer(r.standard_normal((4, 3, 3, 3)) * r.uniform(0.2, 5), r.standard_normal(4))
    out = spectral_normalize(layer, (10, 10), power_iters=100)
    sigma = oracle_operator_norm(out.weight, (10, 10))
    assert 0.99 <= sigma <= 1.001


def test_oracle_norm_matches_dense_svd(rng):
    w = rng.standard_normal((2, 2, 3, 3))
    n = 5
    cols = []
    for k in range(n * n * 2):
        e = np.zeros(n * n * 2)
        e[k] = 1
        cols.append(reference_conv(w, np.zeros(2), e.reshape(n, n, 2)).ravel())
    dense = np.linalg.norm(np.stack(cols, 1), 2)
    assert oracle_operator_norm(w, (n, n), iters=2000) == pytest.approx(dense, rel=1e-6)


def test_spectral_normalize_validates_iters():
    with pytest.raises(ValueError):
        spectral_normalize(ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1)), (2, 2), 0)


# --------------------------------------------------------------------------- adam


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.5, -2.0])]
    new, state = adam_step(p, [np.zeros(2)], AdamState(), lr=1e-3)
    np.testing.assert_array_equal(new[0], p[0])
    assert state.step == 1


def test_adam_first_step_has_lr_magnitude():
    for g in (0.3, -7.0, 1e-3):
        new, _ = adam_step([np.array([1.0])], [np.array([g])], AdamState(), lr=1e-3)
        assert abs(new[0][0] - 1.0) == pytest.approx(1e-3, rel=1e-4)
        assert np.sign(1.0 - new[0][0]) == np.sign(g)


def test_adam_two_steps_by_hand():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    g1, g2 = 0.5, -0.2
    m1 = (1 - b1) * g1
    v1 = (1 - b2) * g1**2
    x1 = 2.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g2
    v2 = b2 * v1 + (1 - b2) * g2**2
    x2 = x1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    p, s = adam_step([np.array(2.0)], [np.array(g1)], AdamState(), lr)
    p, s = adam_step(p, [np.array(g2)], s, lr)
    assert float(p[0]) == pytest.approx(x2, rel=1e-14)


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericalError):
        adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], AdamState(), 1e-3)


# --------------------------------------------------------------------------- training


def test_learning_rate_schedule():
    h = TrainHyper()
    assert [h.lr_at(e) for e in (0, 9)] == [1e-3, 1e-3]
    assert h.lr_at(10) == pytest.approx(9e-4)
    assert h.lr_at(19) == pytest.approx(9e-4)
    assert h.lr_at(20) == pytest.approx(8.1e-4)
    assert (h.epochs, h.batch_size) == (100, 5)


def test_overfit_single_pair():
    r = np.random.default_rng(0)
    ref = np.clip(np.kron(r.random((4, 4)), np.ones((4, 4))) * 0.03, 0, None)
    noisy = ref + 0.004 * r.standard_normal(ref.shape)
    d0 = init_denoiser("simplecnn", channels=16, seed=1)
    init_loss = mse_loss_and_grads(d0, noisy[None], ref[None])[0]
    # one pair means one step per epoch; keep the rate constant over the 2000 steps
    d, trace = denoiser_train_layer([(noisy, ref)], d0, TrainHyper(epochs=2000, decay=1.0), seed=0)
    assert trace[-1] < 0.01 * init_loss
    assert np.all(np.isfinite(trace))


def test_training_is_deterministic(rng):
    pairs = [(rng.random((12, 12)) * 0.02, rng.random((12, 12)) * 0.02) for _ in range(7)]
    d0 = init_denoiser("simplecnn-rsn", channels=8, seed=5)
    a, ta = denoiser_train_layer(pairs, d0, TrainHyper(epochs=3), seed=11)
    b, tb = denoiser_train_layer(pairs, d0, TrainHyper(epochs=3), seed=11)
    assert ta == tb
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        denoiser_train_layer([], init_denoiser(channels=4))


@pytest.mark.parametrize("variant", ["simplecnn-rsn", "dn-rsn"])
def test_rsn_training_keeps_layers_nonexpansive(rng, variant):
    pairs = [(rng.random((10, 10)) * 0.03, rng.random((10, 10)) * 0.03) for _ in range(5)]
    d, _ = denoiser_train_layer(pairs, init_denoiser(variant, channels=4, seed=0),
                                TrainHyper(epochs=40), seed=0)
    for layer in d.layers:
        assert oracle_operator_norm(layer.weight.astype(np.float64), (10, 10)) <= 1 + 1e-3


def test_flush_subnormal_zeroes_only_subnormals():
    from momentumct.nn import flush_subnormal

    tiny = np.finfo(np.float32).tiny
    a = np.array([tiny / 4, -tiny / 2, tiny, 1e-3, 0.0], dtype=np.float32)
    out = flush_subnormal(a)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, [0.0, 0.0, a[2], a[3], 0.0])
