import math
from dataclasses import replace

import numpy as np
import pytest

import momentumct.momentum as mm
from momentumct.data import NoiseModel, build_dataset
from momentumct.nn import ConvLayer, Denoiser, TrainHyper, denoiser_train_layer, init_denoiser, zero_denoiser
from momentumct.momentum import (
    LayerError,
    MomentumState,
    NetConfig,
    ReconProblem,
    extrapolate,
    load_checkpoints,
    mbir_update,
    momentum_coeffs,
    momentum_layer,
    pwls_cost,
    refine,
    run_momentum_net,
    save_denoiser,
    select_beta,
    train_momentum_net,
)
from momentumct.projector import compute_majorizer_diag


class Const:
    """Stand-in denoiser returning a fixed image."""

    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.value)


# --------------------------------------------------------------------------- refine


def test_refine_identity_denoiser(rng):
    x = rng.random((8, 8))
    for rho in (0.1, 0.5, 1.0):
        np.testing.assert_allclose(refine(x, zero_denoiser("simplecnn", 4), rho), x, rtol=0, atol=1e-15)


def test_refine_half_mix_of_constant():
    np.testing.assert_allclose(refine(np.zeros((4, 4)), Const(0.3), 0.5), 0.15)


def test_refine_is_pointwise_between(rng):
    d = init_denoiser("simplecnn", channels=4, seed=0, dtype=np.float64)
    for _ in range(20):
        x = rng.random((8, 8)) * 0.04
        rho = rng.uniform(0.01, 1)
        dx = d(x)
        z = refine(x, d, rho)
        assert np.all(z >= np.minimum(x, dx) - 1e-15)
        assert np.all(z <= np.maximum(x, dx) + 1e-15)


def test_refine_rejects_rho():
    with pytest.raises(ValueError):
        refine(np.zeros((2, 2)), Const(0), 0.0)


# --------------------------------------------------------------------------- momentum


def test_momentum_first_steps():
    t, m = momentum_coeffs(1.0)
    assert t == pytest.approx((1 + math.sqrt(5)) / 2) and m == 0.0
    t2, m2 = momentum_coeffs(1.618034)
    assert t2 == pytest.approx(2.193527, abs=1e-6)
    # recurrence oracle in 40-digit decimal arithmetic gives 0.2817535
    assert m2 == pytest.approx(0.2817535, abs=1e-6)


def test_momentum_growth_bound():
    t = 1.0
    for l in range(1, 101):
        t_new, m = momentum_coeffs(t)
        assert t_new > t and 0 <= m < 1
        assert t_new >= (l + 2) / 2
        t = t_new
    assert t >= 51


def test_momentum_rejects_small_t():
    with pytest.raises(ValueError):
        momentum_coeffs(0.5)


def test_extrapolate_cases(rng):
    x, xp = rng.random((5, 5)), rng.random((5, 5))
    np.testing.assert_array_equal(extrapolate(x, xp, 0.0), x)
    np.testing.assert_array_equal(extrapolate(x, x, 0.7, 0.9), x)
    assert extrapolate(np.array(2.0), np.array(1.0), 0.5, 1.0) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        extrapolate(x, np.zeros((2, 2)), 0.5)


def test_delta_is_one_minus_eps():
    assert mm.DELTA == 1.0 - np.finfo(float).eps < 1.0


# --------------------------------------------------------------------------- beta / mbir


def test_select_beta_examples(unit_geom, tiny_geom, rng):
    assert select_beta(unit_geom, np.full((1, 1), 1190.0), 119.0) == pytest.approx(10.0)
    assert select_beta(unit_geom, np.ones((1, 1)), 119.0) == pytest.approx(1 / 119)
    w = rng.uniform(0.5, 2, tiny_geom.sino_shape)
    assert select_beta(tiny_geom, 3.0 * w, 119.0) == pytest.approx(3.0 * select_beta(tiny_geom, w, 119.0), rel=1e-8)
    with pytest.raises(ValueError):
        select_beta(tiny_geom, np.zeros(tiny_geom.sino_shape), 119.0)
    with pytest.raises(ValueError):
        select_beta(tiny_geom, w, 0.0)


def test_mbir_zero_weights_returns_prior(tiny_geom, rng):
    z = rng.standard_normal(tiny_geom.shape)
    x_ext = rng.random(tiny_geom.shape)
    w = np.zeros(tiny_geom.sino_shape)
    y = rng.random(tiny_geom.sino_shape)
    out = mbir_update(tiny_geom, y, w, z, x_ext, 0.7)
    np.testing.assert_allclose(out, np.maximum(z, 0), atol=1e-15)


def test_mbir_scalar_case(unit_geom):
    out = mbir_update(unit_geom, np.full((1, 1), 2.0), np.ones((1, 1)), np.full((1, 1), 3.0),
                      np.zeros((1, 1)), 1.0)
    assert out[0, 0] == pytest.approx(2.5)
    assert out[0, 0] == pytest.approx((1 * 2 + 1 * 3) / (1 + 1))


def test_mbir_descent_on_random_instances(tiny_geom):
    r = np.random.default_rng(99)
    for _ in range(30):
        y = r.uniform(0, 3, tiny_geom.sino_shape)
        w = r.uniform(0, 2, tiny_geom.sino_shape)
        z = r.uniform(-0.1, 0.3, tiny_geom.shape)
        x_ext = r.uniform(0, 0.3, tiny_geom.shape)
        beta = r.uniform(0.01, 10)
        out = mbir_update(tiny_geom, y, w, z, x_ext, beta)
        assert out.min() >= 0
        assert pwls_cost(tiny_geom, y, w, z, out, beta) <= pwls_cost(tiny_geom, y, w, z, x_ext, beta) + 1e-12


def test_mbir_rejects_bad_inputs(tiny_geom):
    y = np.zeros(tiny_geom.sino_shape)
    with pytest.raises(ValueError):
        mbir_update(tiny_geom, y, y, np.zeros(tiny_geom.shape), np.zeros(tiny_geom.shape), 0.0)
    with pytest.raises(ValueError):
        mbir_update(tiny_geom, y, y, np.zeros((2, 2)), np.zeros(tiny_geom.shape), 1.0)


# --------------------------------------------------------------------------- network


@pytest.fixture(scope="module")
def problem(small_geom):
    ds = build_dataset(small_geom, NoiseModel(seed=1), [1, 2], [3], 4, 1)
    return ds


def _problem(small_geom, sample, chi=119.0):
    return ReconProblem.from_sinogram(small_geom, sample.y, NoiseModel(seed=1), chi)


def test_zero_layers_returns_input(small_geom, problem):
    s = problem.samples[0]
    x, trace = run_momentum_net(NetConfig(n_layers=0), [], _problem(small_geom, s), s.fbp, ref=s.ref)
    np.testing.assert_array_equal(x, s.fbp)
    assert trace.rmse == []


def test_identity_denoisers_decrease_data_fit(small_geom, problem):
    s = problem.samples[0]
    p = _problem(small_geom, s)
    cfg = NetConfig(n_layers=15, rho=1.0, use_momentum=False)
    dens = [zero_denoiser("simplecnn", 4)] * 15
    _, trace = run_momentum_net(cfg, dens, p, s.fbp, keep_images=True)
    costs = [pwls_cost(small_geom, p.y, p.w, x, x, p.beta) for x in [s.fbp] + trace.images]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(costs, costs[1:]))


def test_iterates_nonnegative_and_deterministic(small_geom, problem):
    s = problem.samples[1]
    p = _problem(small_geom, s)
    dens = [init_denoiser("simplecnn", channels=4, seed=k) for k in range(6)]
    cfg = NetConfig(n_layers=6)
    a, ta = run_momentum_net(cfg, dens, p, s.fbp, ref=s.ref, keep_images=True)
    b, tb = run_momentum_net(cfg, dens, p, s.fbp, ref=s.ref)
    assert np.array_equal(a, b) and ta.rmse == tb.rmse and len(ta.rmse) == 6
    assert all(img.min() >= 0 for img in ta.images)


def test_momentum_state_sequence(small_geom, problem):
    s = problem.samples[0]
    p = _problem(small_geom, s)
    st = MomentumState.start(s.fbp)
    ts = [st.t]
    for _ in range(4):
        st, _ = momentum_layer(st, zero_denoiser("simplecnn", 4), p, NetConfig(n_layers=4))
        ts.append(st.t)
    # layer 0 has no momentum, so t starts moving at layer 1
    np.testing.assert_allclose(ts[1:], [1.0, 1.618034, 2.193527, 2.749791], atol=1e-6)


def test_layer_error_carries_index(small_geom, problem):
    s = problem.samples[0]
    bad = Const(np.nan)
    dens = [zero_denoiser("simplecnn", 4), zero_denoiser("simplecnn", 4), bad]
    with pytest.raises(LayerError) as info:
        run_momentum_net(NetConfig(n_layers=3), dens, _problem(small_geom, s), s.fbp)
    assert info.value.layer == 2


def test_denoiser_count_must_match(small_geom, problem):
    s = problem.samples[0]
    with pytest.raises(ValueError):
        run_momentum_net(NetConfig(n_layers=2), [], _problem(small_geom, s), s.fbp)


# --------------------------------------------------------------------------- training


def test_single_layer_training_matches_definition(small_geom, problem, tmp_path):
    train = problem.split("train")
    cfg = NetConfig(n_layers=1, seed=3)
    hyper = TrainHyper(epochs=2)
    dens, _ = train_momentum_net(train, small_geom, problem.noise, cfg, hyper=hyper, channels=4,
                                 checkpoint_dir=tmp_path)
    direct, _ = denoiser_train_layer([(s.fbp, s.ref) for s in train],
                                     init_denoiser("simplecnn", channels=4, seed=3), hyper, seed=3, tag=0)
    for a, b in zip(dens[0].params(), direct.params()):
        assert np.array_equal(a, b)
    loaded = load_checkpoints(tmp_path)
    assert len(loaded) == 1
    for a, b in zip(loaded[0].params(), direct.params()):
        assert np.array_equal(a, b)


def test_layers_warm_start(small_geom, problem, monkeypatch):
    seen = []
    real = mm.denoiser_train_layer

    def spy(pairs, init, hyper, seed, tag):
        seen.append([p.copy() for p in init.params()])
        out = real(pairs, init, hyper, seed=seed, tag=tag)
        seen.append([p.copy() for p in out[0].params()])
        return out

    monkeypatch.setattr(mm, "denoiser_train_layer", spy)
    train_momentum_net(problem.split("train"), small_geom, problem.noise, NetConfig(n_layers=3),
                       hyper=TrainHyper(epochs=1), channels=4)
    for l in range(2):
        final_l, init_next = seen[2 * l + 1], seen[2 * l + 2]
        assert all(np.array_equal(a, b) for a, b in zip(final_l, init_next))


def test_training_requires_samples(small_geom):
    with pytest.raises(ValueError):
        train_momentum_net([], small_geom, NoiseModel(), NetConfig(n_layers=1))


def test_checkpoint_round_trip_with_rsn_state(tmp_path, rng):
    d = init_denoiser("dn-rsn", channels=4, seed=0)
    from momentumct.nn import normalize_all

    d = normalize_all(d, (8, 8), 5)
    save_denoiser(d, tmp_path / "layer_0", 0, 7)
    back = load_checkpoints(tmp_path)[0]
    assert back.variant == "dn-rsn"
    for a, b in zip(d.layers, back.layers):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.rsn_state[0], b.rsn_state[0])
