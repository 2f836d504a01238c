import numpy as np
import pytest

from helpers import fd_param_grads, grad_close, small_conv_disc, small_gen, small_mlp_disc
from ufs_lab import gan, ufs
from ufs_lab import numerics as nm
from ufs_lab.errors import ContractError, StateError


# --- forward split ------------------------------------------------------------ #


def test_forward_split_ones_head_sums_features():
    rng = nm.SeededRng(1)
    d = small_mlp_disc(rng)
    d.w[:] = 1.0
    d.b[:] = 0.0
    x = rng.normal((5, 2))
    features, scores = gan.discriminator_forward_split(d, x)
    assert np.allclose(scores, features.sum(axis=1))


def test_forward_split_zero_input_linear_body():
    rng = nm.SeededRng(2)
    body = nm.Network.init([nm.dense(2, 4), nm.dense(4, 3)], rng, 0.5)
    d = gan.DiscriminatorNet(body, rng.normal((3,)), np.array([1.25]))
    features, scores = gan.discriminator_forward_split(d, np.zeros((4, 2)))
    assert np.array_equal(features, np.zeros((4, 3)))
    assert np.allclose(scores, 1.25)


def test_forward_split_matches_stacked_network_exactly():
    rng = nm.SeededRng(3)
    d = small_mlp_disc(rng)
    x = rng.normal((6, 2))
    _, scores = gan.discriminator_forward_split(d, x)
    stacked, _ = nm.forward_pass(d.full_specs(), d.full_params(), x)
    assert np.array_equal(scores, stacked[:, 0])


# --- losses --------------------------------------------------------------------- #


def test_wgan_d_loss_hand():
    assert gan.wgan_d_loss([1.0, 3.0], [0.0, 2.0]) == -1.0


def test_wgan_d_loss_equal_batches():
    assert gan.wgan_d_loss([0.5, -0.5], [0.5, -0.5]) == 0.0


def test_wgan_d_loss_loop_oracle():
    rng = nm.SeededRng(4)
    r, f = rng.normal((9,)), rng.normal((11,))
    expect = sum(f) / 11 - sum(r) / 9
    assert abs(gan.wgan_d_loss(r, f) - expect) < 1e-12


def test_wgan_d_loss_empty_batch():
    with pytest.raises(ContractError):
        gan.wgan_d_loss([], [1.0])


def test_hinge_d_loss_hand():
    assert gan.hinge_d_loss([2.0, 0.0], [-2.0, 0.0]) == 1.0


def test_hinge_d_loss_saturated_is_zero():
    assert gan.hinge_d_loss([1.0, 2.5], [-1.0, -3.0]) == 0.0


def test_hinge_d_loss_loop_oracle():
    rng = nm.SeededRng(5)
    r, f = rng.normal((7,)), rng.normal((7,))
    expect = sum(max(0.0, 1.0 - v) for v in r) / 7 + sum(max(0.0, 1.0 + v) for v in f) / 7
    assert abs(gan.hinge_d_loss(r, f) - expect) < 1e-12


@pytest.mark.parametrize("kind", ["wgan", "hinge"])
def test_loss_score_grads_match_finite_differences(kind):
    rng = nm.SeededRng(6)
    r, f = rng.normal((5,)), rng.normal((5,))
    dr, df = gan.d_loss_score_grads(kind, r, f)
    loss = gan.wgan_d_loss if kind == "wgan" else gan.hinge_d_loss

    fd_r = nm.finite_diff_grad(lambda v: loss(v, f), r)
    fd_f = nm.finite_diff_grad(lambda v: loss(r, v), f)
    assert grad_close(dr, fd_r, 1e-6)
    assert grad_close(df, fd_f, 1e-6)


# --- gradient penalty -------------------------------------------------------------- #


def test_penalty_linear_discriminator_closed_form():
    rng = nm.SeededRng(7)
    body = nm.Network.init([nm.dense(2, 4)], rng, 0.5)
    d = gan.DiscriminatorNet(body, rng.normal((4,), 0.0, 0.5), np.zeros(1))
    a = body.params[0]["W"].T @ d.w
    expected = 10.0 * (np.linalg.norm(a) - 1.0) ** 2
    got = gan.gradient_penalty(d, rng.normal((8, 2)), rng.normal((8, 2)), rng, 10.0)
    assert abs(got - expected) < 1e-12


def test_penalty_unit_gradient_is_zero():
    rng = nm.SeededRng(8)
    body = nm.Network.init([nm.dense(2, 4)], rng, 0.5)
    d = gan.DiscriminatorNet(body, rng.normal((4,), 0.0, 0.5), np.zeros(1))
    a = body.params[0]["W"].T @ d.w
    d.w /= np.linalg.norm(a)  # rescale so the input gradient has unit norm
    got = gan.gradient_penalty(d, rng.normal((8, 2)), rng.normal((8, 2)), rng, 10.0)
    assert got < 1e-20


def test_penalty_input_gradient_matches_finite_differences():
    rng = nm.SeededRng(9)
    d = small_mlp_disc(rng)
    x = rng.normal((4, 2))
    specs, params = d.full_specs(), d.full_params()
    y, cache = nm.forward_pass(specs, params, x)
    _, gx = nm.backward_pass(specs, params, cache, np.ones_like(y))

    def score_sum(xv):
        out, _ = nm.forward_pass(specs, params, xv)
        return float(out.sum())

    assert grad_close(gx, nm.finite_diff_grad(score_sum, x))


@pytest.mark.parametrize("make_disc", [small_mlp_disc, small_conv_disc])
def test_penalty_param_grads_match_finite_differences(make_disc):
    rng = nm.SeededRng(10)
    d = make_disc(rng)
    shape = (4, 2) if make_disc is small_mlp_disc else (3, 1, 9, 9)
    x_hat = rng.normal(shape)
    _, pgrads = gan.penalty_with_grads(d, x_hat, 10.0)
    specs, params = d.full_specs(), d.full_params()

    def penalty_value():
        y, cache = nm.forward_pass(specs, params, x_hat)
        _, gx = nm.backward_pass(specs, params, cache, np.ones_like(y))
        norms = np.sqrt((gx * gx).sum(axis=tuple(range(1, gx.ndim))))
        return 10.0 * float(((norms - 1.0) ** 2).mean())

    for layer_params, layer_grads in zip(params, pgrads):
        arrays = list(layer_params.values())
        fd = fd_param_grads(penalty_value, arrays)
        for key, want in zip(layer_params, fd):
            assert grad_close(layer_grads[key], want)


# --- full critic objective ------------------------------------------------------------ #


@pytest.mark.parametrize("kind", ["wgan", "wgan_gp", "hinge"])
def test_discriminator_objective_grads_match_finite_differences(kind):
    rng = nm.SeededRng(11)
    d = small_mlp_disc(rng)
    real = rng.normal((5, 2))
    fake = rng.normal((5, 2))
    loss_cfg = gan.LossKind(kind)
    x_hat = gan.interpolate_batches(real, fake, rng) if kind == "wgan_gp" else None
    value, body_grads, dw, db, _ = gan.discriminator_objective_grads(d, real, fake, loss_cfg, x_hat)

    def loss_value():
        y_r, _ = nm.forward_pass(d.body.specs, d.body.params, real)
        y_f, _ = nm.forward_pass(d.body.specs, d.body.params, fake)
        s_r = gan.score_from_features(d, y_r)
        s_f = gan.score_from_features(d, y_f)
        base = gan.wgan_d_loss(s_r, s_f) if kind != "hinge" else gan.hinge_d_loss(s_r, s_f)
        if kind == "wgan_gp":
            y, cache = nm.forward_pass(d.full_specs(), d.full_params(), x_hat)
            _, gx = nm.backward_pass(d.full_specs(), d.full_params(), cache, np.ones_like(y))
            norms = np.sqrt((gx * gx).sum(axis=1))
            base += loss_cfg.gp_lambda * float(((norms - 1.0) ** 2).mean())
        return base

    assert abs(loss_value() - value) < 1e-12
    flat = nm.flatten_grads(body_grads) + [dw, db]
    fd = fd_param_grads(loss_value, d.body.param_list() + [d.w, d.b])
    for got, want in zip(flat, fd):
        assert grad_close(got, want)


# --- generator objective ----------------------------------------------------------------- #


def test_generator_feature_grad_is_w_times_mask_exactly():
    rng = nm.SeededRng(12)
    w = rng.normal((6,))
    s = ufs.SuppressionMatrix(rng.uniform((4, 6)))
    got = gan.generator_feature_grad(w, s, np.ones(4))
    assert np.array_equal(got, w[None, :] * s.values)
    plain = gan.generator_feature_grad(w, None, np.ones(4))
    assert np.array_equal(plain, np.broadcast_to(w, (4, 6)))


def test_generator_grads_match_finite_differences_masked():
    rng = nm.SeededRng(13)
    gen = small_gen(rng)
    d = small_mlp_disc(rng)
    z = rng.normal((5, 4))
    s = ufs.SuppressionMatrix(rng.uniform((5, 6)))  # frozen mask
    _, ggrads, _, _ = gan.generator_objective_grads(gen, d, z, s)

    def loss_value():
        fake = gen.sample(z)
        y_f, _ = nm.forward_pass(d.body.specs, d.body.params, fake)
        scores = ufs.apply_suppression(y_f, s, d.w, d.b)
        return -float(scores.mean())

    fd = fd_param_grads(loss_value, gen.net.param_list())
    for got, want in zip(nm.flatten_grads(ggrads), fd):
        assert grad_close(got, want)


def test_generator_grads_respect_sample_weights():
    rng = nm.SeededRng(14)
    gen = small_gen(rng)
    d = small_mlp_disc(rng)
    z = rng.normal((6, 4))
    weights = np.zeros(6)
    weights[[1, 4]] = 0.5
    loss, ggrads, scores, _ = gan.generator_objective_grads(gen, d, z, None, weights)
    assert abs(loss + 0.5 * (scores[1] + scores[4])) < 1e-12

    def loss_value():
        fake = gen.sample(z)
        y_f, _ = nm.forward_pass(d.body.specs, d.body.params, fake)
        s = gan.score_from_features(d, y_f)
        return -0.5 * float(s[1] + s[4])

    fd = fd_param_grads(loss_value, gen.net.param_list())
    for got, want in zip(nm.flatten_grads(ggrads), fd):
        assert grad_close(got, want)


# --- training steps -------------------------------------------------------------------------- #


def make_trainer(seed=0, **cfg_kwargs):
    cfg = gan.TrainConfig(batch_size=8, iterations=10, seed=seed, **cfg_kwargs)
    rng = nm.SeededRng(seed)
    gen, disc = gan.default_models((2,), rng)
    return gan.init_trainer(cfg, gen, disc), nm.SeededRng(seed).derive(99)


def test_discriminator_step_initializes_stats():
    state, rng = make_trainer(loss=gan.LossKind("wgan"))
    assert not state.stats.initialized
    gan.train_discriminator_step(state, rng.normal((8, 2)), rng)
    assert state.stats.initialized


def test_discriminator_step_identical_with_and_without_ufs():
    ucfg = ufs.UfsConfig(0.0, 1.0, 1.0)
    state_a, rng_a = make_trainer(loss=gan.LossKind("wgan_gp"), ufs=None)
    state_b, rng_b = make_trainer(loss=gan.LossKind("wgan_gp"), ufs=ucfg)
    real = nm.SeededRng(5).normal((8, 2))
    gan.train_discriminator_step(state_a, real, rng_a)
    gan.train_discriminator_step(state_b, real, rng_b)
    for pa, pb in zip(state_a.disc.param_list(), state_b.disc.param_list()):
        assert np.array_equal(pa, pb)


def test_discriminator_step_loss_recomputes_from_logged_scores():
    state, rng = make_trainer(loss=gan.LossKind("wgan_gp"))
    loss = gan.train_discriminator_step(state, rng.normal((8, 2)), rng)
    diag = state.diag
    recomputed = gan.wgan_d_loss(diag["real_scores"], diag["fake_scores"]) + diag["penalty"]
    assert loss == recomputed


def test_generator_step_with_inert_mask_matches_baseline():
    # before any critic step the stats are empty, so the masked path is skipped
    state_a, rng_a = make_trainer(loss=gan.LossKind("wgan"), ufs=None)
    state_b, rng_b = make_trainer(loss=gan.LossKind("wgan"),
                                  ufs=ufs.UfsConfig(0.0, 1.0, 1.0))
    la = gan.train_generator_step(state_a, rng_a)
    lb = gan.train_generator_step(state_b, rng_b)
    assert la == lb
    for pa, pb in zip(state_a.gen.net.param_list(), state_b.gen.net.param_list()):
        assert np.array_equal(pa, pb)


def test_generator_step_strict_mode_needs_stats():
    state, rng = make_trainer(loss=gan.LossKind("wgan"),
                              ufs=ufs.UfsConfig(0.0, 1.0, 1.0, strict_stats=True))
    with pytest.raises(StateError):
        gan.train_generator_step(state, rng)


def test_generator_step_score_linearity_identity():
    # scores decompose as sum_c w_c S_c y_c + b for every sample
    state, rng = make_trainer(loss=gan.LossKind("wgan"), ufs=ufs.UfsConfig(0.5, 1.0, 1.5))
    gan.train_discriminator_step(state, rng.normal((8, 2)), rng)
    z = nm.SeededRng(77).normal((8, state.gen.latent_dim))
    fake = state.gen.sample(z)
    y_f, _ = nm.forward_pass(state.disc.body.specs, state.disc.body.params, fake)
    ucfg = state.cfg.ufs
    y_hat = ufs.weighted_features(state.disc.w, y_f)
    s = ufs.compute_suppression(ufs.compute_ratio(state.stats, y_hat, ucfg), ucfg)
    scores = ufs.apply_suppression(y_f, s, state.disc.w, state.disc.b)
    manual = (state.disc.w[None, :] * s.values * y_f).sum(axis=1) + state.disc.b[0]
    assert np.abs(scores - manual).max() < 1e-10


def test_n_critic_default_depends_on_loss():
    assert gan.TrainConfig(loss=gan.LossKind("wgan_gp")).n_critic == 5
    assert gan.TrainConfig(loss=gan.LossKind("hinge")).n_critic == 1


def test_selection_k_start_bounded_by_batch():
    from ufs_lab.selection import SelectionConfig
    with pytest.raises(ContractError):
        gan.TrainConfig(batch_size=8, selection=SelectionConfig("top", 64, 32))


def test_image_generator_shape_and_tanh_range():
    rng = nm.SeededRng(15)
    gen, disc = gan.default_models((1, 16, 16), rng)
    z = rng.normal((3, gen.latent_dim))
    x = gen.sample(z)
    assert x.shape == (3, 1, 16, 16)
    assert np.abs(x).max() <= 1.0
    features, scores = gan.discriminator_forward_split(disc, x)
    assert features.shape == (3, 128)
    assert scores.shape == (3,)
