"""Generator/critic pair with a split feature body and linear scoring head.

The critic is stored as (body, w, b): the body maps inputs to a per-sample
feature vector, and the head is a single linear map from features to the
scalar score. Keeping the split explicit is what lets generator training
reweight individual feature channels before the score is formed, and lets
attribution read the pre-pool feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import selection as selection_mod
from . import ufs as ufs_mod
from .errors import ContractError, DimensionError, NumericError, StateError
from .numerics import (
    AdamState,
    Array,
    Network,
    SeededRng,
    adam_step,
    add_grads,
    as_f64,
    backward_pass,
    conv2d,
    dense,
    flatten_grads,
    forward_pass,
    input_grad_param_grads,
    leaky_relu,
    sum_pool,
    tanh,
)

LOSS_KINDS = ("wgan", "wgan_gp", "hinge")


@dataclass(frozen=True)
class LossKind:
    kind: str = "wgan_gp"
    gp_lambda: float = 10.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}")
        if self.gp_lambda < 0:
            raise ContractError(f"gp_lambda must be >= 0, got {self.gp_lambda}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    n_critic: int | None = None  # resolved per loss kind below
    iterations: int = 1000
    seed: int = 0
    loss: LossKind = field(default_factory=LossKind)
    ufs: ufs_mod.UfsConfig | None = None
    selection: selection_mod.SelectionConfig | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")
        if self.n_critic is None:
            self.n_critic = 5 if self.loss.kind in ("wgan", "wgan_gp") else 1
        if self.n_critic < 1:
            raise ContractError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.selection is not None and self.selection.k_start > self.batch_size:
            raise ContractError(
                f"k_start ({self.selection.k_start}) exceeds batch size ({self.batch_size})")


@dataclass
class GeneratorNet:
    latent_dim: int
    net: Network
    data_shape: tuple

    def sample(self, z: Array, want_cache: bool = False):
        y, cache = forward_pass(self.net.specs, self.net.params, z)
        if len(self.data_shape) > 1:
            y = y.reshape((len(y),) + tuple(self.data_shape))
        return (y, cache) if want_cache else y

    def backward(self, cache, upstream: Array):
        if len(self.data_shape) > 1:
            upstream = upstream.reshape(len(upstream), -1)
        grads, _ = backward_pass(self.net.specs, self.net.params, cache, upstream)
        return grads


@dataclass
class DiscriminatorNet:
    body: Network
    w: Array  # (C,)
    b: Array  # (1,)

    @property
    def feature_dim(self) -> int:
        return len(self.w)

    def full_specs(self):
        return self.body.specs + [dense(self.feature_dim, 1)]

    def full_params(self):
        # reshape views share memory with self.w / self.b
        return self.body.params + [{"W": self.w.reshape(1, -1), "b": self.b}]

    def param_list(self):
        return self.body.param_list() + [self.w, self.b]


def score_from_features(d: DiscriminatorNet, features: Array) -> Array:
    """Linear head applied per sample; matches the stacked-network path bitwise."""
    return (features @ d.w.reshape(-1, 1) + d.b)[:, 0]


def discriminator_forward_split(d: DiscriminatorNet, x: Array):
    """Pooled feature matrix and scalar scores for a batch."""
    features, _ = forward_pass(d.body.specs, d.body.params, x)
    return features, score_from_features(d, features)


# --- losses ----------------------------------------------------------------- #


def wgan_d_loss(real_scores: Array, fake_scores: Array) -> float:
    r, f = as_f64(real_scores), as_f64(fake_scores)
    if r.size == 0 or f.size == 0:
        raise ContractError("wgan_d_loss: empty score batch")
    return float(f.mean() - r.mean())


def hinge_d_loss(real_scores: Array, fake_scores: Array) -> float:
    r, f = as_f64(real_scores), as_f64(fake_scores)
    if r.size == 0 or f.size == 0:
        raise ContractError("hinge_d_loss: empty score batch")
    return float(np.maximum(0.0, 1.0 - r).mean() + np.maximum(0.0, 1.0 + f).mean())


def d_loss_score_grads(kind: str, real_scores: Array, fake_scores: Array):
    """d(loss)/d(score) for both branches of the critic loss."""
    r, f = as_f64(real_scores), as_f64(fake_scores)
    if kind in ("wgan", "wgan_gp"):
        return np.full(r.shape, -1.0 / r.size), np.full(f.shape, 1.0 / f.size)
    if kind == "hinge":
        return (-(1.0 - r > 0.0).astype(float) / r.size,
                (1.0 + f > 0.0).astype(float) / f.size)
    raise ContractError(f"unknown loss kind {kind!r}")


# --- gradient penalty -------------------------------------------------------- #


def interpolate_batches(real: Array, fake: Array, rng: SeededRng) -> Array:
    real, fake = as_f64(real), as_f64(fake)
    if real.shape != fake.shape:
        raise DimensionError(f"batch shapes differ: {real.shape} vs {fake.shape}")
    u = rng.uniform((len(real),) + (1,) * (real.ndim - 1))
    return u * real + (1.0 - u) * fake


def penalty_with_grads(d: DiscriminatorNet, x_hat: Array, gp_lambda: float):
    """Two-sided gradient-norm penalty and its parameter gradients.

    The parameter gradients differentiate through the input-gradient
    computation (second-order backward); biases receive none, since the
    input gradient of a piecewise-linear critic does not depend on them.
    """
    specs = d.full_specs()
    params = d.full_params()
    y, cache = forward_pass(specs, params, x_hat)
    ones = np.ones_like(y)
    _, gx, tape = backward_pass(specs, params, cache, ones, want_tape=True)
    axes = tuple(range(1, gx.ndim))
    norms = np.sqrt((gx * gx).sum(axis=axes))
    n = len(x_hat)
    value = gp_lambda * float(((norms - 1.0) ** 2).mean())
    coef = gp_lambda * 2.0 * (norms - 1.0) / (n * np.maximum(norms, 1e-12))
    v = gx * coef.reshape((-1,) + (1,) * (gx.ndim - 1))
    pgrads = input_grad_param_grads(specs, params, cache, tape, v)
    return value, pgrads


def gradient_penalty(d: DiscriminatorNet, real_batch: Array, fake_batch: Array,
                     rng: SeededRng, gp_lambda: float = 10.0) -> float:
    """Penalty value on a freshly interpolated batch (no parameter gradients)."""
    x_hat = interpolate_batches(real_batch, fake_batch, rng)
    value, _ = penalty_with_grads(d, x_hat, gp_lambda)
    return value


# --- objective gradients ------------------------------------------------------ #


def discriminator_objective_grads(d: DiscriminatorNet, real_batch: Array, fake_batch: Array,
                                  loss: LossKind, x_hat: Array | None = None):
    """Critic loss, its gradients, and diagnostics for one real/fake batch pair.

    x_hat must be supplied when the loss carries a gradient penalty so the
    interpolation points are fixed by the caller (and by tests).
    """
    y_r, cache_r = forward_pass(d.body.specs, d.body.params, real_batch)
    y_f, cache_f = forward_pass(d.body.specs, d.body.params, fake_batch)
    s_r = score_from_features(d, y_r)
    s_f = score_from_features(d, y_f)
    if loss.kind in ("wgan", "wgan_gp"):
        value = wgan_d_loss(s_r, s_f)
    else:
        value = hinge_d_loss(s_r, s_f)
    dr, df = d_loss_score_grads(loss.kind, s_r, s_f)
    dw = dr @ y_r + df @ y_f
    db = np.array([dr.sum() + df.sum()])
    grads_r, _ = backward_pass(d.body.specs, d.body.params, cache_r, np.outer(dr, d.w))
    grads_f, _ = backward_pass(d.body.specs, d.body.params, cache_f, np.outer(df, d.w))
    body_grads = add_grads(grads_r, grads_f)
    penalty = 0.0
    if loss.kind == "wgan_gp":
        if x_hat is None:
            raise ContractError("wgan_gp needs interpolated points")
        penalty, pgrads = penalty_with_grads(d, x_hat, loss.gp_lambda)
        body_grads = add_grads(body_grads, pgrads[:-1])
        dw = dw + pgrads[-1]["W"][0]
    diag = {"real_scores": s_r, "fake_scores": s_f, "penalty": penalty,
            "y_real": y_r, "y_fake": y_f}
    return value + penalty, body_grads, dw, db, diag


def generator_feature_grad(w: Array, s: ufs_mod.SuppressionMatrix | None,
                           dscores: Array) -> Array:
    """Upstream gradient on the pooled features: per channel w_c (times the mask)."""
    if s is None:
        return dscores[:, None] * w[None, :]
    return dscores[:, None] * (w[None, :] * s.values)


def generator_objective_grads(gen: GeneratorNet, d: DiscriminatorNet, z: Array,
                              s: ufs_mod.SuppressionMatrix | None = None,
                              sample_weights: Array | None = None):
    """Loss -sum(weights * scores) on masked scores, and generator gradients.

    The mask is treated as a constant: it selects gradients, it is not
    differentiated through.
    """
    fake, gcache = gen.sample(z, want_cache=True)
    y_f, dcache = forward_pass(d.body.specs, d.body.params, fake)
    if s is not None:
        scores = ufs_mod.apply_suppression(y_f, s, d.w, d.b)
    else:
        scores = score_from_features(d, y_f)
    n = len(scores)
    weights = np.full(n, 1.0 / n) if sample_weights is None else sample_weights
    loss = -float(scores @ weights)
    d_y = generator_feature_grad(d.w, s, -weights)
    _, dx = backward_pass(d.body.specs, d.body.params, dcache, d_y)
    ggrads = gen.backward(gcache, dx)
    return loss, ggrads, scores, y_f


# --- training state and steps -------------------------------------------------- #


@dataclass
class TrainerState:
    cfg: TrainConfig
    gen: GeneratorNet
    disc: DiscriminatorNet
    adam_g: AdamState
    adam_d: AdamState
    stats: ufs_mod.FeatureStats
    base_lr: float = 5e-4
    lr_decay: bool = True
    t: int = 0
    diag: dict = field(default_factory=dict)


def init_trainer(cfg: TrainConfig, gen: GeneratorNet, disc: DiscriminatorNet,
                 lr: float = 5e-4, b1: float = 0.5, b2: float = 0.9,
                 lr_decay: bool = True) -> TrainerState:
    """Adam with a linear learning-rate ramp to zero across the run.

    The decayed schedule is what makes the short desk-scale budgets converge
    to tight modes; pass lr_decay=False for a constant rate.
    """
    momentum = cfg.ufs.stats_momentum if cfg.ufs is not None else 0.0
    return TrainerState(
        cfg=cfg,
        gen=gen,
        disc=disc,
        adam_g=AdamState.for_params(gen.net.param_list(), lr, b1, b2),
        adam_d=AdamState.for_params(disc.param_list(), lr, b1, b2),
        stats=ufs_mod.FeatureStats.empty(disc.feature_dim, momentum),
        base_lr=lr,
        lr_decay=lr_decay,
    )


LR_TAPER_START = 0.7  # fraction of the run after which the rate ramps down
LR_TAPER_FLOOR = 0.05


def _current_lr(state: TrainerState) -> float:
    """Constant rate for most of the run, then a linear taper to a small floor.

    The endgame taper is what shrinks the generator's equilibrium jitter
    around the data modes; tapering earlier starves the adversarial game.
    """
    if not state.lr_decay:
        return state.base_lr
    progress = min(1.0, state.t / state.cfg.iterations)
    if progress <= LR_TAPER_START:
        return state.base_lr
    ramp = (progress - LR_TAPER_START) / (1.0 - LR_TAPER_START)
    return state.base_lr * max(LR_TAPER_FLOOR, 1.0 - (1.0 - LR_TAPER_FLOOR) * ramp)


def train_discriminator_step(state: TrainerState, real_batch: Array, rng: SeededRng) -> float:
    """One critic update. The suppression mask is never applied here; the
    step only refreshes the feature statistics the mask will later use."""
    cfg = state.cfg
    d = state.disc
    z = rng.normal((cfg.batch_size, state.gen.latent_dim))
    fake = state.gen.sample(z)
    x_hat = None
    if cfg.loss.kind == "wgan_gp":
        x_hat = interpolate_batches(real_batch, fake, rng)
    loss, body_grads, dw, db, diag = discriminator_objective_grads(
        d, real_batch, fake, cfg.loss, x_hat)
    if not math.isfinite(loss):
        raise NumericError(f"critic loss diverged: {loss}")
    # statistics use the head weights as they were during this forward pass
    ufs_mod.update_stats(state.stats, d.w, diag["y_real"], diag["y_fake"])
    state.adam_d.lr = _current_lr(state)
    adam_step(state.adam_d, d.param_list(), flatten_grads(body_grads) + [dw, db])
    state.diag = {"real_scores": diag["real_scores"], "fake_scores": diag["fake_scores"],
                  "penalty": diag["penalty"]}
    return loss


def train_generator_step(state: TrainerState, rng: SeededRng) -> float:
    """One generator update: optional channel mask, optional sample selection.

    The mask is computed from the current feature statistics and held
    constant during differentiation; selection filters the per-sample scores
    after the masked forward pass, before averaging.
    """
    cfg = state.cfg
    d = state.disc
    z = rng.normal((cfg.batch_size, state.gen.latent_dim))
    fake, gcache = state.gen.sample(z, want_cache=True)
    y_f, dcache = forward_pass(d.body.specs, d.body.params, fake)
    s = None
    if cfg.ufs is not None:
        if state.stats.initialized:
            ucfg = ufs_mod.effective_config(cfg.ufs, state.t, cfg.iterations)
            y_hat = ufs_mod.weighted_features(d.w, y_f)
            ratios = ufs_mod.compute_ratio(state.stats, y_hat, ucfg)
            s = ufs_mod.compute_suppression(ratios, ucfg)
        elif cfg.ufs.strict_stats:
            raise StateError("generator step with empty feature statistics (strict mode)")
    if s is not None:
        scores = ufs_mod.apply_suppression(y_f, s, d.w, d.b)
    else:
        scores = score_from_features(d, y_f)
    if cfg.selection is not None and cfg.selection.mode != "none":
        k = selection_mod.anneal_k(cfg.selection, state.t, cfg.iterations)
        idx = selection_mod.select_indices(scores, k, cfg.selection.mode, rng)
        weights = np.zeros(cfg.batch_size)
        weights[idx] = 1.0 / k
    else:
        weights = np.full(cfg.batch_size, 1.0 / cfg.batch_size)
    loss = -float(scores @ weights)
    d_y = generator_feature_grad(d.w, s, -weights)
    _, dx = backward_pass(d.body.specs, d.body.params, dcache, d_y)
    ggrads = state.gen.backward(gcache, dx)
    state.adam_g.lr = _current_lr(state)
    adam_step(state.adam_g, state.gen.net.param_list(), flatten_grads(ggrads))
    state.t += 1
    state.diag["gen_scores"] = scores
    return loss


# --- default architectures ------------------------------------------------------ #


POINT_LATENT_DIM = 8
IMAGE_LATENT_DIM = 64


def default_models(data_shape, rng: SeededRng):
    """Small CPU-friendly generator/critic pair for 2-d points or 1-channel images.

    Point tasks use leaky MLPs on both sides. Image critics downsample with
    three stride-2 convolutions into 128 channels; the image generator is a
    dense stack with a tanh output reshaped to the image (the layer set has
    no upsampling primitive).
    """
    data_shape = tuple(data_shape)
    if data_shape == (2,):
        gen = GeneratorNet(
            POINT_LATENT_DIM,
            Network.init([dense(POINT_LATENT_DIM, 64), leaky_relu(0.2),
                          dense(64, 64), leaky_relu(0.2), dense(64, 2)], rng),
            data_shape)
        body = Network.init([dense(2, 64), leaky_relu(0.2),
                             dense(64, 64), leaky_relu(0.2),
                             dense(64, 64), leaky_relu(0.2)], rng)
        channels = 64
    elif len(data_shape) == 3 and data_shape[0] == 1:
        h, w = data_shape[1], data_shape[2]
        gen = GeneratorNet(
            IMAGE_LATENT_DIM,
            Network.init([dense(IMAGE_LATENT_DIM, 256), leaky_relu(0.2),
                          dense(256, 256), leaky_relu(0.2),
                          dense(256, h * w), tanh()], rng),
            data_shape)
        body = Network.init([conv2d(1, 32, 3, 2), leaky_relu(0.2),
                             conv2d(32, 64, 3, 2), leaky_relu(0.2),
                             conv2d(64, 128, 3, 2), leaky_relu(0.2),
                             sum_pool()], rng)
        channels = 128
    else:
        raise ContractError(f"no default architecture for data shape {data_shape}")
    disc = DiscriminatorNet(body, rng.normal((channels,), 0.0, 0.02), np.zeros(1))
    return gen, disc
