"""Per-sample, per-channel suppression of unrealistic critic features.

During critic training we track the mean weighted feature vectors of real
and fake batches. During generator training each fake sample's weighted
feature vector is compared channel by channel against those means: the
distance from the real mean, expressed as a fraction of the real-fake
margin, is turned into a piecewise-linear weight that scales the channel's
contribution to the critic score. Channels that look real keep their full
weight; channels that sit at or beyond the fake mean are attenuated (or
zeroed, depending on the hyperparameters).

The weight for a channel with distance ratio r is

    epsilon - clip(r, alpha, beta)

so all weights live in [epsilon - beta, epsilon - alpha]. A configuration
with epsilon - beta = 0 zeroes the worst channels ("dismission"); one with
epsilon - beta > 0 merely scales them down ("suppression").
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DimensionError, StateError
from .numerics import Array, as_f64


@dataclass
class FeatureStats:
    """Running means of weighted real/fake features, one entry per channel."""

    mu_real: Array
    mu_fake: Array
    momentum: float = 0.0
    initialized: bool = False

    @classmethod
    def empty(cls, channels: int, momentum: float = 0.0) -> "FeatureStats":
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"momentum must be in [0, 1], got {momentum}")
        return cls(np.zeros(channels), np.zeros(channels), momentum, False)

    @property
    def channels(self) -> int:
        return len(self.mu_real)


@dataclass(frozen=True)
class BetaAnneal:
    beta_start: float
    beta_end: float
    anneal_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ContractError(f"anneal_fraction must be in (0, 1], got {self.anneal_fraction}")


@dataclass(frozen=True)
class UfsConfig:
    """Suppression hyperparameters.

    alpha / beta clamp the distance ratio, epsilon shifts it into the final
    weight; gamma is the near-real guard on the distance itself, and
    denom_floor keeps the margin division finite. near_real_ratio is the
    ratio assigned when |distance| < gamma. stats_momentum feeds the
    FeatureStats EMA (0 keeps only the latest critic batch); strict_stats
    makes generator steps fail instead of silently skipping the mask while
    the stats are still empty.
    """

    alpha: float
    beta: float
    epsilon: float
    gamma: float = 1e-4
    denom_floor: float = 1e-8
    near_real_ratio: float = 1.0
    beta_anneal: BetaAnneal | None = None
    stats_momentum: float = 0.0
    strict_stats: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError(f"gamma must be >= 0, got {self.gamma}")
        if self.denom_floor <= 0:
            raise ContractError(f"denom_floor must be > 0, got {self.denom_floor}")
        betas = [self.beta]
        if self.beta_anneal is not None:
            betas += [self.beta_anneal.beta_start, self.beta_anneal.beta_end]
        for b in betas:
            if self.alpha > b:
                raise ContractError(f"alpha ({self.alpha}) must not exceed beta ({b})")
            if self.epsilon - b < 0:
                raise ContractError(
                    f"epsilon - beta must be >= 0 (got epsilon={self.epsilon}, beta={b})")


@dataclass(frozen=True)
class SuppressionMatrix:
    """Per-sample x per-channel suppression weights in [eps - beta, eps - alpha]."""

    values: Array


def update_stats(stats: FeatureStats, w: Array, y_real: Array, y_fake: Array) -> FeatureStats:
    """Fold one critic batch into the real/fake weighted-feature means.

    The weighting is an elementwise product with the head weight vector,
    not a weighted sum, so each channel keeps its own mean.
    """
    w = as_f64(w)
    y_real = as_f64(y_real)
    y_fake = as_f64(y_fake)
    if w.ndim != 1 or y_real.ndim != 2 or y_fake.ndim != 2:
        raise DimensionError("update_stats expects w (C,) and feature matrices (n, C)")
    if y_real.shape[1] != w.size or y_fake.shape[1] != w.size:
        raise DimensionError(
            f"feature width mismatch: w has {w.size} channels, features have "
            f"{y_real.shape[1]} / {y_fake.shape[1]}")
    if len(y_real) < 1 or len(y_fake) < 1:
        raise ContractError("update_stats needs at least one sample per batch")
    m_real = (w[None, :] * y_real).mean(axis=0)
    m_fake = (w[None, :] * y_fake).mean(axis=0)
    if stats.momentum == 0.0 or not stats.initialized:
        stats.mu_real = m_real
        stats.mu_fake = m_fake
    else:
        stats.mu_real = stats.momentum * stats.mu_real + (1.0 - stats.momentum) * m_real
        stats.mu_fake = stats.momentum * stats.mu_fake + (1.0 - stats.momentum) * m_fake
    stats.initialized = True
    return stats


def weighted_features(w: Array, y_fake: Array) -> Array:
    """Per-sample elementwise product with the head weights; no batch averaging."""
    w = as_f64(w)
    y_fake = as_f64(y_fake)
    if w.ndim != 1 or y_fake.ndim != 2 or y_fake.shape[1] != w.size:
        raise DimensionError(f"weighted_features: w {w.shape} does not match features {y_fake.shape}")
    return w[None, :] * y_fake


def compute_ratio(stats: FeatureStats, y_hat: Array, cfg: UfsConfig) -> Array:
    """Distance of each weighted feature from the real mean as a margin fraction.

    Channels whose distance is under gamma get near_real_ratio instead of the
    quotient; the margin magnitude is floored (sign preserved, +0 counts as
    positive) so the division never blows up.
    """
    if not stats.initialized:
        raise StateError("compute_ratio called before feature statistics were populated")
    y_hat = as_f64(y_hat)
    if y_hat.ndim != 2 or y_hat.shape[1] != stats.channels:
        raise DimensionError(f"y_hat shape {y_hat.shape} does not match {stats.channels} channels")
    margin = stats.mu_real - stats.mu_fake
    sign = np.where(margin >= 0.0, 1.0, -1.0)
    floored = sign * np.maximum(np.abs(margin), cfg.denom_floor)
    dist = stats.mu_real[None, :] - y_hat
    return np.where(np.abs(dist) >= cfg.gamma, dist / floored[None, :], cfg.near_real_ratio)


def compute_suppression(ratios: Array, cfg: UfsConfig) -> SuppressionMatrix:
    """Piecewise-linear suppression weights: epsilon - clip(ratio, alpha, beta)."""
    ratios = as_f64(ratios)
    return SuppressionMatrix(cfg.epsilon - np.clip(ratios, cfg.alpha, cfg.beta))


def apply_suppression(y_fake: Array, s: SuppressionMatrix, w: Array, b: Array) -> Array:
    """Scores of masked features: <w, y * s> + b per sample."""
    y_fake = as_f64(y_fake)
    w = as_f64(w)
    if y_fake.shape != s.values.shape:
        raise DimensionError(f"suppression shape {s.values.shape} does not match features {y_fake.shape}")
    if y_fake.ndim != 2 or y_fake.shape[1] != w.size:
        raise DimensionError(f"features {y_fake.shape} do not match head width {w.size}")
    return ((y_fake * s.values) @ w.reshape(-1, 1) + np.asarray(b).reshape(1, 1))[:, 0]


def classify_mode(cfg: UfsConfig) -> str:
    """Label a configuration "dismission" (worst channels zeroed) or "suppression".

    epsilon - beta is the weight given to the worst channels: exactly zero
    means they are dropped outright; anything positive keeps them, scaled.
    A gap of 1 or more never attenuates anything, which is worth a warning.
    """
    gap = cfg.epsilon - cfg.beta
    if gap == 0.0:
        return "dismission"
    if gap >= 1.0:
        warnings.warn(
            f"epsilon - beta = {gap}: no-suppression regime, every channel keeps "
            "at least its full weight", stacklevel=2)
    return "suppression"


def anneal_beta(cfg: UfsConfig, t: int, total: int) -> float:
    """Linear beta schedule over the first anneal_fraction of training."""
    if cfg.beta_anneal is None:
        return cfg.beta
    if t < 0 or t > total:
        raise ContractError(f"iteration {t} outside [0, {total}]")
    sched = cfg.beta_anneal
    window = sched.anneal_fraction * total
    if window <= 0 or t >= window:
        return sched.beta_end
    return sched.beta_start + (sched.beta_end - sched.beta_start) * (t / window)


def effective_config(cfg: UfsConfig, t: int, total: int) -> UfsConfig:
    """Config with the annealed beta substituted for iteration t."""
    if cfg.beta_anneal is None:
        return cfg
    return replace(cfg, beta=anneal_beta(cfg, t, total), beta_anneal=None)
