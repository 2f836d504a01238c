"""Sample-level gradient selection and Gaussian instance pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError
from .numerics import Array, SeededRng, as_f64

SELECTION_MODES = ("top", "bottom", "random", "none")
COVARIANCE_MODES = ("full_shrinkage", "diagonal")


@dataclass(frozen=True)
class SelectionConfig:
    mode: str = "top"
    k_start: int = 64
    k_end: int = 32
    anneal_fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in SELECTION_MODES:
            raise ContractError(f"unknown selection mode {self.mode!r}")
        if not 1 <= self.k_end <= self.k_start:
            raise ContractError(f"need 1 <= k_end <= k_start, got {self.k_end} > {self.k_start}")
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ContractError(f"anneal_fraction must be in (0, 1], got {self.anneal_fraction}")


@dataclass(frozen=True)
class InstanceSelectionConfig:
    retention_ratio: float = 0.5
    embedder_seed: int = 0
    covariance_mode: str = "full_shrinkage"

    def __post_init__(self):
        if not 0.0 < self.retention_ratio <= 1.0:
            raise ContractError(f"retention_ratio must be in (0, 1], got {self.retention_ratio}")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ContractError(f"unknown covariance mode {self.covariance_mode!r}")


def select_indices(scores: Array, k: int, mode: str, rng: SeededRng | None = None) -> Array:
    """Indices of the k largest / smallest / random scores, ties to lowest index."""
    s = as_f64(scores).ravel()
    n = s.size
    if not 1 <= k <= n:
        raise ContractError(f"k={k} out of range for a batch of {n}")
    if mode == "top":
        order = np.argsort(-s, kind="stable")
    elif mode == "bottom":
        order = np.argsort(s, kind="stable")
    elif mode == "random":
        if rng is None:
            raise ContractError("random selection needs an rng")
        return np.sort(rng.choice_no_replace(n, k))
    else:
        raise ContractError(f"unknown selection mode {mode!r}")
    return np.sort(order[:k])


def anneal_k(cfg: SelectionConfig, t: int, total: int) -> int:
    """Linear k schedule over the first anneal_fraction of training, then flat."""
    if t < 0 or t > total:
        raise ContractError(f"iteration {t} outside [0, {total}]")
    window = cfg.anneal_fraction * total
    if window <= 0 or t >= window:
        return cfg.k_end
    return int(np.rint(cfg.k_start + (cfg.k_end - cfg.k_start) * (t / window)))


def gaussian_log_scores(embedded: Array, covariance_mode: str) -> Array:
    """Log-density of each row under a single Gaussian fit to all rows."""
    x = as_f64(embedded)
    n, d = x.shape
    mu = x.mean(axis=0)
    centered = x - mu
    if covariance_mode == "full_shrinkage":
        cov = centered.T @ centered / (n - 1)
        shrink = 1e-6 * np.trace(cov) / d
        cov = cov + shrink * np.eye(d)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"covariance singular after shrinkage {shrink:.3e} (dim {d}, n {n})") from exc
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        solved = np.linalg.solve(cov, centered.T)
        quad = (centered.T * solved).sum(axis=0)
    elif covariance_mode == "diagonal":
        var = centered.var(axis=0, ddof=1)
        if np.any(var <= 0):
            raise NumericError(f"zero variance along {int((var <= 0).sum())} dimensions")
        logdet = np.log(var).sum()
        quad = (centered * centered / var[None, :]).sum(axis=1)
    else:
        raise ContractError(f"unknown covariance mode {covariance_mode!r}")
    return -0.5 * (quad + logdet + d * math.log(2.0 * math.pi))


def instance_select(dataset: Array, cfg: InstanceSelectionConfig) -> Array:
    """Keep the densest retention_ratio fraction of a dataset under a Gaussian fit.

    2-d inputs are scored directly; image stacks (n, c, h, w) go through the
    fixed random-feature embedder first.
    """
    data = as_f64(dataset)
    if data.ndim == 2:
        embedded = data
    elif data.ndim == 4:
        from .metrics import random_feature_embed
        embedded = random_feature_embed(data, cfg.embedder_seed)
    else:
        raise ContractError(f"instance_select expects points (n, d) or images (n, c, h, w), got {data.shape}")
    n = len(embedded)
    if n < 4:
        raise ContractError(f"instance selection needs at least 4 samples, got {n}")
    if cfg.retention_ratio * n < 2:
        raise ContractError(
            f"retention {cfg.retention_ratio} of {n} samples keeps fewer than 2")
    scores = gaussian_log_scores(embedded, cfg.covariance_mode)
    keep = int(math.ceil(cfg.retention_ratio * n - 1e-12))
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep])


def write_index_file(indices, path) -> None:
    """Newline-delimited integer indices, one per line."""
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_index_file(path) -> Array:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([int(ln) for ln in lines], dtype=np.int64)
