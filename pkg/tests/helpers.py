"""Shared oracles and gradient-check utilities for the test suite.

The oracles here are deliberately written as plain Python loops or textbook
iterations, independent of the library's vectorized implementations.
"""

import math

import numpy as np

from ufs_lab import gan
from ufs_lab import numerics as nm


def rel_err(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def grad_close(got, want, rtol=1e-5, atol=1e-9) -> bool:
    """Gradient comparison: relative where the scale allows, absolute near zero
    (central differences bottom out around 1e-10 on unit-scale functions)."""
    got = np.asarray(got, float)
    want = np.asarray(want, float)
    denom = max(np.abs(got).max(initial=0.0), np.abs(want).max(initial=0.0))
    return float(np.abs(got - want).max(initial=0.0)) <= rtol * denom + atol


# --- loop oracles --------------------------------------------------------- #


def matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_loop(x, kernel, stride):
    """Six-loop valid cross-correlation, accumulating over (c, p, q)."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[b, ci, i * stride + p, j * stride + q] * kernel[oc, ci, p, q]
                    out[b, oc, i, j] = acc
    return out


def sum_pool_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[b, ci, i, j]
            out[b, ci] = acc
    return out


def prdc_loop(real, fake, k):
    """Exhaustive enumeration of the k-NN manifold metrics (inclusive balls)."""
    m, n = len(real), len(fake)

    def dist(a, b):
        return math.sqrt(sum((ai - bi) ** 2 for ai, bi in zip(a, b)))

    def knn_radius(points, i):
        ds = sorted(dist(points[i], points[j]) for j in range(len(points)) if j != i)
        return ds[k - 1]

    r_real = [knn_radius(real, i) for i in range(m)]
    r_fake = [knn_radius(fake, j) for j in range(n)]
    precision = sum(
        1 for j in range(n) if any(dist(fake[j], real[i]) <= r_real[i] for i in range(m))) / n
    recall = sum(
        1 for i in range(m) if any(dist(real[i], fake[j]) <= r_fake[j] for j in range(n))) / m
    density = sum(
        1 for j in range(n) for i in range(m) if dist(fake[j], real[i]) <= r_real[i]) / (k * n)
    coverage = sum(
        1 for i in range(m) if any(dist(real[i], fake[j]) <= r_real[i] for j in range(n))) / m
    return precision, recall, density, coverage


def denman_beavers_sqrt(mat, iters=60):
    """Iterative matrix square root: Y -> sqrt(mat) for matrices with positive spectrum."""
    y = np.array(mat, float)
    z = np.eye(len(mat))
    for _ in range(iters):
        y_next = 0.5 * (y + np.linalg.inv(z))
        z = 0.5 * (z + np.linalg.inv(y))
        y = y_next
    return y


def frechet_oracle(fit_a, fit_b):
    prod_sqrt = denman_beavers_sqrt(fit_a.covariance @ fit_b.covariance)
    diff = fit_a.mean - fit_b.mean
    return float(diff @ diff + np.trace(fit_a.covariance + fit_b.covariance - 2.0 * prod_sqrt))


# --- gradient checking ----------------------------------------------------- #


def fd_param_grads(value_fn, arrays, h=1e-6):
    """Central differences of a scalar function with respect to a list of arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = value_fn()
            flat[i] = old - h
            fm = value_fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


# --- tiny model builders ---------------------------------------------------- #


def small_mlp_disc(rng, in_dim=2, hidden=8, channels=6, scale=0.4):
    body = nm.Network.init(
        [nm.dense(in_dim, hidden), nm.leaky_relu(0.2), nm.dense(hidden, channels),
         nm.leaky_relu(0.2)], rng, scale)
    return gan.DiscriminatorNet(body, rng.normal((channels,), 0.0, scale),
                                rng.normal((1,), 0.0, scale))


def small_conv_disc(rng, channels=4, scale=0.4):
    body = nm.Network.init(
        [nm.conv2d(1, 3, 3, 2), nm.leaky_relu(0.2), nm.conv2d(3, channels, 3, 1),
         nm.leaky_relu(0.2), nm.sum_pool()], rng, scale)
    return gan.DiscriminatorNet(body, rng.normal((channels,), 0.0, scale),
                                rng.normal((1,), 0.0, scale))


def small_gen(rng, latent=4, out_dim=2, scale=0.4):
    net = nm.Network.init(
        [nm.dense(latent, 8), nm.leaky_relu(0.2), nm.dense(8, out_dim)], rng, scale)
    return gan.GeneratorNet(latent, net, (out_dim,))
