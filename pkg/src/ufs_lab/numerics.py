"""Dense float64 tensor math with handwritten layer gradients.

Networks are flat lists of layer specs plus per-layer parameter dicts.
A forward pass returns a cache, the backward pass consumes it, and a
second-order helper differentiates through the input-gradient computation
(needed when training against a gradient-norm penalty).

Convolution forward and global sum pooling accumulate in a fixed loop
order (channel, then kernel row, then kernel column / row-major spatial)
so they agree bit-for-bit with a naive Python loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    StateError,
    UnsupportedArchitectureError,
)

Array = np.ndarray

LAYER_KINDS = ("dense", "conv2d", "leaky_relu", "relu", "tanh", "global_sum_pool")


def as_f64(x) -> Array:
    return np.ascontiguousarray(x, dtype=np.float64)


class SeededRng:
    """Deterministic random stream: same seed + same call sequence = same values."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *keys: int) -> "SeededRng":
        """Independent child stream, reproducible from (seed, *keys)."""
        ss = np.random.SeedSequence([self.seed] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> Array:
        if std < 0:
            raise ContractError(f"std must be >= 0, got {std}")
        return mean + std * self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Array:
        return self._gen.uniform(low, high, shape)

    def integers(self, n: int, size=None) -> Array:
        return self._gen.integers(0, n, size=size)

    def choice_no_replace(self, n: int, k: int) -> Array:
        return self._gen.choice(n, size=k, replace=False)


def gaussian_sample(rng: SeededRng, shape, mean: float = 0.0, std: float = 1.0) -> Array:
    """I.i.d. normal draws, deterministic per rng state."""
    return rng.normal(shape, mean, std)


# --- layer specs --------------------------------------------------------- #


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_features <= 0 or self.out_features <= 0):
            raise ContractError(f"dense layer needs positive sizes, got {self.in_features}x{self.out_features}")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel, self.stride) <= 0:
                raise ContractError("conv2d layer needs positive channels, kernel and stride")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ContractError(f"leaky slope must be in (0, 1), got {self.slope}")


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride)


def leaky_relu(slope: float = 0.2) -> LayerSpec:
    return LayerSpec("leaky_relu", slope=slope)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def tanh() -> LayerSpec:
    return LayerSpec("tanh")


def sum_pool() -> LayerSpec:
    return LayerSpec("global_sum_pool")


def check_specs(specs) -> None:
    """Validate that consecutive layers produce/consume compatible shapes."""
    state = None  # None (unknown yet) | ("vec", features) | ("img", channels)
    for i, s in enumerate(specs):
        if s.kind == "dense":
            if state is not None and state != ("vec", s.in_features):
                raise DimensionError(f"layer {i}: dense expects {s.in_features} features, chain carries {state}")
            state = ("vec", s.out_features)
        elif s.kind == "conv2d":
            if state is not None and state != ("img", s.in_channels):
                raise DimensionError(f"layer {i}: conv2d expects {s.in_channels} channels, chain carries {state}")
            state = ("img", s.out_channels)
        elif s.kind == "global_sum_pool":
            if state is not None and state[0] != "img":
                raise DimensionError(f"layer {i}: global_sum_pool needs a 4-d input, chain carries {state}")
            if state is not None:
                state = ("vec", state[1])
        # activations keep the shape


# --- primitive operations ------------------------------------------------ #


def matmul(a: Array, b: Array) -> Array:
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def conv2d_forward(x: Array, kernel: Array, stride: int) -> Array:
    """Valid (no padding) cross-correlation; the kernel is not flipped.

    Accumulates over (in-channel, kernel row, kernel col) in that order so
    the result is bitwise equal to a naive six-loop implementation.
    """
    x = as_f64(x)
    kernel = as_f64(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: need 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for ci in range(c):
        for p in range(kh):
            for q in range(kw):
                xs = x[:, ci, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
                y += xs[:, None, :, :] * kernel[:, ci, p, q][None, :, None, None]
    return y


def conv2d_weight_grad(x: Array, dy: Array, stride: int, kh: int, kw: int) -> Array:
    """Gradient of a valid cross-correlation with respect to its kernel."""
    n, c, h, w = x.shape
    _, o, ho, wo = dy.shape
    dk = np.empty((o, c, kh, kw))
    for p in range(kh):
        for q in range(kw):
            xs = x[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
            dk[:, :, p, q] = np.einsum("ncij,noij->oc", xs, dy)
    return dk


def conv2d_input_grad(dy: Array, kernel: Array, x_shape, stride: int) -> Array:
    """Gradient of a valid cross-correlation with respect to its input."""
    n, c, h, w = x_shape
    o, _, kh, kw = kernel.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros(x_shape)
    for p in range(kh):
        for q in range(kw):
            piece = np.einsum("noij,oc->ncij", dy, kernel[:, :, p, q])
            dx[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += piece
    return dx


def activation_forward(x: Array, kind: str, slope: float = 0.2) -> Array:
    """Elementwise relu / leaky_relu / tanh; rejects non-finite input."""
    x = as_f64(x)
    if not np.isfinite(x).all():
        raise ContractError("activation_forward: input contains NaN or Inf")
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ContractError(f"leaky slope must be in (0, 1), got {slope}")
        return np.where(x > 0.0, x, slope * x)
    if kind == "tanh":
        return np.tanh(x)
    raise ContractError(f"unknown activation {kind!r}")


def global_sum_pool(x: Array) -> Array:
    """Sum over spatial positions per channel, (n,c,h,w) -> (n,c).

    Accumulated position by position in row-major order, matching a plain loop.
    """
    x = as_f64(x)
    if x.ndim != 4:
        raise DimensionError(f"global_sum_pool expects a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for i in range(h):
        for j in range(w):
            out += x[:, :, i, j]
    return out


# --- sequential networks -------------------------------------------------- #


def init_params(specs, rng: SeededRng, weight_std: float = 0.02):
    """N(0, weight_std^2) weights, zero biases; draw order follows the spec list."""
    check_specs(specs)
    params = []
    for s in specs:
        if s.kind == "dense":
            params.append({
                "W": rng.normal((s.out_features, s.in_features), 0.0, weight_std),
                "b": np.zeros(s.out_features),
            })
        elif s.kind == "conv2d":
            params.append({
                "W": rng.normal((s.out_channels, s.in_channels, s.kernel, s.kernel), 0.0, weight_std),
                "b": np.zeros(s.out_channels),
            })
        else:
            params.append({})
    return params


def forward_pass(specs, params, x):
    """Run the stack, returning (output, cache) with per-layer saved values."""
    h = as_f64(x)
    cache = []
    for i, (s, p) in enumerate(zip(specs, params)):
        if s.kind == "dense":
            if h.ndim != 2 or h.shape[1] != s.in_features:
                raise DimensionError(f"layer {i}: dense expects (n, {s.in_features}), got {h.shape}")
            cache.append(h)
            h = h @ p["W"].T + p["b"]
        elif s.kind == "conv2d":
            cache.append(h)
            h = conv2d_forward(h, p["W"], s.stride) + p["b"][None, :, None, None]
        elif s.kind == "leaky_relu":
            m = np.where(h > 0.0, 1.0, s.slope)
            cache.append(m)
            h = h * m
        elif s.kind == "relu":
            m = (h > 0.0).astype(np.float64)
            cache.append(m)
            h = h * m
        elif s.kind == "tanh":
            h = np.tanh(h)
            cache.append(h)
        else:  # global_sum_pool
            cache.append(h.shape)
            h = global_sum_pool(h)
    return h, cache


def backward_pass(specs, params, cache, upstream, want_tape: bool = False):
    """Reverse-order chain rule; returns (param grads, input grad[, tape]).

    The tape records the upstream gradient reaching each parametric layer,
    which the second-order helper below needs.
    """
    g = as_f64(upstream)
    grads = [{} for _ in specs]
    tape = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        s, p, c = specs[i], params[i], cache[i]
        if s.kind == "dense":
            if g.ndim != 2 or g.shape[1] != s.out_features:
                raise DimensionError(f"layer {i}: upstream shape {g.shape} does not match dense output")
            tape[i] = g
            grads[i]["W"] = g.T @ c
            grads[i]["b"] = g.sum(axis=0)
            g = g @ p["W"]
        elif s.kind == "conv2d":
            tape[i] = g
            grads[i]["W"] = conv2d_weight_grad(c, g, s.stride, s.kernel, s.kernel)
            grads[i]["b"] = g.sum(axis=(0, 2, 3))
            g = conv2d_input_grad(g, p["W"], c.shape, s.stride)
        elif s.kind in ("leaky_relu", "relu"):
            g = g * c
        elif s.kind == "tanh":
            g = g * (1.0 - c * c)
        else:  # global_sum_pool
            n, ch = g.shape
            g = np.broadcast_to(g[:, :, None, None], (n, ch, c[2], c[3])).copy()
    if want_tape:
        return grads, g, tape
    return grads, g


def input_grad_param_grads(specs, params, cache, tape, v):
    """Parameter gradients of sum(input_grad * v), holding v constant.

    Backprop through the backward pass. Only valid for piecewise-linear
    activations (relu / leaky_relu), whose masks have zero derivative almost
    everywhere; tanh would add curvature terms and is rejected.
    """
    q = as_f64(v)
    out = [{} for _ in specs]
    for i, (s, p, c) in enumerate(zip(specs, params, cache)):
        if s.kind == "dense":
            out[i]["W"] = tape[i].T @ q
            out[i]["b"] = np.zeros_like(p["b"])
            q = q @ p["W"].T
        elif s.kind == "conv2d":
            out[i]["W"] = conv2d_weight_grad(q, tape[i], s.stride, s.kernel, s.kernel)
            out[i]["b"] = np.zeros_like(p["b"])
            q = conv2d_forward(q, p["W"], s.stride)
        elif s.kind in ("leaky_relu", "relu"):
            q = q * c
        elif s.kind == "tanh":
            raise UnsupportedArchitectureError(
                "second-order backward supports piecewise-linear activations only")
        else:  # global_sum_pool
            q = global_sum_pool(q)
    return out


class Network:
    """A sequential layer stack with explicit parameters and a retained cache."""

    def __init__(self, specs, params):
        check_specs(specs)
        if len(specs) != len(params):
            raise ContractError("specs and params length mismatch")
        self.specs = list(specs)
        self.params = list(params)
        self._cache = None

    @classmethod
    def init(cls, specs, rng: SeededRng, weight_std: float = 0.02) -> "Network":
        return cls(specs, init_params(specs, rng, weight_std))

    def forward(self, x, keep: bool = True) -> Array:
        y, cache = forward_pass(self.specs, self.params, x)
        if keep:
            self._cache = cache
        return y

    def backward(self, upstream, cache=None, want_tape: bool = False):
        if cache is None:
            cache = self._cache
        if cache is None:
            raise StateError("backward_pass called before any forward pass")
        return backward_pass(self.specs, self.params, cache, upstream, want_tape)

    def param_list(self):
        return [arr for p in self.params for arr in p.values()]


def flatten_grads(grads) -> list:
    return [arr for g in grads for arr in g.values()]


def add_grads(a, b):
    return [{k: ga[k] + gb[k] for k in ga} for ga, gb in zip(a, b)]


# --- optimizer ------------------------------------------------------------ #


@dataclass
class AdamState:
    lr: float
    b1: float
    b2: float
    eps: float
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(lr, b1, b2, eps,
                   [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: parameter / gradient count mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: gradient shape {g.shape} does not match parameter {p.shape}")
    state.step += 1
    c1 = 1.0 - state.b1 ** state.step
    c2 = 1.0 - state.b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- finite differences ---------------------------------------------------- #


def finite_diff_grad(f, x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if h <= 0:
        raise ContractError(f"step size must be positive, got {h}")
    x = as_f64(x)
    g = np.zeros_like(x)
    flat_g = g.ravel()
    for i in range(x.size):
        xp = x.copy()
        xp.ravel()[i] += h
        xm = x.copy()
        xm.ravel()[i] -= h
        fp, fm = f(xp), f(xm)
        if np.ndim(fp) != 0 or np.ndim(fm) != 0:
            raise ContractError("finite_diff_grad needs a scalar-valued function")
        flat_g[i] = (float(fp) - float(fm)) / (2.0 * h)
    return g
