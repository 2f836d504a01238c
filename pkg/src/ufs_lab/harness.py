"""Experiment orchestration: strict JSON configs, CSV metrics, checkpoints.

Everything written to disk is a deterministic function of (config, seed),
except the wall_seconds column, which is deliberately kept last in the CSV
so determinism checks can slice it off.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gan as gan_mod
from . import ufs as ufs_mod
from .datasets import DatasetConfig, PointMixture, make_dataset
from .errors import ConfigError, ParseError
from .metrics import fit_gaussian, frechet_distance, manifold_metrics, mode_coverage, random_feature_embed
from .numerics import AdamState, Array, LayerSpec, Network, SeededRng
from .selection import InstanceSelectionConfig, SelectionConfig

CSV_HEADER = ("iteration,L_D,L_G,frechet,precision,recall,density,coverage,"
              "covered_modes,hq_fraction,wall_seconds")

EVAL_EMBED_SEED = 0  # feature space for image-run metrics stays fixed across runs
MANIFOLD_K = 3


@dataclass
class MetricsRecord:
    iteration: int
    L_D: float
    L_G: float
    frechet: float
    precision: float
    recall: float
    density: float
    coverage: float
    covered_modes: float
    hq_fraction: float
    wall_seconds: float

    def csv_row(self) -> str:
        cells = [str(self.iteration)]
        for value in (self.L_D, self.L_G, self.frechet, self.precision, self.recall,
                      self.density, self.coverage):
            cells.append(_fmt(value))
        cells.append(str(int(self.covered_modes)) if _is_finite(self.covered_modes) else "nan")
        cells.append(_fmt(self.hq_fraction))
        cells.append(_fmt(self.wall_seconds))
        return ",".join(cells)


def _fmt(x: float) -> str:
    return repr(float(x)) if _is_finite(x) else ("nan" if math.isnan(float(x)) else repr(float(x)))


def _is_finite(x) -> bool:
    return math.isfinite(float(x))


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    train: gan_mod.TrainConfig
    eval_every: int = 250
    eval_samples: int = 2000
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not MANIFOLD_K < self.eval_samples <= 10_000:
            raise ConfigError(
                f"eval_samples must be in ({MANIFOLD_K}, 10000], got {self.eval_samples}")

    @property
    def seed(self) -> int:
        return self.train.seed


# --- strict JSON config -------------------------------------------------------- #


def _check_keys(obj: dict, allowed, ctx: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {ctx}")


def _instance_selection_from_dict(obj) -> InstanceSelectionConfig | None:
    if obj is None:
        return None
    _check_keys(obj, ("retention_ratio", "embedder_seed", "covariance_mode"), "instance_selection")
    return InstanceSelectionConfig(**obj)


def _dataset_from_dict(obj: dict) -> DatasetConfig:
    _check_keys(obj, ("kind", "radius", "sigma", "spacing", "path", "image_size",
                      "num_shapes", "instance_selection"), "dataset")
    if "kind" not in obj:
        raise ConfigError("dataset block needs a 'kind'")
    kwargs = dict(obj)
    kwargs["instance_selection"] = _instance_selection_from_dict(obj.get("instance_selection"))
    cfg = DatasetConfig(**kwargs)
    if cfg.kind == "idx_images" and not Path(cfg.path).exists():
        raise ConfigError(f"dataset file not found: {cfg.path}")
    return cfg


def _ufs_from_dict(obj) -> ufs_mod.UfsConfig | None:
    if obj is None:
        return None
    _check_keys(obj, ("alpha", "beta", "epsilon", "gamma", "denom_floor", "near_real_ratio",
                      "beta_anneal", "stats_momentum", "strict_stats"), "ufs")
    kwargs = dict(obj)
    anneal = obj.get("beta_anneal")
    if anneal is not None:
        _check_keys(anneal, ("beta_start", "beta_end", "anneal_fraction"), "ufs.beta_anneal")
        kwargs["beta_anneal"] = ufs_mod.BetaAnneal(**anneal)
    return ufs_mod.UfsConfig(**kwargs)


def _selection_from_dict(obj) -> SelectionConfig | None:
    if obj is None:
        return None
    _check_keys(obj, ("mode", "k_start", "k_end", "anneal_fraction"), "selection")
    return SelectionConfig(**obj)


def _train_from_dict(obj: dict) -> gan_mod.TrainConfig:
    _check_keys(obj, ("batch_size", "n_critic", "iterations", "seed", "loss",
                      "ufs", "selection"), "train")
    kwargs = dict(obj)
    loss = obj.get("loss")
    if loss is not None:
        _check_keys(loss, ("kind", "gp_lambda"), "train.loss")
        kwargs["loss"] = gan_mod.LossKind(**loss)
    kwargs["ufs"] = _ufs_from_dict(obj.get("ufs"))
    kwargs["selection"] = _selection_from_dict(obj.get("selection"))
    return gan_mod.TrainConfig(**kwargs)


def config_from_dict(obj: dict) -> ExperimentConfig:
    _check_keys(obj, ("dataset", "train", "eval_every", "eval_samples", "out_dir"), "config")
    for required in ("dataset", "train"):
        if required not in obj:
            raise ConfigError(f"config needs a {required!r} block")
    kwargs = dict(obj)
    kwargs["dataset"] = _dataset_from_dict(obj["dataset"])
    kwargs["train"] = _train_from_dict(obj["train"])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(obj)


def apply_overrides(obj: dict, assignments) -> dict:
    """Apply 'dotted.key=json_value' overrides onto a raw config dict."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = obj
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends through a non-object")
        node[parts[-1]] = value
    return obj


# --- checkpoint format ------------------------------------------------------------ #

CHECKPOINT_MAGIC = b"UFSL"
CHECKPOINT_VERSION = 1

_KIND_IDS = {"dense": 0, "conv2d": 1, "leaky_relu": 2, "relu": 3, "tanh": 4, "global_sum_pool": 5}
_KIND_NAMES = {v: k for k, v in _KIND_IDS.items()}


def save_checkpoint(path, arrays: dict) -> None:
    """Little-endian flat binary: magic, u32 version, then length-prefixed
    named float64 arrays (u32 name length, name, u32 ndim, u32 dims, data)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a UFSL checkpoint")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ParseError(
            f"{path}: checkpoint version {version} is incompatible with reader version "
            f"{CHECKPOINT_VERSION}")
    pos = 12
    arrays = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, np.float64, count=size, offset=pos).reshape(shape)
            pos += 8 * size
        except (struct.error, ValueError) as exc:
            raise ParseError(f"{path}: corrupt checkpoint near byte {pos}: {exc}") from exc
        arrays[name] = arr.copy()
    return arrays


def save_embeddings(embeddings: Array, path) -> None:
    """Flat binary export of an (n, d) embedding matrix in the UFSL container."""
    save_checkpoint(path, {"embeddings": np.asarray(embeddings, dtype=np.float64)})


def load_embeddings(path) -> Array:
    return load_checkpoint(path)["embeddings"]


def _encode_spec(spec: LayerSpec) -> Array:
    return np.array([_KIND_IDS[spec.kind], spec.in_features, spec.out_features,
                     spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                     spec.slope], dtype=np.float64)


def _decode_spec(values: Array) -> LayerSpec:
    kind = _KIND_NAMES[int(values[0])]
    return LayerSpec(kind, in_features=int(values[1]), out_features=int(values[2]),
                     in_channels=int(values[3]), out_channels=int(values[4]),
                     kernel=int(values[5]), stride=int(values[6]), slope=float(values[7]))


def _network_arrays(prefix: str, net: Network, arrays: dict) -> None:
    for i, (spec, params) in enumerate(zip(net.specs, net.params)):
        arrays[f"{prefix}.spec.{i:02d}"] = _encode_spec(spec)
        for key, val in params.items():
            arrays[f"{prefix}.param.{i:02d}.{key}"] = val


def _network_from_arrays(prefix: str, arrays: dict) -> Network:
    specs = []
    params = []
    i = 0
    while f"{prefix}.spec.{i:02d}" in arrays:
        spec = _decode_spec(arrays[f"{prefix}.spec.{i:02d}"])
        layer_params = {}
        for key in ("W", "b"):
            name = f"{prefix}.param.{i:02d}.{key}"
            if name in arrays:
                layer_params[key] = arrays[name]
        specs.append(spec)
        params.append(layer_params)
        i += 1
    return Network(specs, params)


def _adam_arrays(prefix: str, state: AdamState, arrays: dict) -> None:
    arrays[f"{prefix}.hyper"] = np.array([state.lr, state.b1, state.b2, state.eps])
    arrays[f"{prefix}.step"] = np.array([float(state.step)])
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"{prefix}.m.{i:02d}"] = m
        arrays[f"{prefix}.v.{i:02d}"] = v


def _adam_from_arrays(prefix: str, arrays: dict, params) -> AdamState:
    lr, b1, b2, eps = arrays[f"{prefix}.hyper"]
    state = AdamState.for_params(params, float(lr), float(b1), float(b2), float(eps))
    state.step = int(arrays[f"{prefix}.step"][0])
    for i in range(len(params)):
        state.m[i] = arrays[f"{prefix}.m.{i:02d}"]
        state.v[i] = arrays[f"{prefix}.v.{i:02d}"]
    return state


def trainer_to_arrays(state: gan_mod.TrainerState) -> dict:
    arrays: dict = {}
    arrays["run.iteration"] = np.array([float(state.t)])
    arrays["gen.latent_dim"] = np.array([float(state.gen.latent_dim)])
    arrays["gen.data_shape"] = np.array([float(v) for v in state.gen.data_shape])
    _network_arrays("gen", state.gen.net, arrays)
    _network_arrays("disc.body", state.disc.body, arrays)
    arrays["disc.head.w"] = state.disc.w
    arrays["disc.head.b"] = state.disc.b
    _adam_arrays("adam_g", state.adam_g, arrays)
    _adam_arrays("adam_d", state.adam_d, arrays)
    arrays["stats.mu_real"] = state.stats.mu_real
    arrays["stats.mu_fake"] = state.stats.mu_fake
    arrays["stats.momentum"] = np.array([state.stats.momentum])
    arrays["stats.initialized"] = np.array([1.0 if state.stats.initialized else 0.0])
    if state.cfg.ufs is not None:
        cfg = ufs_mod.effective_config(state.cfg.ufs, state.t, state.cfg.iterations)
        arrays["ufs.cfg"] = np.array([cfg.alpha, cfg.beta, cfg.epsilon, cfg.gamma,
                                      cfg.denom_floor, cfg.near_real_ratio])
    return arrays


def models_from_arrays(arrays: dict):
    """Rebuild (generator, discriminator, stats, ufs config or None, iteration)."""
    gen = gan_mod.GeneratorNet(
        int(arrays["gen.latent_dim"][0]),
        _network_from_arrays("gen", arrays),
        tuple(int(v) for v in arrays["gen.data_shape"]),
    )
    disc = gan_mod.DiscriminatorNet(
        _network_from_arrays("disc.body", arrays),
        arrays["disc.head.w"],
        arrays["disc.head.b"],
    )
    stats = ufs_mod.FeatureStats(
        arrays["stats.mu_real"],
        arrays["stats.mu_fake"],
        float(arrays["stats.momentum"][0]),
        bool(arrays["stats.initialized"][0]),
    )
    ufs_cfg = None
    if "ufs.cfg" in arrays:
        a, b, e, g, floor, near = arrays["ufs.cfg"]
        ufs_cfg = ufs_mod.UfsConfig(float(a), float(b), float(e), float(g),
                                    float(floor), float(near))
    return gen, disc, stats, ufs_cfg, int(arrays["run.iteration"][0])


# --- metrics CSV -------------------------------------------------------------------- #


def write_metrics_csv(records, path) -> None:
    lines = [CSV_HEADER] + [r.csv_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def log_metrics_csv(record: MetricsRecord, path) -> None:
    """Append one row, writing the header first if the file does not exist."""
    path = Path(path)
    if not path.exists():
        path.write_text(CSV_HEADER + "\n")
    with open(path, "a") as fh:
        fh.write(record.csv_row() + "\n")


def read_csv_without_wall_seconds(path) -> str:
    """CSV content with the wall_seconds column sliced off, for determinism checks."""
    lines = Path(path).read_text().splitlines()
    return "\n".join(",".join(ln.split(",")[:-1]) for ln in lines)


# --- the experiment loop --------------------------------------------------------------- #


@dataclass
class RunResult:
    status: str  # "ok" | "nan_abort"
    out_dir: Path
    metrics_path: Path
    records: list = field(default_factory=list)
    best_frechet: float = math.nan
    best_iteration: int = -1


def _evaluate(cfg: ExperimentConfig, state: gan_mod.TrainerState, dataset,
              real_pool: Array, real_embedded, rng_eval: SeededRng,
              iteration: int, l_d: float, l_g: float, started: float,
              out: Path) -> MetricsRecord:
    z = rng_eval.normal((cfg.eval_samples, state.gen.latent_dim))
    fake_pool = state.gen.sample(z)
    if isinstance(dataset, PointMixture):
        fr = frechet_distance(fit_gaussian(real_pool), fit_gaussian(fake_pool))
        mm = manifold_metrics(real_pool, fake_pool, MANIFOLD_K)
        covered, hq = mode_coverage(fake_pool, dataset.centers, dataset.sigma)
        _dump_points(fake_pool[:64], out / f"samples_{iteration:06d}.csv")
    else:
        fake_embedded = random_feature_embed(fake_pool, EVAL_EMBED_SEED)
        fr = frechet_distance(fit_gaussian(real_embedded), fit_gaussian(fake_embedded))
        mm = manifold_metrics(real_embedded, fake_embedded, MANIFOLD_K)
        covered, hq = math.nan, math.nan
        _dump_image_grid(fake_pool[:64], out / f"samples_{iteration:06d}.pgm")
    save_checkpoint(out / f"checkpoint_{iteration:06d}.ufsl", trainer_to_arrays(state))
    return MetricsRecord(iteration, l_d, l_g, fr, mm.precision, mm.recall, mm.density,
                         mm.coverage, covered, hq, time.perf_counter() - started)


def _dump_points(points: Array, path: Path) -> None:
    path.write_text("".join(f"{repr(float(x))},{repr(float(y))}\n" for x, y in points))


def _dump_image_grid(images: Array, path: Path) -> None:
    """8x8 montage of [-1, 1] images as one PGM."""
    from .attribution import heatmap_to_pgm

    n, _, h, w = images.shape
    side = int(math.ceil(math.sqrt(n)))
    grid = np.full((side * h, side * w), -1.0)
    for i in range(n):
        r, c = divmod(i, side)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i, 0]
    heatmap_to_pgm(grid, path)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Alternating critic/generator training with periodic evaluation rows."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    root = SeededRng(cfg.train.seed)
    rng_data = root.derive(1)
    rng_init = root.derive(2)
    rng_train = root.derive(3)
    rng_eval = root.derive(4)

    dataset = make_dataset(cfg.dataset, rng_data)
    gen, disc = gan_mod.default_models(dataset.data_shape, rng_init)
    state = gan_mod.init_trainer(cfg.train, gen, disc)

    real_pool = dataset.sample(cfg.eval_samples, rng_eval)
    real_embedded = None
    if not isinstance(dataset, PointMixture):
        real_embedded = random_feature_embed(real_pool, EVAL_EMBED_SEED)

    started = time.perf_counter()
    records = [_evaluate(cfg, state, dataset, real_pool, real_embedded, rng_eval,
                         0, math.nan, math.nan, started, out)]
    write_metrics_csv(records, metrics_path)

    status = "ok"
    for t in range(1, cfg.train.iterations + 1):
        l_d = l_g = math.nan
        diverged = False
        try:
            for _ in range(cfg.train.n_critic):
                real = dataset.sample(cfg.train.batch_size, rng_train)
                l_d = gan_mod.train_discriminator_step(state, real, rng_train)
            l_g = gan_mod.train_generator_step(state, rng_train)
            if not (math.isfinite(l_d) and math.isfinite(l_g)):
                diverged = True
            elif t % cfg.eval_every == 0 or t == cfg.train.iterations:
                records.append(_evaluate(cfg, state, dataset, real_pool, real_embedded,
                                         rng_eval, t, l_d, l_g, started, out))
                write_metrics_csv(records, metrics_path)
        except (ArithmeticError, np.linalg.LinAlgError):
            diverged = True
        if diverged:
            # diagnostic row; the last successfully written checkpoint is retained
            records.append(MetricsRecord(t, l_d, l_g, math.nan, math.nan, math.nan,
                                         math.nan, math.nan, math.nan, math.nan,
                                         time.perf_counter() - started))
            write_metrics_csv(records, metrics_path)
            status = "nan_abort"
            break

    finite = [(r.frechet, r.iteration) for r in records if _is_finite(r.frechet)]
    best_frechet, best_iteration = min(finite) if finite else (math.nan, -1)
    # image runs measure in random-feature space: call the number rf-frechet there
    label = "frechet" if isinstance(dataset, PointMixture) else "rf_frechet"
    summary = {"status": status, f"best_{label}": best_frechet,
               "best_iteration": best_iteration, "iterations_run": records[-1].iteration}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"[ufs-lab] {cfg.out_dir}: status={status} best_{label}={best_frechet:.6g} "
          f"at iteration {best_iteration}")
    return RunResult(status, out, metrics_path, records, best_frechet, best_iteration)
