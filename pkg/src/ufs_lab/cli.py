"""Command line entry points: run / eval / cam / select."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attribution import compute_cam, save_attribution_maps
from .datasets import load_idx_images, normalize_images
from .errors import ConfigError
from .harness import (apply_overrides, config_from_dict, load_checkpoint,
                      models_from_arrays, run_experiment, save_embeddings)
from .metrics import fit_gaussian, frechet_distance, manifold_metrics, random_feature_embed
from .selection import InstanceSelectionConfig, instance_select, write_index_file
from .ufs import compute_ratio, compute_suppression, weighted_features
from .numerics import forward_pass


def _load_samples(path: str, embed_seed: int) -> np.ndarray:
    """Point CSVs load directly; IDX images go through the fixed embedder."""
    p = Path(path)
    if p.suffix.lower() == ".idx" or p.read_bytes()[:2] == b"\x00\x00":
        images = normalize_images(load_idx_images(p))
        return random_feature_embed(images, embed_seed)
    return np.loadtxt(p, delimiter=",", ndmin=2)


def _cmd_run(args) -> int:
    with open(args.config) as fh:
        obj = json.load(fh)
    apply_overrides(obj, args.set or [])
    cfg = config_from_dict(obj)
    result = run_experiment(cfg)
    return 0 if result.status == "ok" else 1


def _cmd_eval(args) -> int:
    real = _load_samples(args.real, args.embed_seed)
    fake = _load_samples(args.fake, args.embed_seed)
    embedded = real.shape[1] != 2 or Path(args.real).suffix.lower() == ".idx"
    out = {
        # image inputs were embedded, so the number is an rf-space distance
        "space": "random_feature" if embedded else "data",
        "frechet": frechet_distance(fit_gaussian(real), fit_gaussian(fake)),
    }
    mm = manifold_metrics(real, fake, args.k)
    out.update(precision=mm.precision, recall=mm.recall, density=mm.density,
               coverage=mm.coverage)
    if args.dump_embeddings:
        target = Path(args.dump_embeddings)
        target.mkdir(parents=True, exist_ok=True)
        save_embeddings(real, target / "real_embeddings.ufsl")
        save_embeddings(fake, target / "fake_embeddings.ufsl")
    print(json.dumps(out, indent=2))
    return 0


def _cmd_cam(args) -> int:
    arrays = load_checkpoint(args.checkpoint)
    _, disc, stats, ufs_cfg, _ = models_from_arrays(arrays)
    images = normalize_images(load_idx_images(args.input))[:args.limit]
    maps = [compute_cam(disc, images)]
    if stats.initialized and ufs_cfg is not None:
        features, _ = forward_pass(disc.body.specs, disc.body.params, images)
        ratios = compute_ratio(stats, weighted_features(disc.w, features), ufs_cfg)
        s = compute_suppression(ratios, ufs_cfg)
        maps.append(compute_cam(disc, images, s, "cam_ufs"))
        maps.append(compute_cam(disc, images, s, "cam_sup"))
    else:
        print("note: checkpoint has no usable feature statistics; writing plain maps only",
              file=sys.stderr)
    run_id = args.run_id or Path(args.checkpoint).stem
    written = save_attribution_maps(maps, args.out, run_id, args.upsample)
    print(f"wrote {len(written)} heatmaps to {args.out}")
    return 0


def _cmd_select(args) -> int:
    images = normalize_images(load_idx_images(args.dataset))
    cfg = InstanceSelectionConfig(retention_ratio=args.retention,
                                  embedder_seed=args.seed,
                                  covariance_mode=args.cov_mode)
    kept = instance_select(images, cfg)
    write_index_file(kept, args.out)
    print(f"kept {len(kept)} of {len(images)} samples -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ufs-lab",
                                     description="Desk-scale GAN laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="metrics between two sample files")
    p_eval.add_argument("--real", required=True)
    p_eval.add_argument("--fake", required=True)
    p_eval.add_argument("-k", type=int, default=3)
    p_eval.add_argument("--embed-seed", type=int, default=0)
    p_eval.add_argument("--dump-embeddings", default=None, metavar="DIR",
                        help="also write both sample sets as UFSL embedding files")
    p_eval.set_defaults(func=_cmd_eval)

    p_cam = sub.add_parser("cam", help="attribution heatmaps from a checkpoint")
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--input", required=True, help="IDX image file")
    p_cam.add_argument("--out", required=True)
    p_cam.add_argument("--limit", type=int, default=8)
    p_cam.add_argument("--upsample", type=int, default=1)
    p_cam.add_argument("--run-id", default=None)
    p_cam.set_defaults(func=_cmd_cam)

    p_sel = sub.add_parser("select", help="prune a dataset by Gaussian log-density")
    p_sel.add_argument("--dataset", required=True, help="IDX image file")
    p_sel.add_argument("--retention", type=float, default=0.5)
    p_sel.add_argument("--out", required=True)
    p_sel.add_argument("--seed", type=int, default=0)
    p_sel.add_argument("--cov-mode", default="full_shrinkage",
                       choices=("full_shrinkage", "diagonal"))
    p_sel.set_defaults(func=_cmd_select)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
