"""Command-line frontend.

Subcommands: gen-data, estimate, orient, train, eval, grad-check.
Exit codes: 0 success, 2 usage, 3 I/O failure, 4 missing artifact,
5 algorithmic failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import classical, geometry, metrics, training
from .errors import DisconnectedGraph, OrinormError
from .model import (ModelConfig, init_params, load_checkpoint, predict,
                    save_checkpoint)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_ALGORITHM = 5


def _apply_density(cloud, mode, rng):
    """Uneven-sampling variants: stripe removes periodic slabs along x,
    gradient thins points linearly along x."""
    if mode == "none":
        return cloud
    x = cloud.points[:, 0]
    lo, hi = x.min(), x.max()
    span = max(hi - lo, 1e-12)
    if mode == "stripe":
        # 8 slabs, every second one removed
        slab = np.floor((x - lo) / span * 7.9999).astype(int)
        keep = slab % 2 == 0
    elif mode == "gradient":
        keep_prob = 1.0 - 0.95 * (x - lo) / span
        keep = rng.uniform(size=len(x)) < keep_prob
    else:
        raise ValueError(f"unknown density mode {mode!r}")
    if keep.sum() < 10:
        keep[:] = True
    normals = None if cloud.normals is None else cloud.normals[keep]
    return geometry.PointCloud(points=cloud.points[keep], normals=normals)


def cmd_gen_data(args):
    rng = np.random.default_rng(args.seed)
    cloud = geometry.generate_shape(args.shape, args.n, args.seed)
    cloud = _apply_density(cloud, args.density, rng)
    if args.noise > 0:
        cloud = geometry.add_noise(cloud, args.noise, args.seed + 1)
    try:
        geometry.save_xyz(cloud, args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


def cmd_estimate(args):
    if args.method == "shs" and not args.checkpoint:
        print("--checkpoint is required for method shs", file=sys.stderr)
        return EXIT_USAGE
    try:
        cloud = geometry.load_xyz(args.infile)
    except OSError as exc:
        print(f"cannot read {args.infile}: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.method == "shs":
        if not os.path.exists(args.checkpoint):
            print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
            return EXIT_MISSING
        params, config = load_checkpoint(args.checkpoint)
        index = geometry.KdIndex(cloud)
        normals = np.empty((len(cloud), 3))
        for q in range(len(cloud)):
            result = predict(cloud, q, params, config, seed=args.seed + q, index=index)
            normals[q] = result.oriented
    else:
        index = geometry.KdIndex(cloud)
        normals = np.empty((len(cloud), 3))
        for q in range(len(cloud)):
            patch = geometry.extract_patch(cloud, index, q, args.k)
            if args.method == "pca":
                normals[q] = classical.pca_normal(patch)
            else:
                coef = classical.jet_fit(patch, args.order)
                normals[q] = classical.jet_normal(coef)
    try:
        geometry.save_normals(normals, args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


def cmd_orient(args):
    try:
        cloud = geometry.load_xyz(args.infile)
        normals = geometry.load_normals(args.normals)
    except OSError as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        oriented = classical.mst_orient(cloud, normals, args.k_graph)
    except DisconnectedGraph as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ALGORITHM
    try:
        geometry.save_normals(oriented, args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


def cmd_train(args):
    if not os.path.exists(args.config):
        print(f"config not found: {args.config}", file=sys.stderr)
        return EXIT_MISSING
    try:
        model_cfg, train_cfg = training.configs_from_file(args.config)
    except ValueError as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        files = sorted(
            os.path.join(args.data_dir, f)
            for f in os.listdir(args.data_dir)
            if f.endswith(".xyz")
        )
    except OSError as exc:
        print(f"cannot list {args.data_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    if not files:
        print(f"no .xyz files in {args.data_dir}", file=sys.stderr)
        return EXIT_MISSING
    dataset = [geometry.load_xyz(f) for f in files]
    params, history = training.train(dataset, model_cfg, train_cfg)
    try:
        save_checkpoint(args.out_checkpoint, params, model_cfg)
        training.write_history_csv(history, args.history)
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


def cmd_eval(args):
    for path in (args.pred, args.gt):
        if not os.path.exists(path):
            print(f"file not found: {path}", file=sys.stderr)
            return EXIT_MISSING
    pred = geometry.load_normals(args.pred)
    gt_path = args.gt
    if gt_path.endswith(".xyz"):
        gt_cloud = geometry.load_xyz(gt_path)
        if gt_cloud.normals is None:
            print(f"{gt_path} carries no normals", file=sys.stderr)
            return EXIT_MISSING
        gt = gt_cloud.normals
        points = gt_cloud.points
    else:
        gt = geometry.load_normals(gt_path)
        points = None
    if len(pred) != len(gt):
        print(f"{len(pred)} predictions vs {len(gt)} ground-truth normals",
              file=sys.stderr)
        return EXIT_USAGE
    if args.majority_flip:
        pred = metrics.majority_flip(pred, gt)
    report = metrics.evaluate(pred, gt)
    try:
        metrics.write_report(report, args.report)
        if args.heatmap and points is not None:
            metrics.write_error_heatmap(points, report.per_point_errors, args.heatmap)
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return EXIT_IO
    for key, value in report.as_rows():
        print(f"{key} = {value:.4f}")
    return 0


def cmd_grad_check(args):
    from . import autodiff as ad
    from .training import TrainConfig, sign_labels, total_loss

    rng = np.random.default_rng(args.seed)
    config = ModelConfig(patch_size=args.k, global_size=args.k,
                         feature_dim=args.c, heads=args.heads)
    params = init_params(config, args.seed)
    patch = rng.normal(size=(1, config.patch_size, 3))
    patch /= np.abs(patch).max()
    global_pts = rng.normal(size=(1, config.global_size, 3))
    gt_q = patch[0, 0] / np.linalg.norm(patch[0, 0])
    gt_q = gt_q[None, :]
    gt_nbr = rng.normal(size=(1, config.retained_points, 3))
    gt_nbr /= np.linalg.norm(gt_nbr, axis=-1, keepdims=True)
    retained = patch[:, :config.retained_points]
    train_cfg = TrainConfig()

    from .model import forward

    def build():
        direction, sign_logit, gates, nbr = forward(params, config, patch, global_pts)
        labels = sign_labels(direction.data, gt_q)
        loss, _ = total_loss(direction, sign_logit, gates, nbr,
                             gt_q, gt_nbr, retained, labels, train_cfg)
        return loss

    error = ad.grad_check(build, params.values(), h=args.h,
                          max_entries=args.max_entries, seed=args.seed)
    print(f"max relative gradient error: {error:.3e}")
    if error > args.tolerance:
        print(f"exceeds tolerance {args.tolerance}", file=sys.stderr)
        return EXIT_ALGORITHM
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="orinorm",
                                     description="Oriented point-cloud normal estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape with GT normals")
    p.add_argument("--shape", required=True, choices=["sphere", "torus", "box", "plane"])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--noise", type=float, default=0.0,
                   help="Gaussian sigma as a fraction of the bbox diagonal")
    p.add_argument("--density", choices=["none", "stripe", "gradient"], default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("estimate", help="estimate normals for a .xyz cloud")
    p.add_argument("--method", required=True, choices=["pca", "jet", "shs"])
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--order", type=int, default=2, help="jet order")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("orient", help="MST orientation propagation")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--normals", required=True)
    p.add_argument("--k-graph", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_orient)

    p = sub.add_parser("train", help="train the learned model")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--history", default="loss_history.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate predicted normals")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help=".normals file or 6-column .xyz")
    p.add_argument("--oriented", action="store_true")
    p.add_argument("--majority-flip", action="store_true")
    p.add_argument("--report", default="report.txt")
    p.add_argument("--heatmap", help="optional per-point error CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--c", type=int, default=8)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=None,
                   help="probe at most this many parameter entries")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except OrinormError as exc:
        print(str(exc), file=sys.stderr)
        code = EXIT_ALGORITHM
    sys.exit(code)


if __name__ == "__main__":
    main()
