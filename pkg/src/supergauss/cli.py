"""Command-line entry point: gen-data, train, eval, group, render, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import autograd as ag
from .config import ConfigError, RunConfig, apply_overrides, describe_fields
from .data import (DatasetError, depth_preview, generate_synthetic, load_dataset, save_dataset, write_depth,
                   write_image)

EXIT_CONFIG, EXIT_VERSION, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4, 5


def _config_epilog() -> str:
    lines = ["configuration fields (override with --set key=value):"]
    for name, typ, default in describe_fields():
        lines.append(f"  {name:34s} {typ:6s} default: {json.dumps(default)}")
    return "\n".join(lines)


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    config = apply_overrides(config, getattr(args, "set", None) or [])
    if getattr(args, "data", None):
        config.data = args.data
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    config.validate()
    return config


def _dataset_for(config: RunConfig):
    if config.data is not None:
        return load_dataset(config.data)
    return generate_synthetic(config.synthetic)[0]


def _add_config_args(p):
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration field")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    dataset, gt = generate_synthetic(config.synthetic)
    out = args.out or config.out_dir
    save_dataset(out, dataset)
    from .scene import save_ply
    save_ply(os.path.join(out, "gt_scene.ply"), gt)
    with open(os.path.join(out, "generator.json"), "w") as fh:
        json.dump(config.to_dict()["synthetic"], fh, indent=2)
    print(f"wrote {len(dataset.train)} train / {len(dataset.eval)} eval views and {len(gt)} Gaussians to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import load_checkpoint, resume, train
    if args.resume:
        state = load_checkpoint(args.resume)
        if args.set:
            state.config = apply_overrides(state.config, args.set)
        out = args.out or state.config.out_dir
        dataset = _dataset_for(state.config)
        _, report = resume(state, dataset, out, _progress(args), args.checkpoint_every)
    else:
        config = _load_config(args)
        out = config.out_dir
        os.makedirs(out, exist_ok=True)
        config.save(os.path.join(out, "config.json"))
        _, report = train(config, out_dir=out, progress=_progress(args), checkpoint_every=args.checkpoint_every)
    fm = report["final_metrics"]
    print(f"eval PSNR {fm['psnr']:.2f} dB, SSIM {fm['ssim']:.4f}, depth SROCC {fm['srocc']}; report in "
          f"{os.path.join(out, 'report.json')}")
    return 0


def _progress(args):
    every = getattr(args, "log_every", 0)
    if not every:
        return None

    def report(state):
        if state.iteration % every == 0:
            h = state.history[-1]
            print(f"iter {state.iteration:6d}  loss {h['loss']:.5f}  l1 {h['l1']:.5f}  pos {h['pos']:.5f}",
                  flush=True)
    return report


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_checkpoint
    state = load_checkpoint(args.checkpoint)
    if args.data:
        state.config.data = args.data
    dataset = _dataset_for(state.config)
    views = dataset.train if args.split == "train" else dataset.eval
    metrics = evaluate(state, views)
    text = json.dumps(metrics, indent=2)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    print(text)
    return 0


def cmd_group(args) -> int:
    from .neighborhood import build_knn, descriptors, dump_descriptors_csv, grouping_features
    from .partition import group_stats, tune_mu
    from .scene import load_ply, save_group_points, save_ply
    path = args.scene or os.path.join(args.data, "gt_scene.ply")
    scene = load_ply(path)
    graph = descriptors(scene.positions, build_knn(scene.positions, min(args.k, len(scene) - 1)))
    z, _ = grouping_features(scene, graph)
    search = tune_mu(z, graph.edges, (args.target[0], args.target[1]), args.min_group_size)
    part = group_stats(search.partition, scene)
    os.makedirs(args.out, exist_ok=True)
    labels = scene.group_ids.copy()
    scene.group_ids = part.assignment
    save_group_points(os.path.join(args.out, "groups.ply"), scene.positions, part.assignment)
    save_ply(os.path.join(args.out, "grouped_scene.ply"), scene)
    dump_descriptors_csv(os.path.join(args.out, "descriptors.csv"), graph)
    summary = {**part.summary(), "in_range": bool(search.in_range), "evaluations": search.evaluations,
               "centroids": part.centroids.tolist(),
               "group_descriptors": {"linearity": part.linearity.tolist(), "planarity": part.planarity.tolist(),
                                     "scattering": part.scattering.tolist(),
                                     "verticality": part.verticality.tolist()}}
    if np.all(labels >= 0):
        from .data import cluster_purity
        summary["purity_vs_file_labels"] = cluster_purity(labels, part.assignment)
    with open(os.path.join(args.out, "partition.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"G = {part.n_groups} (mu = {search.mu:.4g}), sizes {part.sizes.tolist()}; outputs in {args.out}")
    return 0


def cmd_render(args) -> int:
    from .trainer import load_checkpoint, render_view
    state = load_checkpoint(args.checkpoint)
    if args.data:
        state.config.data = args.data
    dataset = _dataset_for(state.config)
    views = {"train": dataset.train, "eval": dataset.eval, "all": dataset.views}[args.split]
    os.makedirs(args.out, exist_ok=True)
    for view in views:
        out, _ = render_view(state, view.camera)
        val = out.value
        stem = os.path.join(args.out, f"{view.split}_{view.name}")
        write_image(stem + f".{args.format}", val[..., :3])
        valid = val[..., 4] > 0.5
        write_depth(stem + "_depth.bin", val[..., 3])
        write_image(stem + "_depth.png", depth_preview(val[..., 3], valid))
    print(f"rendered {len(views)} views to {args.out}")
    return 0


def cmd_report(args) -> int:
    from .report import load_report, write_outputs
    report = load_report(args.report)
    written = write_outputs(report, args.out, plot=not args.no_plot)
    print("\n".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supergauss", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen-data", help="write the synthetic cluster dataset", epilog=_config_epilog(),
                       formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="optimize a scene", epilog=_config_epilog(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory (default: generate the synthetic scene in memory)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint directory")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--output", help="write the metrics JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("group", help="partition a scene into supergaussians")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="Gaussian point file")
    src.add_argument("--data", help="dataset directory holding gt_scene.ply")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--target", type=int, nargs=2, default=(16, 64), metavar=("G_MIN", "G_MAX"))
    p.add_argument("--min-group-size", type=int, default=3)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("render", help="images and depth maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("report", help="tables and plots from a run report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .trainer import TrainingDivergedError
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ag.CheckpointVersionError as err:
        print(f"version error: {err}", file=sys.stderr)
        return EXIT_VERSION
    except (DatasetError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as err:
        print(f"training diverged:\n{err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
