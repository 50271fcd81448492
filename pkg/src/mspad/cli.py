"""Command-line entry point.

Subcommands: stats, slice, detect, eval, cv. Exit status 0 on success, 1 on
domain errors (reported on stderr), 2 on usage errors. Every run logs its
fully-resolved configuration to <out>/run_config.json; report paths write a
plain-text table, CSV, JSON, and a rendered figure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import FORMAT_VERSION, __version__
from .backends import BackendDescriptor, BackendError, JitterModel, region_key
from .dataset import ClassRegistry, DatasetError, compute_stats, load_dataset
from .evaluation import EvalConfig, EvaluationError, evaluate
from .geometry import BBox
from .pipeline import ClassRouting, PipelineConfig, PipelineError, run_dataset
from .splits import CVSpec, ModeSetup, SplitError, run_monte_carlo
from .tiling import GridSpec, TileProjectionPolicy, make_grid, project_annotations
from . import reporting

DATASET_ROOT_ENV = "MSPAD_DATASET_ROOT"


class CliError(Exception):
    """Domain error surfaced to the user with exit status 1."""


def parse_backend(spec: str) -> BackendDescriptor:
    """Parse a backend descriptor string.

    Forms: ``oracle``, ``jitter:sigma=2,miss=0.1,fp=0.5,spread=0.2,seed=7``,
    ``replay:PATH``, ``process:COMMAND``.
    """
    kind, _, rest = spec.partition(":")
    if kind == "oracle":
        return BackendDescriptor("oracle")
    if kind == "jitter":
        params = {}
        if rest:
            for item in rest.split(","):
                key, _, value = item.partition("=")
                params[key.strip()] = float(value)
        model = JitterModel(
            coordinate_noise_sigma=params.pop("sigma", 0.0),
            score_spread=params.pop("spread", 0.0),
            miss_rate=params.pop("miss", 0.0),
            false_positive_rate=params.pop("fp", 0.0),
            seed=int(params.pop("seed", 0)),
        )
        if params:
            raise CliError(f"unknown jitter parameters: {sorted(params)}")
        return BackendDescriptor("jittered-oracle", jitter=model)
    if kind == "replay":
        if not rest:
            raise CliError("replay backend needs a path: replay:PATH")
        return BackendDescriptor("file-replay", replay_path=rest)
    if kind == "process":
        if not rest:
            raise CliError("process backend needs a command: process:CMD")
        return BackendDescriptor("external-process", command=rest, single_flight=True)
    raise CliError(f"unknown backend descriptor: {spec!r}")


def _parse_grid(text: str) -> GridSpec:
    try:
        rows, cols = text.lower().split("x")
        return GridSpec(int(rows), int(cols))
    except ValueError as exc:
        raise CliError(f"bad grid spec {text!r}, expected ROWSxCOLS") from exc


def _load_registry(path: Optional[str]) -> ClassRegistry:
    if path is None:
        return ClassRegistry()
    labels = json.loads(Path(path).read_text())
    return ClassRegistry(tuple(labels))


def _resolve_root(arg: Optional[str]) -> str:
    root = arg or os.environ.get(DATASET_ROOT_ENV)
    if not root:
        raise CliError(
            f"no dataset root given and ${DATASET_ROOT_ENV} is not set"
        )
    return root


def _log_config(out_dir: Path, command: str, config: dict) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "toolkit_version": __version__,
        "command": command,
        "config": config,
    }
    reporting.write_json(out_dir / "run_config.json", doc)


# ------------------------------------------------------------- subcommands

def cmd_stats(args) -> int:
    root = _resolve_root(args.root)
    registry = _load_registry(args.registry)
    index, warnings = load_dataset(root, registry)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    stats = compute_stats(index)
    table = reporting.format_stats_table(stats)
    print(table, end="")
    out = Path(args.out)
    _log_config(out, "stats", {"root": str(root), "registry": list(registry)})
    reporting.write_text(out / "stats.txt", table)
    reporting.write_csv(out / "stats.csv", reporting.STATS_HEADER, reporting.stats_rows(stats))
    reporting.write_json(out / "stats.json", reporting.stats_json(stats))
    reporting.plot_class_counts(stats, out / "class_counts.png")
    return 0


def cmd_slice(args) -> int:
    root = _resolve_root(args.root)
    registry = _load_registry(args.registry)
    grid = _parse_grid(args.grid)
    policy = TileProjectionPolicy(args.min_visible_fraction)
    classes = None
    if args.classes:
        classes = set()
        for label in args.classes.split(","):
            class_id = registry.id_for(label)
            if class_id is None:
                raise CliError(f"unknown class label: {label!r}")
            classes.add(class_id)
    index, warnings = load_dataset(root, registry)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.out)
    _log_config(
        out,
        "slice",
        {
            "root": str(root),
            "grid": [grid.rows, grid.cols],
            "min_visible_fraction": policy.min_visible_fraction,
            "classes": sorted(registry.label_for(c) for c in classes) if classes else None,
        },
    )
    for record in index.images:
        tiles = make_grid(record.width, record.height, grid)
        projected = project_annotations(record, tiles, policy, classes)
        manifest = {
            "format_version": FORMAT_VERSION,
            "image_id": record.image_id,
            "width": record.width,
            "height": record.height,
            "grid": [grid.rows, grid.cols],
            "tiles": [
                {
                    "tile_id": list(t.tile_id),
                    "region": list(t.region.as_tuple()),
                    "annotations": [
                        {
                            "label": registry.label_for(a.class_id),
                            "box": list(a.box.as_tuple()),
                        }
                        for a in projected[t.tile_id]
                    ],
                }
                for t in tiles
            ],
        }
        reporting.write_json(out / f"{record.image_id}.json", manifest)
    print(f"wrote {len(index.images)} tile manifests to {out}")
    return 0


def _pipeline_config(args, registry: ClassRegistry) -> PipelineConfig:
    routing = ClassRouting.for_registry(registry, args.tiled_classes.split(","))
    return PipelineConfig(
        routing=routing,
        grid=_parse_grid(args.grid),
        resized_branch_input=(args.resize_width, args.resize_height),
        fusion_nms_iou=args.fusion_iou,
        mode=args.mode,
    )


def cmd_detect(args) -> int:
    root = _resolve_root(args.root)
    registry = _load_registry(args.registry)
    index, warnings = load_dataset(root, registry)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    config = _pipeline_config(args, registry)
    branch_a = parse_backend(args.branch_a)
    branch_b = parse_backend(args.branch_b) if args.branch_b else None
    out = Path(args.out)
    _log_config(
        out,
        "detect",
        {
            "root": str(root),
            "mode": config.mode,
            "grid": [config.grid.rows, config.grid.cols],
            "tiled_classes": sorted(registry.label_for(c) for c in config.routing.tiled_classes),
            "fusion_nms_iou": config.fusion_nms_iou,
            "resized_branch_input": list(config.resized_branch_input),
            "branch_a": args.branch_a,
            "branch_b": args.branch_b,
            "threads": args.threads,
        },
    )
    detections, failures = run_dataset(
        index, config, branch_a, branch_b,
        fail_fast=not args.keep_going, threads=args.threads,
    )
    for image_id, message in sorted(failures.items()):
        print(f"error: {message}", file=sys.stderr)
    frames = {
        r.image_id: BBox(0, 0, r.width, r.height) for r in index.images
    }
    reporting.write_detection_documents(out, detections, frames, registry)
    print(f"wrote {len(detections)} detection documents to {out}")
    return 1 if failures else 0


def cmd_eval(args) -> int:
    registry = _load_registry(args.registry)
    index, warnings = load_dataset(_resolve_root(args.gt), registry)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    detections = reporting.load_detection_documents(args.detections, registry)
    config = EvalConfig(iou_threshold=args.iou, ap_interpolation=args.interp)
    report = evaluate(index, detections, config)
    table = reporting.format_eval_table(report)
    print(table, end="")
    out = Path(args.out)
    _log_config(
        out,
        "eval",
        {
            "gt": str(args.gt),
            "detections": str(args.detections),
            "iou_threshold": config.iou_threshold,
            "ap_interpolation": config.ap_interpolation,
        },
    )
    reporting.write_text(out / "eval.txt", table)
    reporting.write_csv(out / "eval.csv", reporting.EVAL_HEADER, reporting.eval_rows(report))
    reporting.write_json(out / "eval.json", reporting.eval_report_json(report))
    reporting.plot_pr_curves(report, out / "pr_curves.png")
    return 0


def cmd_cv(args) -> int:
    root = _resolve_root(args.root)
    registry = _load_registry(args.registry)
    index, warnings = load_dataset(root, registry)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    routing = ClassRouting.for_registry(registry, args.tiled_classes.split(","))
    grid = _parse_grid(args.grid)
    mspad_config = PipelineConfig(
        routing=routing, grid=grid, fusion_nms_iou=args.fusion_iou, mode="mspad"
    )
    original_config = PipelineConfig(
        routing=routing, grid=grid, fusion_nms_iou=args.fusion_iou, mode="resize-only"
    )
    branch_a = parse_backend(args.branch_a)
    branch_b = parse_backend(args.branch_b)
    original_a = parse_backend(args.original_branch_a) if args.original_branch_a else branch_a
    cv = CVSpec(k=args.k, train_fraction=args.train_frac, master_seed=args.seed)
    eval_config = EvalConfig(iou_threshold=args.iou, ap_interpolation=args.interp)
    out = Path(args.out)
    _log_config(
        out,
        "cv",
        {
            "root": str(root),
            "k": cv.k,
            "train_fraction": cv.train_fraction,
            "master_seed": cv.master_seed,
            "grid": [grid.rows, grid.cols],
            "tiled_classes": sorted(registry.label_for(c) for c in routing.tiled_classes),
            "fusion_nms_iou": args.fusion_iou,
            "branch_a": args.branch_a,
            "branch_b": args.branch_b,
            "original_branch_a": args.original_branch_a or args.branch_a,
            "iou_threshold": eval_config.iou_threshold,
            "ap_interpolation": eval_config.ap_interpolation,
        },
    )
    result = run_monte_carlo(
        index,
        cv,
        original=ModeSetup(original_config, original_a),
        mspad=ModeSetup(mspad_config, branch_a, branch_b),
        eval_config=eval_config,
    )
    for a in result.assignments:
        reporting.write_json(
            out / "splits" / f"run_{a.run_index}.json",
            {
                "format_version": FORMAT_VERSION,
                "run_index": a.run_index,
                "train_ids": list(a.train_ids),
                "test_ids": list(a.test_ids),
            },
        )
    runs_table = reporting.format_runs_table(result.original_runs, result.mspad_runs)
    comparison = reporting.format_comparison_table(
        result.original_aggregate, result.mspad_aggregate
    )
    print(runs_table)
    print(comparison, end="")
    reporting.write_text(out / "runs.txt", runs_table)
    reporting.write_text(out / "comparison.txt", comparison)
    reporting.write_json(out / "cv.json", reporting.monte_carlo_json(result))
    rows = [
        (
            label,
            f"{result.original_aggregate.mean_ap_per_class[label]:.6f}",
            f"{result.mspad_aggregate.mean_ap_per_class[label]:.6f}",
        )
        for label in result.original_aggregate.class_labels
    ]
    rows.append(
        ("mAP", f"{result.original_aggregate.mean_map:.6f}", f"{result.mspad_aggregate.mean_map:.6f}")
    )
    reporting.write_csv(out / "cv.csv", ("label", "original", "mspad"), rows)
    reporting.plot_cv_runs(result, out / "cv_map.png")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mspad",
        description="Multi-size detection toolkit for high-resolution inspection imagery",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"mspad {__version__} (format version {FORMAT_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--registry", help="JSON file with the ordered class label list")
        if needs_out:
            p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("stats", help="dataset statistics report")
    p.add_argument("root", nargs="?", help=f"dataset root (default ${DATASET_ROOT_ENV})")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("slice", help="emit per-image tile manifests")
    p.add_argument("root", nargs="?")
    p.add_argument("--grid", default="4x4")
    p.add_argument("--min-visible-fraction", type=float, default=0.25)
    p.add_argument("--classes", help="comma-separated labels to project (default all)")
    common(p)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("detect", help="run the detection pipeline")
    p.add_argument("root", nargs="?")
    p.add_argument("--mode", choices=["mspad", "resize-only"], default="mspad")
    p.add_argument("--grid", default="4x4")
    p.add_argument("--tiled-classes", default="damper", help="comma-separated labels routed to the tiled branch")
    p.add_argument("--fusion-iou", type=float, default=0.5)
    p.add_argument("--resize-width", type=int, default=512)
    p.add_argument("--resize-height", type=int, default=512)
    p.add_argument("--branch-a", required=True, help="resized-branch backend descriptor")
    p.add_argument("--branch-b", help="tiled-branch backend descriptor (required for mspad mode)")
    p.add_argument("--keep-going", action="store_true", help="continue past per-image failures")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--gt", help=f"ground-truth dataset root (default ${DATASET_ROOT_ENV})")
    p.add_argument("--detections", required=True, help="detection documents (directory or file)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--interp", choices=["all-points", "eleven-point"], default="all-points")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="Monte Carlo cross-validation over both modes")
    p.add_argument("root", nargs="?")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--grid", default="4x4")
    p.add_argument("--tiled-classes", default="damper")
    p.add_argument("--fusion-iou", type=float, default=0.5)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--interp", choices=["all-points", "eleven-point"], default="all-points")
    p.add_argument("--branch-a", required=True)
    p.add_argument("--branch-b", required=True)
    p.add_argument("--original-branch-a", help="override branch A backend in resize-only mode")
    common(p)
    p.set_defaults(func=cmd_cv)

    return parser


DOMAIN_ERRORS = (
    CliError,
    DatasetError,
    EvaluationError,
    PipelineError,
    BackendError,
    SplitError,
    ValueError,
    OSError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
