"""Report rendering and file output.

Every report path emits three forms: an aligned plain-text table, delimited
CSV, and a JSON document carrying a format version, plus matplotlib figures
rendered to files. All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import FORMAT_VERSION
from .backends import region_key
from .dataset import ClassRegistry, DatasetStats
from .evaluation import AggregateReport, EvalReport
from .geometry import BBox, ScoredBox
from .splits import MonteCarloResult


# ---------------------------------------------------------------- atomic io

def _atomic_write(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path: str | Path, text: str) -> None:
    _atomic_write(Path(path), text)


def write_json(path: str | Path, obj) -> None:
    _atomic_write(Path(path), json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write(Path(path), buf.getvalue())


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- stats

STATS_HEADER = ("label", "instances", "instances_per_image", "mean_area_px2", "std_area_px2")


def stats_rows(stats: DatasetStats) -> List[Tuple]:
    rows = [
        (c.label, c.instances, f"{c.instances_per_image:.1f}", f"{c.mean_area:.1f}", f"{c.std_area:.1f}")
        for c in stats.per_class
    ]
    rows.append(
        ("TOTAL", stats.total_instances, f"{stats.instances_per_image:.1f}", "", "")
    )
    return rows


def format_stats_table(stats: DatasetStats) -> str:
    return _table(STATS_HEADER, stats_rows(stats))


def stats_json(stats: DatasetStats) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "classes": [
            {
                "label": c.label,
                "instances": c.instances,
                "instances_per_image": c.instances_per_image,
                "mean_area": c.mean_area,
                "std_area": c.std_area,
            }
            for c in stats.per_class
        ],
        "total_instances": stats.total_instances,
        "total_images": stats.total_images,
        "instances_per_image": stats.instances_per_image,
    }


def plot_class_counts(stats: DatasetStats, path: str | Path) -> None:
    labels = [c.label for c in stats.per_class]
    counts = [c.instances for c in stats.per_class]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, counts, color="steelblue")
    ax.set_ylabel("instances")
    ax.set_title(f"Instances per class ({stats.total_images} images)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -------------------------------------------------------------- detections

def detection_document(
    image_id: str,
    per_region: Mapping[str, Sequence[ScoredBox]],
    registry: ClassRegistry,
) -> dict:
    """Per-image detection document; the same schema the replay backend reads."""
    return {
        "format_version": FORMAT_VERSION,
        "image_id": image_id,
        "detections": {
            key: [
                {
                    "label": registry.label_for(d.class_id),
                    "score": d.score,
                    "box": list(d.box.as_tuple()),
                    **({"provenance": list(d.provenance)} if d.provenance else {}),
                }
                for d in dets
            ]
            for key, dets in per_region.items()
        },
    }


def write_detection_documents(
    out_dir: str | Path,
    detections: Mapping[str, Sequence[ScoredBox]],
    frames: Mapping[str, BBox],
    registry: ClassRegistry,
) -> None:
    out_dir = Path(out_dir)
    for image_id in sorted(detections):
        doc = detection_document(
            image_id, {region_key(frames[image_id]): detections[image_id]}, registry
        )
        write_json(out_dir / f"{image_id}.json", doc)


def load_detection_documents(
    path: str | Path, registry: ClassRegistry
) -> Dict[str, List[ScoredBox]]:
    """Read per-image detection documents, pooling all region keys per image."""
    path = Path(path)
    if path.is_dir():
        # detect runs log run_config.json next to their documents; skip it
        files = sorted(f for f in path.glob("*.json") if f.name != "run_config.json")
    else:
        files = [path]
    out: Dict[str, List[ScoredBox]] = {}
    for f in files:
        doc = json.loads(f.read_text())
        image_id = doc["image_id"]
        dets: List[ScoredBox] = []
        for entries in doc.get("detections", {}).values():
            for e in entries:
                class_id = registry.id_for(e["label"])
                if class_id is None:
                    raise ValueError(f"{f}: unknown label {e['label']!r}")
                x0, y0, x1, y1 = e["box"]
                prov = tuple(e["provenance"]) if "provenance" in e else None
                dets.append(ScoredBox(BBox(x0, y0, x1, y1), class_id, float(e["score"]), prov))
        out.setdefault(image_id, []).extend(dets)
    return out


# ------------------------------------------------------------------- eval

EVAL_HEADER = ("label", "AP", "n_gt", "n_tp", "n_fp", "zero_gt")


def eval_rows(report: EvalReport) -> List[Tuple]:
    rows = []
    for label in report.class_labels:
        c = report.per_class[label]
        rows.append((label, f"{c.ap:.4f}", c.n_gt, c.n_tp, c.n_fp, "yes" if c.zero_gt else ""))
    rows.append(("mAP", f"{report.map_score:.4f}", "", "", "", ""))
    return rows


def format_eval_table(report: EvalReport) -> str:
    head = (
        f"IoU threshold: {report.config.iou_threshold}   "
        f"interpolation: {report.config.ap_interpolation}\n"
    )
    return head + _table(EVAL_HEADER, eval_rows(report))


def eval_report_json(report: EvalReport) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": {
            "iou_threshold": report.config.iou_threshold,
            "ap_interpolation": report.config.ap_interpolation,
        },
        "classes": {
            label: {
                "ap": c.ap,
                "n_gt": c.n_gt,
                "n_tp": c.n_tp,
                "n_fp": c.n_fp,
                "zero_gt": c.zero_gt,
            }
            for label, c in (
                (label, report.per_class[label]) for label in report.class_labels
            )
        },
        "map": report.map_score,
    }


def plot_pr_curves(report: EvalReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    for label in report.class_labels:
        c = report.per_class[label]
        if c.curve.recalls:
            ax.plot(c.curve.recalls, c.curve.precisions, label=f"{label} (AP {c.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"PR curves @ IoU {report.config.iou_threshold}")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -------------------------------------------------------- cross-validation

def format_runs_table(
    original_runs: Sequence[EvalReport], mspad_runs: Sequence[EvalReport]
) -> str:
    """Per-run AP table: one Original/MS-PAD column pair per run."""
    labels = original_runs[0].class_labels
    header = ["label"]
    for i in range(len(original_runs)):
        header += [f"k{i + 1}_original", f"k{i + 1}_mspad"]
    rows = []
    for label in labels:
        row = [label]
        for o, m in zip(original_runs, mspad_runs):
            row += [f"{o.per_class[label].ap:.3f}", f"{m.per_class[label].ap:.3f}"]
        rows.append(row)
    final = ["mAP"]
    for o, m in zip(original_runs, mspad_runs):
        final += [f"{o.map_score:.3f}", f"{m.map_score:.3f}"]
    rows.append(final)
    return _table(header, rows)


def format_comparison_table(
    original_agg: AggregateReport, mspad_agg: AggregateReport
) -> str:
    rows = [
        (label, f"{original_agg.mean_ap_per_class[label]:.3f}", f"{mspad_agg.mean_ap_per_class[label]:.3f}")
        for label in original_agg.class_labels
    ]
    rows.append(("mAP", f"{original_agg.mean_map:.3f}", f"{mspad_agg.mean_map:.3f}"))
    return _table(("label", "original", "mspad"), rows)


def monte_carlo_json(result: MonteCarloResult) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "runs": [
            {
                "run_index": a.run_index,
                "original": eval_report_json(o),
                "mspad": eval_report_json(m),
            }
            for a, o, m in zip(result.assignments, result.original_runs, result.mspad_runs)
        ],
        "aggregate": {
            "original": {
                "per_class": dict(result.original_aggregate.mean_ap_per_class),
                "map": result.original_aggregate.mean_map,
            },
            "mspad": {
                "per_class": dict(result.mspad_aggregate.mean_ap_per_class),
                "map": result.mspad_aggregate.mean_map,
            },
        },
    }


def plot_cv_runs(result: MonteCarloResult, path: str | Path) -> None:
    runs = range(1, len(result.original_runs) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(runs, [r.map_score for r in result.original_runs], "o-", label="original")
    ax.plot(runs, [r.map_score for r in result.mspad_runs], "s-", label="MS-PAD")
    ax.set_xlabel("run")
    ax.set_ylabel("mAP")
    ax.set_xticks(list(runs))
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("Monte Carlo cross-validation mAP per run")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
