"""Dual-branch detection orchestration.

Branch A sees the resized full frame and detects the large classes; branch B
sees each grid tile and detects the small classes. Tile outputs are remapped
to global coordinates and the union of both branches is fused with
class-wise NMS. ``resize-only`` mode routes every class through branch A and
never touches the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .backends import Backend, BackendDescriptor, BackendError, InferenceRequest, build_backend
from .dataset import Annotation, ClassRegistry, DatasetIndex, ImageRecord
from .geometry import BBox, ScoredBox, nms
from .tiling import GridSpec, make_grid, remap_detections

MODES = ("mspad", "resize-only")

#: Default routing for the five-class power line registry: only the damper
#: (the smallest class) goes through the tiled branch.
DEFAULT_TILED_LABELS = ("damper",)


class PipelineError(Exception):
    """Backend failure wrapped with image/branch/tile context."""


@dataclass(frozen=True)
class ClassRouting:
    tiled_classes: FrozenSet[int]
    resized_classes: FrozenSet[int]

    def __post_init__(self):
        if self.tiled_classes & self.resized_classes:
            raise ValueError("tiled and resized class sets overlap")

    @classmethod
    def for_registry(
        cls, registry: ClassRegistry, tiled_labels: Sequence[str] = DEFAULT_TILED_LABELS
    ) -> "ClassRouting":
        tiled = set()
        for label in tiled_labels:
            class_id = registry.id_for(label)
            if class_id is None:
                raise ValueError(f"unknown label in routing: {label!r}")
            tiled.add(class_id)
        resized = set(registry.ids) - tiled
        return cls(frozenset(tiled), frozenset(resized))

    def validate_for(self, registry: ClassRegistry) -> None:
        if self.tiled_classes | self.resized_classes != set(registry.ids):
            raise ValueError("routing does not cover the full class registry")


@dataclass(frozen=True)
class PipelineConfig:
    routing: ClassRouting
    grid: GridSpec = GridSpec(4, 4)
    resized_branch_input: Tuple[int, int] = (512, 512)
    fusion_nms_iou: float = 0.5
    mode: str = "mspad"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode!r}")
        if not 0.0 <= self.fusion_nms_iou <= 1.0:
            raise ValueError(f"fusion_nms_iou out of range: {self.fusion_nms_iou}")


def run_image(
    record: ImageRecord,
    config: PipelineConfig,
    branch_a: Backend,
    branch_b: Optional[Backend],
    registry: ClassRegistry,
    truth: Optional[Sequence[Annotation]] = None,
) -> List[ScoredBox]:
    """Detect on a single image; returns global-frame detections sorted by
    descending score, each tagged with (branch, tile_id) provenance."""
    frame = BBox(0, 0, record.width, record.height)
    if config.mode == "resize-only":
        allowed_a: FrozenSet[int] = frozenset(registry.ids)
    else:
        allowed_a = config.routing.resized_classes

    raw: List[ScoredBox] = []
    request = InferenceRequest(record.image_id, frame, config.resized_branch_input, allowed_a)
    try:
        dets_a = branch_a.infer(request, truth)
    except BackendError as exc:
        raise PipelineError(f"image {record.image_id!r}, branch A (resized): {exc}") from exc
    for det in dets_a:
        if det.class_id not in allowed_a:
            continue
        raw.append(replace(det, provenance=("resized", None)))

    if config.mode == "mspad":
        tiles = make_grid(record.width, record.height, config.grid)
        for tile in tiles:
            req = InferenceRequest(
                record.image_id,
                tile.region,
                (int(tile.region.width), int(tile.region.height)),
                config.routing.tiled_classes,
            )
            try:
                local = branch_b.infer(req, truth)
            except BackendError as exc:
                raise PipelineError(
                    f"image {record.image_id!r}, branch B (tiled), tile {tile.tile_id}: {exc}"
                ) from exc
            local = [d for d in local if d.class_id in config.routing.tiled_classes]
            for det in remap_detections(tile.tile_id, tiles, local):
                raw.append(replace(det, provenance=("tiled", tile.tile_id)))

    fused = nms(raw, config.fusion_nms_iou)
    return sorted(fused, key=lambda d: (-d.score, d.box.as_tuple(), d.class_id))


def run_dataset(
    index: DatasetIndex,
    config: PipelineConfig,
    branch_a: BackendDescriptor | Backend,
    branch_b: Optional[BackendDescriptor | Backend] = None,
    use_truth: bool = True,
    fail_fast: bool = True,
    threads: int = 1,
) -> Tuple[Dict[str, List[ScoredBox]], Dict[str, str]]:
    """Run the pipeline over every image in the index.

    Returns (detections keyed by image_id, failures keyed by image_id).
    With fail_fast (default) the first failure raises instead. Images are
    independent work units; with threads > 1 they run concurrently unless a
    backend declares single-flight. Output is deterministic either way.
    """
    config.routing.validate_for(index.registry)

    def as_backend(b):
        if b is None or isinstance(b, Backend):
            return b, False
        return build_backend(b, index.registry), True

    backend_a, own_a = as_backend(branch_a)
    backend_b, own_b = as_backend(branch_b)
    if config.mode == "mspad" and backend_b is None:
        raise PipelineError("mspad mode requires a branch B backend")

    for desc in (branch_a, branch_b):
        if isinstance(desc, BackendDescriptor) and desc.single_flight:
            threads = 1

    results: Dict[str, List[ScoredBox]] = {}
    failures: Dict[str, str] = {}

    def work(record: ImageRecord) -> List[ScoredBox]:
        truth = record.annotations if use_truth else None
        return run_image(record, config, backend_a, backend_b, index.registry, truth)

    records = sorted(index.images, key=lambda r: r.image_id)
    try:
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = {r.image_id: pool.submit(work, r) for r in records}
            for image_id, fut in futures.items():
                try:
                    results[image_id] = fut.result()
                except PipelineError as exc:
                    if fail_fast:
                        raise
                    failures[image_id] = str(exc)
        else:
            for record in records:
                try:
                    results[record.image_id] = work(record)
                except PipelineError as exc:
                    if fail_fast:
                        raise
                    failures[record.image_id] = str(exc)
    finally:
        if own_a and backend_a is not None:
            backend_a.close()
        if own_b and backend_b is not None:
            backend_b.close()
    return results, failures
