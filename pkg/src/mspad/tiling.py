"""Grid tiling of high-resolution frames.

Slices an image frame into a rows x cols grid of regions, projects
annotations into tile-local coordinates, and remaps tile-local detections
back to the global frame. Remainder pixels from the integer division go to
the last row/column so the grid always covers every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .dataset import Annotation, ImageRecord
from .geometry import BBox, ScoredBox, clip, translate

TileId = Tuple[int, int]


@dataclass(frozen=True)
class GridSpec:
    """Grid layout; overlap (pixels added on every inner tile edge) defaults
    to 0 and all standard-protocol runs use 0."""

    rows: int = 4
    cols: int = 4
    overlap: float = 0.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1: {self.rows}x{self.cols}")
        if self.overlap < 0:
            raise ValueError(f"negative overlap: {self.overlap}")


@dataclass(frozen=True)
class TileRegion:
    tile_id: TileId
    region: BBox


@dataclass(frozen=True)
class TileProjectionPolicy:
    """Minimum visible fraction (clipped area / original area) for an
    annotation to survive projection into a tile."""

    min_visible_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.min_visible_fraction <= 1.0:
            raise ValueError(f"min_visible_fraction must be in (0,1]: {self.min_visible_fraction}")


def make_grid(width: int, height: int, spec: GridSpec = GridSpec()) -> List[TileRegion]:
    """Partition a width x height frame into rows*cols tile regions.

    Cell size is floor(width/cols) x floor(height/rows); the last column/row
    absorbs the remainder. With nonzero overlap each region is grown by
    ``overlap`` px per side and clipped to the frame.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"non-positive frame: {width}x{height}")
    cell_w = width // spec.cols
    cell_h = height // spec.rows
    if cell_w < 1 or cell_h < 1:
        raise ValueError(
            f"grid {spec.rows}x{spec.cols} too fine for {width}x{height} frame"
        )
    frame = BBox(0, 0, width, height)
    tiles: List[TileRegion] = []
    for r in range(spec.rows):
        y0 = r * cell_h
        y1 = height if r == spec.rows - 1 else (r + 1) * cell_h
        for c in range(spec.cols):
            x0 = c * cell_w
            x1 = width if c == spec.cols - 1 else (c + 1) * cell_w
            region = BBox(x0, y0, x1, y1)
            if spec.overlap:
                region = clip(
                    BBox(
                        x0 - spec.overlap,
                        y0 - spec.overlap,
                        x1 + spec.overlap,
                        y1 + spec.overlap,
                    ),
                    frame,
                )
            tiles.append(TileRegion((r, c), region))
    return tiles


def _tile_map(tiles: Sequence[TileRegion]) -> Dict[TileId, TileRegion]:
    return {t.tile_id: t for t in tiles}


def project_annotations(
    record: ImageRecord,
    tiles: Sequence[TileRegion],
    policy: TileProjectionPolicy = TileProjectionPolicy(),
    classes: Optional[Set[int]] = None,
) -> Dict[TileId, List[Annotation]]:
    """Project annotations into tile-local coordinates.

    An annotation lands in every tile where its clipped area is at least
    ``min_visible_fraction`` of its original area; it is clipped to the tile
    and translated to the tile's local frame. ``classes`` restricts which
    class ids are projected (None = all).
    """
    out: Dict[TileId, List[Annotation]] = {t.tile_id: [] for t in tiles}
    for tile in tiles:
        for ann in record.annotations:
            if classes is not None and ann.class_id not in classes:
                continue
            if ann.box.area == 0.0:
                continue
            clipped = clip(ann.box, tile.region)
            if clipped is None:
                continue
            if clipped.area / ann.box.area < policy.min_visible_fraction:
                continue
            local = translate(clipped, -tile.region.x_min, -tile.region.y_min)
            out[tile.tile_id].append(Annotation(ann.class_id, local))
    return out


def remap_detections(
    tile_id: TileId,
    tiles: Sequence[TileRegion],
    dets: Sequence[ScoredBox],
) -> List[ScoredBox]:
    """Translate tile-local detections into the global frame.

    Scores and classes are unchanged; boxes are clipped to the image bounds
    (the union of all tile regions). Boxes with no positive area inside the
    frame are dropped.
    """
    by_id = _tile_map(tiles)
    if tile_id not in by_id:
        raise KeyError(f"unknown tile id: {tile_id}")
    origin = by_id[tile_id].region
    frame = BBox(
        min(t.region.x_min for t in tiles),
        min(t.region.y_min for t in tiles),
        max(t.region.x_max for t in tiles),
        max(t.region.y_max for t in tiles),
    )
    out: List[ScoredBox] = []
    for det in dets:
        moved = translate(det.box, origin.x_min, origin.y_min)
        clipped = clip(moved, frame)
        if clipped is None:
            continue
        out.append(replace(det, box=clipped))
    return out
