"""Multi-size detection toolkit for high-resolution power line inspection imagery.

Provides grid tiling, class-routed dual-branch inference behind pluggable
backends, NMS fusion, VOC-style AP/mAP evaluation, and Monte Carlo
cross-validation drivers, plus a CLI wiring them into batch workflows.
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1

from .geometry import BBox, ScoredBox, iou, translate, clip, nms
from .dataset import (
    ClassRegistry,
    Annotation,
    ImageRecord,
    DatasetIndex,
    DatasetStats,
    parse_annotation_file,
    load_dataset,
    compute_stats,
)
from .tiling import GridSpec, TileRegion, TileProjectionPolicy, make_grid, project_annotations, remap_detections
from .backends import BackendDescriptor, InferenceRequest, JitterModel, build_backend, infer
from .pipeline import ClassRouting, PipelineConfig, run_image, run_dataset
from .evaluation import EvalConfig, EvalReport, AggregateReport, match, average_precision, evaluate, aggregate
from .splits import SplitSpec, CVSpec, SplitAssignment, make_split, run_monte_carlo
