"""Seeded dataset splitting and Monte Carlo cross-validation.

Splits use Python's Mersenne Twister (random.Random) with explicit seeds, so
assignments reproduce across platforms. Monte Carlo runs feed the SAME split
to both pipeline modes so their reports are directly comparable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .backends import Backend, BackendDescriptor
from .dataset import DatasetIndex
from .evaluation import AggregateReport, EvalConfig, EvalReport, aggregate, evaluate
from .pipeline import PipelineConfig, run_dataset


class SplitError(Exception):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0,1): {self.train_fraction}")


@dataclass(frozen=True)
class CVSpec:
    """k Monte Carlo runs; per-run seeds are derived from master_seed."""

    k: int = 5
    train_fraction: float = 0.8
    master_seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1: {self.k}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0,1): {self.train_fraction}")

    def run_specs(self) -> List[SplitSpec]:
        rng = random.Random(self.master_seed)
        return [
            SplitSpec(self.train_fraction, rng.randrange(2**32)) for _ in range(self.k)
        ]


@dataclass(frozen=True)
class SplitAssignment:
    run_index: int
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]


def make_split(index: DatasetIndex, spec: SplitSpec, run_index: int = 0) -> SplitAssignment:
    """Seeded uniform shuffle; the first round(train_fraction * N) ids train."""
    ids = sorted(r.image_id for r in index.images)
    n = len(ids)
    if n < 2:
        raise SplitError(f"need at least 2 images to split, got {n}")
    rng = random.Random(spec.seed)
    rng.shuffle(ids)
    n_train = int(spec.train_fraction * n + 0.5)
    n_train = min(max(n_train, 1), n - 1)
    return SplitAssignment(
        run_index=run_index,
        train_ids=tuple(sorted(ids[:n_train])),
        test_ids=tuple(sorted(ids[n_train:])),
    )


@dataclass(frozen=True)
class ModeSetup:
    """Pipeline configuration plus backends for one mode."""

    config: PipelineConfig
    branch_a: BackendDescriptor | Backend
    branch_b: Optional[BackendDescriptor | Backend] = None


@dataclass(frozen=True)
class MonteCarloResult:
    assignments: Tuple[SplitAssignment, ...]
    original_runs: Tuple[EvalReport, ...]
    mspad_runs: Tuple[EvalReport, ...]
    original_aggregate: AggregateReport
    mspad_aggregate: AggregateReport


def run_monte_carlo(
    index: DatasetIndex,
    cv: CVSpec,
    original: ModeSetup,
    mspad: ModeSetup,
    eval_config: EvalConfig = EvalConfig(),
) -> MonteCarloResult:
    """k seeded splits, each evaluated once per mode on its test set."""
    assignments: List[SplitAssignment] = []
    original_runs: List[EvalReport] = []
    mspad_runs: List[EvalReport] = []
    for i, spec in enumerate(cv.run_specs()):
        assignment = make_split(index, spec, run_index=i)
        assignments.append(assignment)
        test_index = index.subset(assignment.test_ids)
        for setup, sink in ((original, original_runs), (mspad, mspad_runs)):
            try:
                detections, _ = run_dataset(
                    test_index, setup.config, setup.branch_a, setup.branch_b
                )
                sink.append(evaluate(test_index, detections, eval_config))
            except Exception as exc:
                raise SplitError(f"run {i} ({setup.config.mode}): {exc}") from exc
    return MonteCarloResult(
        assignments=tuple(assignments),
        original_runs=tuple(original_runs),
        mspad_runs=tuple(mspad_runs),
        original_aggregate=aggregate(original_runs),
        mspad_aggregate=aggregate(mspad_runs),
    )
