"""Pluggable detector backends.

A backend answers InferenceRequests with scored boxes in region-local
coordinates. Four kinds ship with the toolkit, none of which involves a
neural network:

- ``oracle``: returns the ground-truth annotations intersecting the request
  region, translated to region-local coordinates, score 1.0.
- ``jittered-oracle``: the oracle degraded by seeded coordinate noise,
  misses, score spread, and spurious boxes, for harness experiments.
- ``file-replay``: replays detections recorded in per-image documents keyed
  by region.
- ``external-process``: line-delimited JSON request/response over a child
  process's stdin/stdout, so any real inference stack can plug in.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataset import Annotation, ClassRegistry
from .geometry import BBox, ScoredBox, intersection_area, translate

BACKEND_KINDS = ("oracle", "jittered-oracle", "file-replay", "external-process")


class BackendError(Exception):
    """Base for backend failures."""


class ReplayMissError(BackendError):
    """No stored response for the requested (image_id, region)."""


class BackendProcessError(BackendError):
    """External inference process failed or spoke garbage."""


def region_key(region: BBox) -> str:
    return ",".join(f"{v:g}" for v in region.as_tuple())


@dataclass(frozen=True)
class InferenceRequest:
    image_id: str
    region: BBox
    resize_to: Tuple[int, int]
    allowed_classes: FrozenSet[int]

    def __post_init__(self):
        if self.region.area <= 0:
            raise ValueError(f"request region has no area: {self.region}")
        if self.resize_to[0] <= 0 or self.resize_to[1] <= 0:
            raise ValueError(f"non-positive resize_to: {self.resize_to}")


@dataclass(frozen=True)
class JitterModel:
    """Noise model degrading the oracle: gaussian coordinate noise, uniform
    score spread (matched boxes score 1 - u*score_spread), Bernoulli misses,
    and Poisson spurious boxes per request."""

    coordinate_noise_sigma: float = 0.0
    score_spread: float = 0.0
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.coordinate_noise_sigma < 0:
            raise ValueError("negative coordinate_noise_sigma")
        if not 0.0 <= self.score_spread <= 1.0:
            raise ValueError("score_spread must be in [0,1]")
        if not 0.0 <= self.miss_rate < 1.0:
            raise ValueError("miss_rate must be in [0,1)")
        if self.false_positive_rate < 0:
            raise ValueError("negative false_positive_rate")


@dataclass(frozen=True)
class BackendDescriptor:
    """Which backend to build, plus its parameters.

    kind ``oracle`` needs nothing; ``jittered-oracle`` needs ``jitter``;
    ``file-replay`` needs ``replay_path``; ``external-process`` needs
    ``command``. ``single_flight`` declares the backend unsafe for
    concurrent requests.
    """

    kind: str
    jitter: Optional[JitterModel] = None
    replay_path: Optional[str] = None
    command: Optional[str] = None
    single_flight: bool = False

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind: {self.kind!r}")
        if self.kind == "jittered-oracle" and self.jitter is None:
            raise ValueError("jittered-oracle requires a JitterModel")
        if self.kind == "file-replay" and not self.replay_path:
            raise ValueError("file-replay requires replay_path")
        if self.kind == "external-process" and not self.command:
            raise ValueError("external-process requires command")


class Backend:
    """Backend interface: infer() answers one request."""

    needs_truth = False

    def infer(
        self, request: InferenceRequest, truth: Optional[Sequence[Annotation]] = None
    ) -> List[ScoredBox]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _truth_in_region(
    truth: Sequence[Annotation], request: InferenceRequest
) -> List[Annotation]:
    """Ground truth relevant to a request: boxes of allowed classes with
    positive overlap with the region, translated to region-local coordinates
    at full extent (not clipped, so straddling boxes stay exact)."""
    out = []
    for ann in truth:
        if ann.class_id not in request.allowed_classes:
            continue
        if intersection_area(ann.box, request.region) <= 0.0:
            continue
        local = translate(ann.box, -request.region.x_min, -request.region.y_min)
        out.append(Annotation(ann.class_id, local))
    return out


class OracleBackend(Backend):
    needs_truth = True

    def infer(self, request, truth=None):
        if truth is None:
            raise BackendError("oracle backend requires ground truth")
        return [
            ScoredBox(ann.box, ann.class_id, 1.0)
            for ann in _truth_in_region(truth, request)
        ]


class JitteredOracleBackend(Backend):
    needs_truth = True

    def __init__(self, model: JitterModel):
        self.model = model

    def _rng(self, request: InferenceRequest) -> np.random.Generator:
        # Seed from (model seed, request identity) so responses are
        # deterministic and independent of request ordering.
        entropy = [
            self.model.seed,
            zlib.crc32(request.image_id.encode()),
            zlib.crc32(region_key(request.region).encode()),
        ]
        return np.random.default_rng(np.random.SeedSequence(entropy))

    def infer(self, request, truth=None):
        if truth is None:
            raise BackendError("jittered-oracle backend requires ground truth")
        m = self.model
        rng = self._rng(request)
        out: List[ScoredBox] = []
        for ann in _truth_in_region(truth, request):
            # Draw everything before branching so the noise realization per
            # box is identical across sigma values (common random numbers).
            noise = rng.standard_normal(4)
            u_score = rng.uniform()
            u_miss = rng.uniform()
            if u_miss < m.miss_rate:
                continue
            x0, y0, x1, y1 = ann.box.as_tuple() + m.coordinate_noise_sigma * np.array(
                [noise[0], noise[1], noise[2], noise[3]]
            )
            box = BBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
            out.append(ScoredBox(box, ann.class_id, 1.0 - u_score * m.score_spread))
        n_fp = int(rng.poisson(m.false_positive_rate))
        classes = sorted(request.allowed_classes)
        w = request.region.width
        h = request.region.height
        for _ in range(n_fp):
            if not classes:
                break
            cls = classes[int(rng.integers(len(classes)))]
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            bw, bh = rng.uniform(2, max(3.0, w / 8)), rng.uniform(2, max(3.0, h / 8))
            box = BBox(cx, cy, min(cx + bw, w + bw), min(cy + bh, h + bh))
            out.append(ScoredBox(box, cls, float(rng.uniform(0, 1))))
        return out


def _parse_detection(entry: Mapping, registry: ClassRegistry) -> Optional[ScoredBox]:
    class_id = registry.id_for(str(entry["label"]))
    if class_id is None:
        raise BackendError(f"detection with unknown label: {entry['label']!r}")
    x0, y0, x1, y1 = entry["box"]
    return ScoredBox(BBox(x0, y0, x1, y1), class_id, float(entry["score"]))


class FileReplayBackend(Backend):
    """Replays detections from a directory of per-image JSON documents (or a
    single such document), each mapping region keys to detection lists."""

    def __init__(self, path: str, registry: ClassRegistry):
        self.path = Path(path)
        self.registry = registry
        self._cache: Dict[str, Mapping] = {}

    def _doc_for(self, image_id: str) -> Mapping:
        if image_id in self._cache:
            return self._cache[image_id]
        if self.path.is_dir():
            doc_path = self.path / f"{image_id}.json"
            if not doc_path.is_file():
                raise ReplayMissError(f"no replay document for image {image_id!r} in {self.path}")
            doc = json.loads(doc_path.read_text())
        else:
            doc = json.loads(self.path.read_text())
            if doc.get("image_id") != image_id:
                raise ReplayMissError(
                    f"replay file {self.path} holds {doc.get('image_id')!r}, not {image_id!r}"
                )
        self._cache[image_id] = doc
        return doc

    def infer(self, request, truth=None):
        doc = self._doc_for(request.image_id)
        key = region_key(request.region)
        regions = doc.get("detections", {})
        if key not in regions:
            raise ReplayMissError(
                f"no stored response for image {request.image_id!r} region [{key}]"
            )
        dets = []
        for entry in regions[key]:
            det = _parse_detection(entry, self.registry)
            if det.class_id in request.allowed_classes:
                dets.append(det)
        return dets


class ExternalProcessBackend(Backend):
    """Line-delimited JSON over a child process's stdin/stdout.

    Request line:  {"request_id", "image_id", "region": [x0,y0,x1,y1],
                    "resize_to": [w,h], "allowed_classes": [labels]}
    Response line: {"request_id", "detections": [{"label", "score",
                    "box": [x0,y0,x1,y1]}]} in region-local pixels.
    Responses may arrive out of order; request_id correlates.
    """

    def __init__(self, command: str, registry: ClassRegistry):
        self.registry = registry
        self._next_id = 0
        self._pending: Dict[int, Mapping] = {}
        try:
            self._proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
            )
        except OSError as exc:
            raise BackendProcessError(f"cannot start backend process {command!r}: {exc}") from exc

    def _fail(self, message: str) -> BackendProcessError:
        stderr = ""
        if self._proc.poll() is not None:
            try:
                stderr = self._proc.stderr.read()
            except Exception:
                pass
        else:
            self._proc.kill()
            stderr = self._proc.stderr.read()
        code = self._proc.wait()
        return BackendProcessError(f"{message} (exit status {code}; stderr: {stderr.strip()!r})")

    def infer(self, request, truth=None):
        rid = self._next_id
        self._next_id += 1
        line = json.dumps(
            {
                "request_id": rid,
                "image_id": request.image_id,
                "region": list(request.region.as_tuple()),
                "resize_to": list(request.resize_to),
                "allowed_classes": sorted(
                    self.registry.label_for(c) for c in request.allowed_classes
                ),
            }
        )
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise self._fail("backend process closed its stdin")
        while rid not in self._pending:
            raw = self._proc.stdout.readline()
            if not raw:
                raise self._fail("backend process ended before responding")
            try:
                msg = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise BackendProcessError(f"unparseable response line {raw!r}: {exc}") from exc
            self._pending[int(msg["request_id"])] = msg
        msg = self._pending.pop(rid)
        dets = []
        for entry in msg.get("detections", []):
            det = _parse_detection(entry, self.registry)
            if det.class_id in request.allowed_classes:
                dets.append(det)
        return dets

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


def build_backend(descriptor: BackendDescriptor, registry: ClassRegistry) -> Backend:
    if descriptor.kind == "oracle":
        return OracleBackend()
    if descriptor.kind == "jittered-oracle":
        return JitteredOracleBackend(descriptor.jitter)
    if descriptor.kind == "file-replay":
        return FileReplayBackend(descriptor.replay_path, registry)
    if descriptor.kind == "external-process":
        return ExternalProcessBackend(descriptor.command, registry)
    raise ValueError(f"unknown backend kind: {descriptor.kind!r}")


def infer(
    descriptor: BackendDescriptor,
    request: InferenceRequest,
    truth: Optional[Sequence[Annotation]] = None,
    registry: Optional[ClassRegistry] = None,
) -> List[ScoredBox]:
    """One-shot convenience: build the backend, answer one request."""
    with build_backend(descriptor, registry or ClassRegistry()) as backend:
        return backend.infer(request, truth)
