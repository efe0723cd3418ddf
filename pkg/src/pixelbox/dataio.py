"""Annotation ingestion, instance filtering, preprocessing, prediction I/O.

File formats (both versioned by a leading format line):

* Annotations: JSON lines. First line ``{"format": "pixelbox/annotations",
  "version": 1}``, then one scene object per line with image_id, dataset,
  width, height, K (9 numbers row-major or null) and a list of instances,
  each carrying instance_id, box [x1, y1, x2, y2] (or null), 16 corner
  coordinates (u1, v1, ..., u8, v8), 8 depths in meters, an optional
  category, and a quality flag.
* Predictions: plain text. First line ``#pixelbox/predictions v1``, then one
  whitespace-separated record per line: instance id, the 16 corner values,
  the 8 depths, and the depth-space tag. Floats are written with ``repr`` so
  a write/read round trip is lossless.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateBox, SchemaError
from .geometry import (
    DEPTH_METRIC,
    DEPTH_VIRTUAL,
    CornerSet,
    Cuboid,
    Intrinsics,
    LetterboxTransform,
    canonical_permutation,
    virtual_depth_convert,
)

ANNOTATION_FORMAT = "pixelbox/annotations"
ANNOTATION_VERSION = 1
PREDICTION_HEADER = "#pixelbox/predictions v1"

QUALITY_GOOD = "good"
QUALITY_TRUNCATED = "truncated"
QUALITY_MISSING_BOX = "missing_box"
QUALITY_FLAGS = (QUALITY_GOOD, QUALITY_TRUNCATED, QUALITY_MISSING_BOX)

REASON_FLAGGED_TRUNCATED = "flagged_truncated"
REASON_CORNERS_OUTSIDE = "corners_outside"
REASON_BOX_DEGENERATE = "box_degenerate"
REASON_AREA = "area_below_min"
#: Closed set of primary rejection reasons emitted by :func:`filter_instances`.
REJECT_REASONS = (
    REASON_FLAGGED_TRUNCATED,
    REASON_CORNERS_OUTSIDE,
    REASON_BOX_DEGENERATE,
    REASON_AREA,
)

MIN_SCALED_AREA = 1024.0


@dataclass
class InstanceRecord:
    """One annotated object: tight 2D box, projected corners, corner depths."""

    instance_id: str
    corners: np.ndarray
    depths: np.ndarray
    box: np.ndarray | None = None
    category: str | None = None
    quality: str = QUALITY_GOOD

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(8, 2)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(8)
        if not np.all(np.isfinite(self.corners)):
            raise ValueError(f"instance {self.instance_id!r}: corners must be finite")
        if np.any(self.depths <= 0) or not np.all(np.isfinite(self.depths)):
            raise ValueError(f"instance {self.instance_id!r}: depths must be positive")
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
            x1, y1, x2, y2 = self.box
            if not (x2 > x1 and y2 > y1):
                raise ValueError(f"instance {self.instance_id!r}: box must have positive extent")
        if self.quality not in QUALITY_FLAGS:
            raise ValueError(f"instance {self.instance_id!r}: unknown quality {self.quality!r}")

    def corner_set(self) -> CornerSet:
        return CornerSet(self.corners.copy(), self.depths.copy(), DEPTH_METRIC)


@dataclass
class SceneAnnotation:
    """One annotated image: size, optional intrinsics, and its instances."""

    image_id: str
    width: int
    height: int
    intrinsics: Intrinsics | None = None
    instances: list = field(default_factory=list)
    dataset: str = "default"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"scene {self.image_id!r}: image size must be positive")


@dataclass
class PredictionRecord:
    """A predicted corner set for one instance, optionally with a cuboid."""

    instance_id: str
    corner_set: CornerSet
    cuboid: Cuboid | None = None


def _scene_to_dict(scene: SceneAnnotation) -> dict:
    return {
        "image_id": scene.image_id,
        "dataset": scene.dataset,
        "width": scene.width,
        "height": scene.height,
        "K": None if scene.intrinsics is None else scene.intrinsics.matrix.ravel().tolist(),
        "instances": [
            {
                "instance_id": inst.instance_id,
                "box": None if inst.box is None else inst.box.tolist(),
                "corners": inst.corners.ravel().tolist(),
                "depths": inst.depths.tolist(),
                "category": inst.category,
                "quality": inst.quality,
            }
            for inst in scene.instances
        ],
    }


def _scene_from_dict(obj: dict, line: int) -> SceneAnnotation:
    def need(key, types):
        if key not in obj:
            raise SchemaError(f"scene record missing {key!r}", line=line)
        val = obj[key]
        if not isinstance(val, types):
            raise SchemaError(f"scene field {key!r} has wrong type", line=line)
        return val

    image_id = need("image_id", str)
    width = need("width", (int, float))
    height = need("height", (int, float))
    k_raw = obj.get("K")
    try:
        intr = None if k_raw is None else Intrinsics.from_matrix(np.reshape(k_raw, (3, 3)))
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"scene {image_id!r}: bad intrinsics ({exc})", line=line) from exc
    instances = []
    for entry in need("instances", list):
        if not isinstance(entry, dict):
            raise SchemaError(f"scene {image_id!r}: instance entry is not an object", line=line)
        try:
            instances.append(
                InstanceRecord(
                    instance_id=str(entry["instance_id"]),
                    corners=np.reshape(entry["corners"], (8, 2)),
                    depths=entry["depths"],
                    box=entry.get("box"),
                    category=entry.get("category"),
                    quality=entry.get("quality", QUALITY_GOOD),
                )
            )
        except KeyError as exc:
            raise SchemaError(
                f"scene {image_id!r}: instance missing field {exc.args[0]!r}", line=line
            ) from exc
        except ValueError as exc:
            raise SchemaError(str(exc), line=line) from exc
    try:
        return SceneAnnotation(
            image_id=image_id,
            dataset=str(obj.get("dataset", "default")),
            width=int(width),
            height=int(height),
            intrinsics=intr,
            instances=instances,
        )
    except ValueError as exc:
        raise SchemaError(str(exc), line=line) from exc


def write_annotations(scenes, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": ANNOTATION_FORMAT, "version": ANNOTATION_VERSION}) + "\n")
        for scene in scenes:
            fh.write(json.dumps(_scene_to_dict(scene)) + "\n")


def _read_lines(source):
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return fh.read().splitlines()
    return [str(line).rstrip("\n") for line in source]


def parse_annotations(source, skip_invalid: bool = False):
    """Parse an annotation file (path or iterable of lines).

    Strict mode raises :class:`SchemaError` carrying the offending line
    number; with ``skip_invalid`` the return value is ``(scenes, errors)``
    and malformed scene records are skipped instead.
    """
    lines = _read_lines(source)
    if not lines:
        raise SchemaError("empty annotation input: missing format header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"bad format header: {exc}", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != ANNOTATION_FORMAT:
        raise SchemaError(f"unsupported annotation format header {lines[0]!r}", line=1)
    if header.get("version") != ANNOTATION_VERSION:
        raise SchemaError(f"unsupported annotation version {header.get('version')!r}", line=1)

    scenes, errors = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            if not isinstance(obj, dict):
                raise SchemaError("scene record is not a JSON object", line=lineno)
            scenes.append(_scene_from_dict(obj, lineno))
        except SchemaError as exc:
            if not skip_invalid:
                raise
            errors.append(exc)
        except json.JSONDecodeError as exc:
            err = SchemaError(f"invalid JSON: {exc}", line=lineno)
            if not skip_invalid:
                raise err from exc
            errors.append(err)
    if skip_invalid:
        return scenes, errors
    return scenes


def rough_box_from_corners(corners, image_w: float, image_h: float) -> np.ndarray:
    """Fallback tight box: corner min/max coordinates clamped to the image."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(corners)):
        raise ValueError("corners must be finite")
    x1 = min(max(float(corners[:, 0].min()), 0.0), image_w)
    x2 = min(max(float(corners[:, 0].max()), 0.0), image_w)
    y1 = min(max(float(corners[:, 1].min()), 0.0), image_h)
    y2 = min(max(float(corners[:, 1].max()), 0.0), image_h)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateBox("projected corners clamp to a zero-area box")
    return np.array([x1, y1, x2, y2])


def _ensure_box(inst: InstanceRecord, width: float, height: float) -> InstanceRecord:
    if inst.box is not None:
        return inst
    box = rough_box_from_corners(inst.corners, width, height)
    return dataclasses.replace(inst, box=box)


def filter_instances(scene: SceneAnnotation, target: int = 512):
    """Split instances into (kept, rejected-with-reason) per the dataset policy.

    Kept instances have all corners strictly inside the half-open image
    extent [0, W) x [0, H) and a tight-box area of at least 1024 px^2 after
    scaling the longest image side to ``target``. Instances flagged truncated
    are rejected outright; a missing box is completed from the corner min/max
    before the area test. Each rejection carries one reason code; the two
    output lists partition the input in order.
    """
    scale = target / max(scene.width, scene.height)
    kept, rejected = [], []
    for inst in scene.instances:
        if inst.quality == QUALITY_TRUNCATED:
            rejected.append((inst, REASON_FLAGGED_TRUNCATED))
            continue
        u, v = inst.corners[:, 0], inst.corners[:, 1]
        inside = np.all((u >= 0) & (u < scene.width) & (v >= 0) & (v < scene.height))
        if not inside:
            rejected.append((inst, REASON_CORNERS_OUTSIDE))
            continue
        try:
            inst_b = _ensure_box(inst, scene.width, scene.height)
        except DegenerateBox:
            rejected.append((inst, REASON_BOX_DEGENERATE))
            continue
        x1, y1, x2, y2 = inst_b.box
        if (x2 - x1) * (y2 - y1) * scale * scale < MIN_SCALED_AREA:
            rejected.append((inst, REASON_AREA))
            continue
        kept.append(inst_b)
    return kept, rejected


@dataclass
class PreparedInstance:
    """A model-ready instance: canonical, letterboxed, normalized, virtual depth.

    Keeps the letterbox transform, the canonical permutation and the focal
    length used for the depth conversion so the pipeline inverts exactly.
    """

    instance_id: str
    corners: np.ndarray  # (8, 2) in [0, 1], canonical order
    depths: np.ndarray  # (8,) virtual units, canonical order
    box: np.ndarray  # (4,) in [0, 1]
    permutation: np.ndarray  # original index of each canonical slot
    transform: LetterboxTransform
    image_w: int
    image_h: int
    focal: float | None  # None means the canonical focal was assumed
    fv: float
    hv: float


def preprocess(
    scene: SceneAnnotation,
    target: int = 512,
    fv: float = 512.0,
    hv: float = 512.0,
) -> list[PreparedInstance]:
    """Turn (already filtered) scene instances into model-ready records.

    Corners and box are letterboxed to the square target and normalized to
    [0, 1]; corner order is canonicalized with the same permutation applied
    to the depths; depths are converted to virtual space using the scene
    focal length (fy) or the canonical focal when intrinsics are absent.
    """
    transform = LetterboxTransform.fit(scene.width, scene.height, target)
    focal = None if scene.intrinsics is None else scene.intrinsics.fy
    f_used = fv if focal is None else focal
    out = []
    for inst in scene.instances:
        inst = _ensure_box(inst, scene.width, scene.height)
        perm = canonical_permutation(inst.corners)
        corners = transform.forward(inst.corners[perm]) / target
        depths = virtual_depth_convert(
            inst.depths[perm], f_used, scene.height, "to_virtual", fv=fv, hv=hv
        )
        box_pts = transform.forward(inst.box.reshape(2, 2)) / target
        out.append(
            PreparedInstance(
                instance_id=inst.instance_id,
                corners=corners,
                depths=depths,
                box=box_pts.ravel(),
                permutation=perm,
                transform=transform,
                image_w=scene.width,
                image_h=scene.height,
                focal=focal,
                fv=fv,
                hv=hv,
            )
        )
    return out


def invert_prepared(prep: PreparedInstance) -> tuple[np.ndarray, np.ndarray]:
    """Recover original-order pixel corners and metric depths from a prepared record."""
    corners_px = prep.transform.inverse(prep.corners * prep.transform.dst)
    f_used = prep.fv if prep.focal is None else prep.focal
    depths_m = virtual_depth_convert(
        prep.depths, f_used, prep.image_h, "to_metric", fv=prep.fv, hv=prep.hv
    )
    inverse = np.empty(8, dtype=np.int64)
    inverse[prep.permutation] = np.arange(8)
    return corners_px[inverse], depths_m[inverse]


def prepared_to_dict(prep: PreparedInstance) -> dict:
    return {
        "instance_id": prep.instance_id,
        "corners": prep.corners.ravel().tolist(),
        "depths": prep.depths.tolist(),
        "box": prep.box.tolist(),
        "permutation": prep.permutation.tolist(),
        "letterbox": {
            "scale": prep.transform.scale,
            "pad_x": prep.transform.pad_x,
            "pad_y": prep.transform.pad_y,
            "src_w": prep.transform.src_w,
            "src_h": prep.transform.src_h,
            "dst": prep.transform.dst,
        },
        "image_w": prep.image_w,
        "image_h": prep.image_h,
        "focal": prep.focal,
        "fv": prep.fv,
        "hv": prep.hv,
    }


def write_predictions(records, path) -> None:
    """Write prediction records, one line each, with lossless float text."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(PREDICTION_HEADER + "\n")
        for rec in records:
            if any(ch.isspace() for ch in rec.instance_id):
                raise ValueError(f"instance id {rec.instance_id!r} must not contain whitespace")
            cs = rec.corner_set
            fields = [rec.instance_id]
            fields += [repr(float(v)) for v in cs.uv.ravel()]
            fields += [repr(float(v)) for v in cs.depths]
            fields.append(cs.depth_space)
            fh.write(" ".join(fields) + "\n")


def read_predictions(source) -> list[PredictionRecord]:
    """Parse a prediction file; raises :class:`SchemaError` with line numbers."""
    lines = _read_lines(source)
    if not lines or lines[0].strip() != PREDICTION_HEADER:
        raise SchemaError(f"missing prediction header {PREDICTION_HEADER!r}", line=1)
    records = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split()
        if len(parts) != 1 + 16 + 8 + 1:
            raise SchemaError(
                f"expected 26 fields (id, 16 corners, 8 depths, space), got {len(parts)}",
                line=lineno,
            )
        instance_id = parts[0]
        try:
            values = [float(p) for p in parts[1:25]]
        except ValueError as exc:
            raise SchemaError(f"non-numeric field: {exc}", line=lineno) from exc
        if not all(math.isfinite(v) for v in values):
            raise SchemaError("non-finite corner or depth value", line=lineno)
        space = parts[25]
        if space not in (DEPTH_METRIC, DEPTH_VIRTUAL):
            raise SchemaError(f"unknown depth space {space!r}", line=lineno)
        depths = np.array(values[16:24])
        if np.any(depths <= 0):
            raise SchemaError("depths must be positive", line=lineno)
        corner_set = CornerSet(np.array(values[:16]).reshape(8, 2), depths, space)
        records.append(PredictionRecord(instance_id=instance_id, corner_set=corner_set))
    return records
