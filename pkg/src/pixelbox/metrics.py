"""Evaluation protocol: image-plane corner/depth errors, 3D corner distance
with optimal matching, cuboid rectification, and oriented-box IoU.

Corner sets are compared index-wise after canonical image ordering for the
pixel metrics, matched optimally for the 3D corner metric, and rectified to
valid cuboids for the volumetric metric.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DegenerateCorners,
    DepthSpaceMismatch,
    NonFiniteCost,
    NonPositiveDiagonal,
    NonPositiveGtDepth,
    UnmatchedInstance,
)
from .geometry import (
    CUBE_TEMPLATE,
    DEPTH_METRIC,
    Corner3DSet,
    CornerSet,
    Cuboid,
    Intrinsics,
    LetterboxTransform,
    canonicalize_image_order,
    convert_corner_depths,
    cuboid_to_corners,
    unproject_corners,
)

#: Scale floor keeping rectified cuboids valid when a fit collapses an axis.
MIN_RECTIFIED_SCALE = 1e-6


def pag(pred: CornerSet, gt: CornerSet) -> tuple[float, float]:
    """Mean image-plane corner error (pixels) and relative depth error (%).

    Correspondence is index-wise: both sets must already be in the same pixel
    frame, the same depth space, and the same (canonical) order.
    """
    if pred.depth_space != gt.depth_space:
        raise DepthSpaceMismatch(
            f"prediction is {pred.depth_space}, ground truth is {gt.depth_space}"
        )
    if np.any(gt.depths <= 0):
        raise NonPositiveGtDepth("ground-truth depths must be positive")
    pag_uv = float(np.linalg.norm(pred.uv - gt.uv, axis=1).mean())
    pag_d = float(100.0 * (np.abs(pred.depths - gt.depths) / gt.depths).mean())
    return pag_uv, pag_d


@dataclass(frozen=True)
class AssignmentResult:
    permutation: np.ndarray
    cost: float


def hungarian_assign(cost) -> AssignmentResult:
    """Minimum-cost one-to-one assignment on a square cost matrix.

    O(n^3) shortest-augmenting-path solve; ties resolve deterministically
    (rows processed lowest index first).
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCost("cost matrix must be finite")
    perm = _kernels.assignment(cost)
    total = float(cost[np.arange(cost.shape[0]), perm].sum())
    return AssignmentResult(permutation=perm, cost=total)


def nhd(pred3d: Corner3DSet, gt3d: Corner3DSet, gt_diag: float) -> float:
    """Sum of optimally matched 3D corner distances over the ground-truth diagonal."""
    if gt_diag <= 0:
        raise NonPositiveDiagonal("ground-truth diagonal must be positive")
    diff = pred3d.xyz[:, None, :] - gt3d.xyz[None, :, :]
    cost = np.linalg.norm(diff, axis=2)
    return hungarian_assign(cost).cost / gt_diag


def gt_diagonal(c3d: Corner3DSet) -> float:
    """Box diagonal of a corner set: the maximum pairwise distance.

    Equals the space diagonal ||size||_2 for the exact corners of a cuboid.
    """
    diff = c3d.xyz[:, None, :] - c3d.xyz[None, :, :]
    return float(np.linalg.norm(diff, axis=2).max())


def _rotation_group_permutations() -> np.ndarray:
    """Vertex index permutations induced by the 24 proper cube rotations."""
    perms = []
    for axes in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(axes, signs)):
                m[row, col] = s
            if np.linalg.det(m) < 0:
                continue
            mapped = CUBE_TEMPLATE @ m.T
            perm = [int(np.argmin(np.abs(CUBE_TEMPLATE - p).sum(axis=1))) for p in mapped]
            perms.append(perm)
    out = np.array(sorted(perms), dtype=np.int64)
    assert out.shape == (24, 8)
    return out


_TEMPLATE_PERMS = _rotation_group_permutations()


def kabsch_rectify(c3d: Corner3DSet) -> Cuboid:
    """Closest valid cuboid to 8 points by rigid alignment with scale recovery.

    For each of the 24 proper-rotation correspondences between the points and
    the unit-cube template: rotation from the SVD of the cross-covariance
    (determinant-corrected so det(R) = +1), then per-axis least-squares scale.
    The candidate with the smallest residual wins; exact cuboid corners in
    template order (up to a cube rotation) are recovered exactly.
    """
    pts = c3d.xyz
    center = pts.mean(axis=0)
    q = pts - center
    svals = np.linalg.svd(q, compute_uv=False)
    if svals[1] <= 1e-9 * max(svals[0], 1e-12):
        raise DegenerateCorners("corner set has rank < 2; no stable rotation")

    tk2 = (CUBE_TEMPLATE**2).sum(axis=0)  # = 2 per axis
    best = None
    for perm in _TEMPLATE_PERMS:
        t = CUBE_TEMPLATE[perm]
        cov = t.T @ q
        u, _, vt = np.linalg.svd(cov)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        scale = np.maximum(((q @ rot) * t).sum(axis=0) / tk2, MIN_RECTIFIED_SCALE)
        resid = float(((q - (t * scale) @ rot.T) ** 2).sum())
        if best is None or resid < best[0]:
            best = (resid, rot, scale)
    _, rot, scale = best
    # Re-orthonormalize against accumulated round-off so Cuboid invariants hold.
    u, _, vt = np.linalg.svd(rot)
    rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
    return Cuboid(center=center, size=scale, rotation=rot)


def iou3d(a: Cuboid, b: Cuboid) -> float:
    """Exact intersection-over-union of two oriented boxes.

    The intersection polytope comes from clipping box a against the six
    half-spaces of box b; its volume from a tetrahedral fan decomposition.
    """
    verts_a = cuboid_to_corners(a).xyz
    local = (verts_a - b.center) @ b.rotation
    inter = _kernels.box_clip_volume(np.ascontiguousarray(local), b.size / 2.0)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _points_in_cuboid(points: np.ndarray, box: Cuboid) -> np.ndarray:
    local = (points - box.center) @ box.rotation
    return np.all(np.abs(local) <= box.size / 2.0, axis=1)


def iou3d_mc(a: Cuboid, b: Cuboid, samples: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo IoU oracle: rejection sampling in the joint bounding box."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    corners = np.vstack([cuboid_to_corners(a).xyz, cuboid_to_corners(b).xyz])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(samples, 3))
    in_a = _points_in_cuboid(pts, a)
    in_b = _points_in_cuboid(pts, b)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(in_a & in_b))
    return inter / union


SKIP_NO_INTRINSICS = "missing_intrinsics"
SKIP_RECTIFY_OFF = "rectification_disabled"
SKIP_DEGENERATE = "degenerate_corners"


@dataclass
class InstanceMetrics:
    """Per-instance evaluation record; 3D metrics are None when skipped."""

    instance_id: str
    dataset: str
    pag_uv: float
    pag_d: float
    depth_space: str
    nhd: float | None = None
    iou3d: float | None = None
    skipped: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "dataset": self.dataset,
            "pag_uv": self.pag_uv,
            "pag_d": self.pag_d,
            "depth_space": self.depth_space,
            "nhd": self.nhd,
            "iou3d": self.iou3d,
            "skipped": dict(self.skipped),
        }


def _aggregate(rows: list[InstanceMetrics]) -> dict:
    out = {"instances": len(rows)}
    for name in ("pag_uv", "pag_d", "nhd", "iou3d"):
        vals = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
        out[f"{name}_evaluated"] = len(vals)
    return out


@dataclass
class MetricsReport:
    """Per-instance rows plus per-dataset and overall aggregates."""

    rows: list[InstanceMetrics]
    options: dict = field(default_factory=dict)

    def group_keys(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.dataset not in seen:
                seen.append(r.dataset)
        return seen

    def group(self, key: str) -> dict:
        return _aggregate([r for r in self.rows if r.dataset == key])

    def overall(self) -> dict:
        """Instance-weighted mean plus the mean of per-dataset means."""
        agg = _aggregate(self.rows)
        for name in ("pag_uv", "pag_d", "nhd", "iou3d"):
            per_group = [self.group(k)[name] for k in self.group_keys()]
            per_group = [v for v in per_group if v is not None]
            agg[f"{name}_dataset_mean"] = float(np.mean(per_group)) if per_group else None
        return agg

    def to_dict(self, include_instances: bool = False) -> dict:
        out = {
            "format": "pixelbox/report",
            "version": 1,
            "options": dict(self.options),
            "groups": {k: self.group(k) for k in self.group_keys()},
            "overall": self.overall(),
        }
        if include_instances:
            out["instances"] = [r.to_dict() for r in self.rows]
        return out

    def render_text(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"

        lines = []
        header = f"{'dataset':<16}{'n':>6}{'pag_uv':>10}{'pag_d':>10}{'nhd':>10}{'iou3d':>10}"
        lines.append(header)
        lines.append("-" * len(header))
        for key in self.group_keys():
            g = self.group(key)
            lines.append(
                f"{key:<16}{g['instances']:>6}{fmt(g['pag_uv']):>10}"
                f"{fmt(g['pag_d']):>10}{fmt(g['nhd']):>10}{fmt(g['iou3d']):>10}"
            )
        o = self.overall()
        lines.append("-" * len(header))
        lines.append(
            f"{'overall':<16}{o['instances']:>6}{fmt(o['pag_uv']):>10}"
            f"{fmt(o['pag_d']):>10}{fmt(o['nhd']):>10}{fmt(o['iou3d']):>10}"
        )
        lines.append(
            f"{'dataset-mean':<16}{'':>6}{fmt(o['pag_uv_dataset_mean']):>10}"
            f"{fmt(o['pag_d_dataset_mean']):>10}{fmt(o['nhd_dataset_mean']):>10}"
            f"{fmt(o['iou3d_dataset_mean']):>10}"
        )
        return "\n".join(lines)


def _instance_3d(cs: CornerSet, k: Intrinsics, image_h: float, fv: float, hv: float) -> Corner3DSet:
    metric = convert_corner_depths(cs, "to_metric", image_h, focal=k.fy, fv=fv, hv=hv)
    return unproject_corners(metric, k)


def evaluate(
    predictions,
    scenes,
    target: int = 512,
    fv: float = 512.0,
    hv: float = 512.0,
    rectify: bool = True,
) -> MetricsReport:
    """Run the full metric protocol on prediction/ground-truth pairs.

    ``predictions`` maps instance ids to :class:`CornerSet` (a dict, or any
    iterable of objects with ``instance_id`` and ``corner_set``). ``scenes``
    are annotation records; every annotated instance must have exactly one
    prediction. Per instance: canonicalize both corner sets, letterbox to the
    square target for the pixel metrics, then (when intrinsics exist)
    unproject to 3D for the matched corner metric and rectify both sets to
    cuboids for the volumetric one.
    """
    if not isinstance(predictions, dict):
        predictions = {p.instance_id: p.corner_set for p in predictions}
    unused = set(predictions)
    rows = []
    for scene in scenes:
        transform = LetterboxTransform.fit(scene.width, scene.height, target)
        k = scene.intrinsics
        for inst in scene.instances:
            if inst.instance_id not in predictions:
                raise UnmatchedInstance(f"no prediction for instance {inst.instance_id!r}")
            unused.discard(inst.instance_id)
            pred = canonicalize_image_order(predictions[inst.instance_id])
            gt = canonicalize_image_order(
                CornerSet(inst.corners, inst.depths, DEPTH_METRIC)
            )
            skipped = {}

            # Pixel metrics in the letterboxed frame; depths compared metric
            # when intrinsics exist, in height-normalized space otherwise.
            if k is not None:
                pred_d = convert_corner_depths(pred, "to_metric", scene.height, focal=k.fy, fv=fv, hv=hv)
                gt_d = gt
                depth_space = DEPTH_METRIC
            else:
                pred_d = convert_corner_depths(pred, "to_virtual", scene.height, focal=None, fv=fv, hv=hv)
                gt_d = convert_corner_depths(gt, "to_virtual", scene.height, focal=None, fv=fv, hv=hv)
                depth_space = "virtual_canonical"
            pred_px = CornerSet(transform.forward(pred_d.uv), pred_d.depths, pred_d.depth_space)
            gt_px = CornerSet(transform.forward(gt_d.uv), gt_d.depths, gt_d.depth_space)
            uv_err, d_err = pag(pred_px, gt_px)

            row = InstanceMetrics(
                instance_id=inst.instance_id,
                dataset=scene.dataset,
                pag_uv=uv_err,
                pag_d=d_err,
                depth_space=depth_space,
                skipped=skipped,
            )
            if k is None:
                skipped["nhd"] = SKIP_NO_INTRINSICS
                skipped["iou3d"] = SKIP_NO_INTRINSICS
            else:
                pred3d = _instance_3d(pred, k, scene.height, fv, hv)
                gt3d = _instance_3d(gt, k, scene.height, fv, hv)
                row.nhd = nhd(pred3d, gt3d, gt_diagonal(gt3d))
                if not rectify:
                    skipped["iou3d"] = SKIP_RECTIFY_OFF
                else:
                    try:
                        row.iou3d = iou3d(kabsch_rectify(pred3d), kabsch_rectify(gt3d))
                    except DegenerateCorners:
                        skipped["iou3d"] = SKIP_DEGENERATE
            rows.append(row)
    if unused:
        raise UnmatchedInstance(
            f"{len(unused)} prediction(s) match no annotated instance, e.g. {sorted(unused)[0]!r}"
        )
    return MetricsReport(
        rows=rows,
        options={"target": target, "fv": fv, "hv": hv, "rectify": rectify},
    )
