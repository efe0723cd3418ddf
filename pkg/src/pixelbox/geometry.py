"""Camera-frame cuboid geometry and image-space coordinate plumbing.

Conventions used throughout the package:

* camera frame: +x right, +y down, +z forward (into the scene), meters;
* image frame: (u, v) in pixels, origin at the top-left corner, v grows
  downward, coordinates measured at pixel centers;
* oriented boxes: center (3,), per-axis edge lengths size (3,), proper
  rotation matrix R with R @ R.T = I and det(R) = +1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    NonPositiveDepth,
    NonPositiveInput,
    VirtualDepthNotConverted,
)

DEPTH_METRIC = "metric"
DEPTH_VIRTUAL = "virtual"

#: Defaults of the camera-normalized depth space (virtual focal length and
#: virtual image height, pixels).
VIRTUAL_FOCAL = 512.0
VIRTUAL_HEIGHT = 512.0

#: Vertex template of the unit cuboid, binary sign-bit order: bit 0 flips x,
#: bit 1 flips y, bit 2 flips z, so index 0 is (-,-,-) and index 7 is (+,+,+).
CUBE_TEMPLATE = 0.5 * np.array(
    [
        [-1.0, -1.0, -1.0],
        [+1.0, -1.0, -1.0],
        [-1.0, +1.0, -1.0],
        [+1.0, +1.0, -1.0],
        [-1.0, -1.0, +1.0],
        [+1.0, -1.0, +1.0],
        [-1.0, +1.0, +1.0],
        [+1.0, +1.0, +1.0],
    ]
)
CUBE_TEMPLATE.setflags(write=False)


def _as_float_array(value, shape, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera matrix: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_matrix(cls, k) -> "Intrinsics":
        k = _as_float_array(k, (3, 3), "K")
        return cls(fx=float(k[0, 0]), fy=float(k[1, 1]), cx=float(k[0, 2]), cy=float(k[1, 2]))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass
class CornerSet:
    """Eight image-plane corner points with per-corner depths.

    ``depth_space`` tags whether ``depths`` are metric meters or virtual
    (camera-normalized) units.
    """

    uv: np.ndarray
    depths: np.ndarray
    depth_space: str = DEPTH_METRIC

    def __post_init__(self):
        self.uv = _as_float_array(self.uv, (8, 2), "uv")
        self.depths = _as_float_array(self.depths, (8,), "depths")
        if not np.all(np.isfinite(self.uv)):
            raise ValueError("corner uv coordinates must be finite")
        if not np.all(np.isfinite(self.depths)) or np.any(self.depths <= 0):
            raise NonPositiveDepth("corner depths must be finite and positive")
        if self.depth_space not in (DEPTH_METRIC, DEPTH_VIRTUAL):
            raise ValueError(f"unknown depth space {self.depth_space!r}")

    def copy(self) -> "CornerSet":
        return CornerSet(self.uv.copy(), self.depths.copy(), self.depth_space)


@dataclass
class Corner3DSet:
    """Eight 3D points in the camera frame, meters."""

    xyz: np.ndarray

    def __post_init__(self):
        self.xyz = _as_float_array(self.xyz, (8, 3), "xyz")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("3D corners must be finite")


@dataclass
class Cuboid:
    """Oriented 3D box: center, per-axis edge lengths, proper rotation."""

    center: np.ndarray
    size: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.center = _as_float_array(self.center, (3,), "center")
        self.size = _as_float_array(self.size, (3,), "size")
        self.rotation = _as_float_array(self.rotation, (3, 3), "rotation")
        if not np.all(np.isfinite(self.center)) or not np.all(np.isfinite(self.rotation)):
            raise ValueError("cuboid parameters must be finite")
        if np.any(self.size <= 0) or not np.all(np.isfinite(self.size)):
            raise ValueError("cuboid size components must be positive")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be proper (det = +1 within 1e-9)")

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))


def cuboid_to_corners(cuboid: Cuboid) -> Corner3DSet:
    """Expand a cuboid into its 8 vertices in the fixed template order.

    Vertex i is ``center + R @ (size * CUBE_TEMPLATE[i])``.
    """
    local = CUBE_TEMPLATE * cuboid.size
    return Corner3DSet(cuboid.center + local @ cuboid.rotation.T)


def project_corners(c3d: Corner3DSet, k: Intrinsics) -> CornerSet:
    """Pinhole-project 8 camera-frame points to image pixels with metric depths."""
    xyz = c3d.xyz
    z = xyz[:, 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("all corners must lie strictly in front of the camera")
    u = k.fx * xyz[:, 0] / z + k.cx
    v = k.fy * xyz[:, 1] / z + k.cy
    return CornerSet(np.stack([u, v], axis=1), z.copy(), DEPTH_METRIC)


def unproject_corners(cs: CornerSet, k: Intrinsics) -> Corner3DSet:
    """Lift image corners with metric depths back to camera-frame 3D points."""
    if cs.depth_space != DEPTH_METRIC:
        raise VirtualDepthNotConverted(
            "corner set is in virtual depth space; convert to metric before unprojecting"
        )
    d = cs.depths
    x = (cs.uv[:, 0] - k.cx) * d / k.fx
    y = (cs.uv[:, 1] - k.cy) * d / k.fy
    return Corner3DSet(np.stack([x, y, d], axis=1))


def canonical_permutation(uv: np.ndarray) -> np.ndarray:
    """Index permutation putting 8 corners into canonical image order.

    The four corners with the largest v form the "lower" group (v grows
    downward); each group is sorted left to right by u. Ties break on v
    (descending) by original index for the group split, and on u by original
    index inside a group, so the permutation is deterministic.
    """
    uv = _as_float_array(uv, (8, 2), "uv")
    idx = np.arange(8)
    by_v = np.lexsort((idx, -uv[:, 1]))  # v descending, stable on original index
    lower, upper = by_v[:4], by_v[4:]
    lower = lower[np.lexsort((lower, uv[lower, 0]))]
    upper = upper[np.lexsort((upper, uv[upper, 0]))]
    return np.concatenate([lower, upper])


def canonicalize_image_order(cs: CornerSet) -> CornerSet:
    """Reorder corners (and their depths identically) into canonical image order."""
    perm = canonical_permutation(cs.uv)
    return CornerSet(cs.uv[perm], cs.depths[perm], cs.depth_space)


@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-ratio preserving resize of a src_w x src_h image into a dst square.

    Padding is centered; on fractional remainders the leading pad is the floor
    of half the total so any extra goes to the trailing side.
    """

    scale: float
    pad_x: float
    pad_y: float
    src_w: int
    src_h: int
    dst: int

    @classmethod
    def fit(cls, src_w: int, src_h: int, dst: int = 512) -> "LetterboxTransform":
        if src_w <= 0 or src_h <= 0 or dst <= 0:
            raise NonPositiveInput("image dimensions must be positive")
        scale = dst / max(src_w, src_h)
        pad_x = math.floor((dst - scale * src_w) / 2.0)
        pad_y = math.floor((dst - scale * src_h) / 2.0)
        return cls(scale=scale, pad_x=float(pad_x), pad_y=float(pad_y),
                   src_w=int(src_w), src_h=int(src_h), dst=int(dst))

    def forward(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts * self.scale + np.array([self.pad_x, self.pad_y])

    def inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.array([self.pad_x, self.pad_y])) / self.scale


def letterbox_points(points: np.ndarray, t: LetterboxTransform, direction: str = "forward") -> np.ndarray:
    """Apply (or invert) a letterbox transform to an (n, 2) array of points."""
    if direction == "forward":
        return t.forward(points)
    if direction == "inverse":
        return t.inverse(points)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def virtual_depth_convert(
    d,
    f: float,
    image_h: float,
    direction: str = "to_virtual",
    fv: float = VIRTUAL_FOCAL,
    hv: float = VIRTUAL_HEIGHT,
):
    """Convert depth between metric and camera-normalized (virtual) space.

    to_virtual: d_v = d * (fv / f) * (H / Hv); to_metric applies the inverse.
    Accepts scalars or arrays; all of d, f, H must be positive.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0) or f <= 0 or image_h <= 0 or fv <= 0 or hv <= 0:
        raise NonPositiveInput("depths, focal lengths and image heights must be positive")
    factor = (fv / f) * (image_h / hv)
    if direction == "to_virtual":
        out = d * factor
    elif direction == "to_metric":
        out = d / factor
    else:
        raise ValueError(f"direction must be 'to_virtual' or 'to_metric', got {direction!r}")
    return float(out) if out.ndim == 0 else out


def convert_corner_depths(
    cs: CornerSet,
    direction: str,
    image_h: float,
    focal: float | None = None,
    fv: float = VIRTUAL_FOCAL,
    hv: float = VIRTUAL_HEIGHT,
) -> CornerSet:
    """Return a CornerSet with depths converted to the requested space.

    ``focal`` is the camera focal length; when None the canonical assumption
    f = fv is used (the conversion then only rescales by image height).
    A no-op when the set is already in the requested space.
    """
    if direction == "to_virtual":
        target = DEPTH_VIRTUAL
    elif direction == "to_metric":
        target = DEPTH_METRIC
    else:
        raise ValueError(f"direction must be 'to_virtual' or 'to_metric', got {direction!r}")
    if cs.depth_space == target:
        return cs.copy()
    f = fv if focal is None else focal
    depths = virtual_depth_convert(cs.depths, f, image_h, direction, fv=fv, hv=hv)
    return CornerSet(cs.uv.copy(), depths, target)


def cube_prior(c3d: Corner3DSet) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic cube prior from 8 points: center and edge lengths.

    Returns the corner mean and s0 = (2 / sqrt(3)) * r * (1, 1, 1) where r is
    the mean center-to-corner radius, so the exact corners of a cube of edge s
    give back s0 = (s, s, s).
    """
    xyz = c3d.xyz
    center = xyz.mean(axis=0)
    r = float(np.linalg.norm(xyz - center, axis=1).mean())
    s0 = (2.0 / math.sqrt(3.0)) * r * np.ones(3)
    return center, s0
