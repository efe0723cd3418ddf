"""Dense prediction-grid math: box priors, target heatmaps, soft-argmax.

Grid cells are indexed (x, y) = (column, row) and all soft-argmax output is
in grid-index coordinates; rescaling to image pixels happens only in
:func:`extract_corners` through the grid's pixel-center mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox
from .geometry import DEPTH_VIRTUAL, CornerSet

DEFAULT_GRID = 128
DEFAULT_BETA = 100.0

#: Minimum value of 2*sigma^2 (grid pixels squared) so tiny objects never get
#: a zero-width target Gaussian.
SIGMA2_FLOOR = 1.0


@dataclass(frozen=True)
class Grid:
    """A prediction grid of width x height cells mapped onto an image.

    The mapping aligns pixel centers: grid cell x covers image column
    (x + 0.5) * image_w / width - 0.5, and inversely. With width == image_w
    and height == image_h the mapping is the identity.
    """

    width: int
    height: int
    image_w: float
    image_h: float

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("grid must have at least 2x2 cells")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def square(cls, cells: int = DEFAULT_GRID, image: float | None = None) -> "Grid":
        image = float(cells if image is None else image)
        return cls(cells, cells, image, image)

    def _factors(self):
        return (
            np.array([self.width / self.image_w, self.height / self.image_h]),
            np.array([self.image_w / self.width, self.image_h / self.height]),
        )

    def to_grid(self, points_image: np.ndarray) -> np.ndarray:
        fwd, _ = self._factors()
        return (np.asarray(points_image, dtype=np.float64) + 0.5) * fwd - 0.5

    def to_image(self, points_grid: np.ndarray) -> np.ndarray:
        _, inv = self._factors()
        return (np.asarray(points_grid, dtype=np.float64) + 0.5) * inv - 0.5


@dataclass
class HeatField:
    """Eight corner heatmaps H in [0, 1] and depth maps Z >= 0 on one grid."""

    H: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.H.ndim != 3 or self.H.shape[0] != 8:
            raise ValueError(f"H must have shape (8, h, w), got {self.H.shape}")
        if self.Z.shape != self.H.shape:
            raise ValueError("H and Z must share one shape")
        if np.any(self.H < 0) or np.any(self.H > 1) or not np.all(np.isfinite(self.H)):
            raise ValueError("heatmap values must lie in [0, 1]")
        if np.any(self.Z < 0) or not np.all(np.isfinite(self.Z)):
            raise ValueError("depth map values must be non-negative")


@dataclass
class TargetHeatmaps:
    """Target corner heatmaps W in (0, 1] plus the 2*sigma^2 used per corner."""

    W: np.ndarray
    sigmas2: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.sigmas2 = np.asarray(self.sigmas2, dtype=np.float64)
        if self.W.ndim != 3 or self.W.shape[0] != 8:
            raise ValueError(f"W must have shape (8, h, w), got {self.W.shape}")
        if self.sigmas2.shape != (8,) or np.any(self.sigmas2 <= 0):
            raise ValueError("sigmas2 must be 8 positive values")


def _check_box(box):
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise ValueError(f"box must be (x1, y1, x2, y2), got shape {box.shape}")
    x1, y1, x2, y2 = box
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise DegenerateBox(f"box {box.tolist()} has non-positive extent")
    return box


def box_prior_at(box, points) -> np.ndarray:
    """Evaluate the four box-relative channels at (n, 2) normalized points.

    Channels: center offsets d_x = (x - c_x) / w_b and d_y = (y - c_y) / h_b,
    and top-left-relative coordinates u = (x - x1) / w_b, v = (y - y1) / h_b.
    """
    x1, y1, x2, y2 = _check_box(box)
    wb, hb = x2 - x1, y2 - y1
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    return np.stack(
        [(x - cx) / wb, (y - cy) / hb, (x - x1) / wb, (y - y1) / hb], axis=-1
    )


def box_prior_map(box, grid: Grid) -> np.ndarray:
    """Dense (4, h, w) box prior evaluated at grid-cell centers.

    Cell centers live on the normalized image square: cell (i, j) sits at
    ((j + 0.5) / w, (i + 0.5) / h), matching a normalized box.
    """
    _check_box(box)
    xs = (np.arange(grid.width) + 0.5) / grid.width
    ys = (np.arange(grid.height) + 0.5) / grid.height
    gx, gy = np.meshgrid(xs, ys)
    channels = box_prior_at(box, np.stack([gx, gy], axis=-1))
    return np.moveaxis(channels, -1, 0)


def box_keypoints(box) -> np.ndarray:
    """Nine keypoints of a 2D box in fixed order.

    Corners TL, TR, BL, BR; edge midpoints top, bottom, left, right; center.
    """
    x1, y1, x2, y2 = _check_box(box)
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    return np.array(
        [
            [x1, y1], [x2, y1], [x1, y2], [x2, y2],
            [cx, y1], [cx, y2], [x1, cy], [x2, cy],
            [cx, cy],
        ]
    )


def adaptive_sigma2(corners_uv, center_2d=None, floor: float = SIGMA2_FLOOR) -> np.ndarray:
    """Per-corner 2*sigma^2 (grid pixels squared) from object extent.

    Each value is the squared one-fifth of the distance between the object's
    2D center and that corner, floored at ``floor``. The center defaults to
    the mean of the 8 corners.
    """
    corners = np.asarray(corners_uv, dtype=np.float64).reshape(8, 2)
    center = corners.mean(axis=0) if center_2d is None else np.asarray(center_2d, dtype=np.float64)
    dist = np.linalg.norm(corners - center, axis=1)
    return np.maximum((dist / 5.0) ** 2, floor)


def target_heatmaps(corners_uv, grid: Grid, sigmas2) -> TargetHeatmaps:
    """Dense exponential target peaks around each corner (no truncation).

    W_i(x, y) = exp(-||(x, y) - p_i||^2 / (2 sigma_i^2)) with ``sigmas2``
    holding the 2 sigma_i^2 values; corners are in grid pixel units.
    """
    corners = np.asarray(corners_uv, dtype=np.float64).reshape(8, 2)
    sigmas2 = np.asarray(sigmas2, dtype=np.float64).reshape(8)
    if np.any(sigmas2 <= 0):
        raise ValueError("sigmas2 must be positive")
    xs = np.arange(grid.width, dtype=np.float64)
    ys = np.arange(grid.height, dtype=np.float64)
    dx = xs[None, None, :] - corners[:, 0][:, None, None]
    dy = ys[None, :, None] - corners[:, 1][:, None, None]
    w = np.exp(-(dx * dx + dy * dy) / sigmas2[:, None, None])
    return TargetHeatmaps(w, sigmas2)


def softmax_field(channel: np.ndarray, beta: float) -> np.ndarray:
    """Temperature softmax over all cells of one (h, w) field, max-shifted."""
    z = beta * np.asarray(channel, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def soft_argmax(channel: np.ndarray, beta: float = DEFAULT_BETA) -> tuple[np.ndarray, np.ndarray]:
    """Expected (x, y) grid coordinate under softmax(beta * H).

    Returns the sub-cell coordinate and the full spatial distribution. The
    coordinate is a convex combination of cell indices, so it always lies in
    [0, w - 1] x [0, h - 1].
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    pi = softmax_field(channel, beta)
    h, w = pi.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    u = float((pi * xs[None, :]).sum())
    v = float((pi * ys[:, None]).sum())
    return np.array([u, v]), pi


def soft_argmax_channels(stack: np.ndarray, beta: float = DEFAULT_BETA) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized soft-argmax over a (c, h, w) stack; returns (c, 2) and (c, h, w)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * np.asarray(stack, dtype=np.float64)
    z = z - z.max(axis=(1, 2), keepdims=True)
    e = np.exp(z)
    pi = e / e.sum(axis=(1, 2), keepdims=True)
    c, h, w = pi.shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    u = (pi * xs[None, None, :]).sum(axis=(1, 2))
    v = (pi * ys[None, :, None]).sum(axis=(1, 2))
    return np.stack([u, v], axis=1), pi


def bilinear_sample(channel: np.ndarray, p) -> float:
    """Bilinear interpolation of an (h, w) field at point (x, y).

    Coordinates are clamped to the field extent first, so the function is
    total. Uses the difference form of the two lerps, which reproduces cell
    values at integer coordinates and constant fields exactly.
    """
    z = np.asarray(channel, dtype=np.float64)
    h, w = z.shape
    x = min(max(float(p[0]), 0.0), w - 1.0)
    y = min(max(float(p[1]), 0.0), h - 1.0)
    x0 = min(int(np.floor(x)), max(w - 2, 0))
    y0 = min(int(np.floor(y)), max(h - 2, 0))
    fx, fy = x - x0, y - y0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    top = z[y0, x0] + fx * (z[y0, x1] - z[y0, x0])
    bot = z[y1, x0] + fx * (z[y1, x1] - z[y1, x0])
    return float(top + fy * (bot - top))


def extract_corners(field: HeatField, grid: Grid, beta: float = DEFAULT_BETA) -> CornerSet:
    """Soft-argmax each heatmap, sample its depth map there, rescale to image.

    Depths come out tagged as virtual space, matching how the dense heads are
    supervised.
    """
    if field.H.shape[1:] != (grid.height, grid.width):
        raise ValueError("field shape does not match grid")
    pts_grid, _ = soft_argmax_channels(field.H, beta)
    depths = np.array([bilinear_sample(field.Z[i], pts_grid[i]) for i in range(8)])
    uv = grid.to_image(pts_grid)
    depths = np.maximum(depths, np.finfo(np.float64).tiny)
    return CornerSet(uv, depths, DEPTH_VIRTUAL)
