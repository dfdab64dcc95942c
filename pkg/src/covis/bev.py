"""Ego-centered occupancy grids and geometric fusion across robots.

Grid convention: square H x W cells of occupancy probability (1 = occupied,
0 = free, 0.5 = unknown). Axis 0 spans the ego x direction (forward), axis 1
the ego y direction (left); the ego sits at the grid center. Cell (i, j)
covers ego coordinates x in [i*res - extent/2, (i+1)*res - extent/2), same
for y. "Occupied" is the complement of navigable space.

The wire form is a 16-byte header (H, W as uint32, resolution as float32,
4 reserved bytes) followed by row-major little-endian float32 cells.
"""

from __future__ import annotations

import base64
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .estimator import PoseEstimate
from .geometry import Pose
from .metrics import mask_dice_iou

_HEADER = struct.Struct("<IIf4x")

DEFAULT_EXTENT = 6.0
DEFAULT_RESOLUTION = 6.0 / 64

UNKNOWN = 0.5
FUSE_CLAMP = 0.01  # fused probabilities live in [FUSE_CLAMP, 1 - FUSE_CLAMP]


@dataclass(frozen=True)
class BevGrid:
    """Occupancy-probability grid around an ego robot."""

    cells: np.ndarray
    extent: float = DEFAULT_EXTENT
    resolution: float = field(default=DEFAULT_RESOLUTION)

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"grid must be square, got shape {c.shape}")
        if not math.isclose(c.shape[0] * self.resolution, self.extent, rel_tol=1e-9):
            raise ValueError("grid shape * resolution must equal extent")
        if np.any(c < 0.0) or np.any(c > 1.0):
            raise ValueError("cells must lie in [0, 1]")
        object.__setattr__(self, "cells", c)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @staticmethod
    def unknown(extent: float = DEFAULT_EXTENT, resolution: float = DEFAULT_RESOLUTION) -> "BevGrid":
        n = int(round(extent / resolution))
        return BevGrid(np.full((n, n), UNKNOWN), extent, resolution)

    def axis_coords(self) -> np.ndarray:
        """Cell-center coordinates along either axis (ego meters)."""
        n = self.cells.shape[0]
        return (np.arange(n) + 0.5) * self.resolution - self.extent / 2.0

    def to_bytes(self) -> bytes:
        h, w = self.cells.shape
        return _HEADER.pack(h, w, self.resolution) + self.cells.astype("<f4").tobytes(order="C")

    @staticmethod
    def from_bytes(data: bytes) -> "BevGrid":
        if len(data) < _HEADER.size:
            raise ValueError("grid blob shorter than header")
        h, w, res = _HEADER.unpack_from(data)
        expected = _HEADER.size + 4 * h * w
        if len(data) != expected:
            raise ValueError(f"grid blob length {len(data)} != expected {expected}")
        cells = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)
        return BevGrid(cells.astype(float), extent=h * float(res), resolution=float(res))

    def to_base64(self) -> str:
        return base64.b64encode(self.to_bytes()).decode("ascii")

    @staticmethod
    def from_base64(text: str) -> "BevGrid":
        return BevGrid.from_bytes(base64.b64decode(text))


def transform_grid(src: BevGrid, rel: Pose) -> BevGrid:
    """Resample a neighbor grid into the destination ego frame.

    ``rel`` is the pose of the source ego in the destination ego frame; only
    its planar components (x, y, yaw) participate. Each destination cell takes
    the nearest source cell under the inverse transform; cells falling outside
    the source footprint become unknown (0.5).
    """
    n = src.cells.shape[0]
    coords = src.axis_coords()
    xs, ys = np.meshgrid(coords, coords, indexing="ij")
    tx, ty = rel.position.x, rel.position.y
    yaw = rel.rotation.yaw()
    c, s = math.cos(yaw), math.sin(yaw)
    # Inverse planar transform of destination cell centers into source coords.
    dx, dy = xs - tx, ys - ty
    px = c * dx + s * dy
    py = -s * dx + c * dy
    ix = np.floor((px + src.extent / 2.0) / src.resolution).astype(int)
    iy = np.floor((py + src.extent / 2.0) / src.resolution).astype(int)
    valid = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
    out = np.full_like(src.cells, UNKNOWN)
    out[valid] = src.cells[ix[valid], iy[valid]]
    return BevGrid(out, src.extent, src.resolution)


def _logit(p: np.ndarray) -> np.ndarray:
    q = np.clip(p, FUSE_CLAMP, 1.0 - FUSE_CLAMP)
    return np.log(q / (1.0 - q))


def fuse(
    ego: BevGrid,
    neighbors: list[tuple[BevGrid, PoseEstimate]],
    gate_sigma: float = 1.0,
) -> BevGrid:
    """Combine neighbor grids into the ego frame by log-odds addition.

    Neighbors whose position-uncertainty norm exceeds ``gate_sigma`` are
    skipped. With no surviving neighbor the ego grid is returned unchanged
    (the self-loop contract). Otherwise cells are combined in log-odds space
    (0.5 neutral) and clamped to [0.01, 0.99].
    """
    kept = [
        (grid, est) for grid, est in neighbors if est.sigma_p_norm() <= gate_sigma
    ]
    if not kept:
        return BevGrid(ego.cells.copy(), ego.extent, ego.resolution)
    log_odds = _logit(ego.cells)
    for grid, est in kept:
        moved = transform_grid(grid, Pose(est.p_hat, est.q_hat))
        log_odds = log_odds + _logit(moved.cells)
    fused = 1.0 / (1.0 + np.exp(-log_odds))
    return BevGrid(np.clip(fused, FUSE_CLAMP, 1.0 - FUSE_CLAMP), ego.extent, ego.resolution)


def coverage_gain(
    truth: BevGrid, ego_only: BevGrid, fused: BevGrid, bin_threshold: float = 0.5
) -> tuple[float, float]:
    """Dice of the ego-only and fused grids against truth.

    Scored on the navigable mask, matching how BEV agreement is reported for
    navigability grids. A cell counts as navigable only when its occupancy is
    strictly below the threshold, so unknown cells (0.5) are not credited as
    confirmed-free; the score rewards coverage revealed by neighbors.
    """
    if ego_only.cells.shape != truth.cells.shape or fused.cells.shape != truth.cells.shape:
        raise ValueError("grid shapes differ")
    t_free = truth.cells < bin_threshold
    dice_ego, _ = mask_dice_iou(t_free, ego_only.cells < bin_threshold)
    dice_fused, _ = mask_dice_iou(t_free, fused.cells < bin_threshold)
    return dice_ego, dice_fused
