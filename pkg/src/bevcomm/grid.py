"""Multi-channel bird's-eye-view feature grids, pyramids, and bilinear sampling.

Grids are stored row-major with channel-last ordering as 32-bit floats. The
``origin`` of a grid is the world (x, y) position of the center of cell
(row 0, col 0); x grows with columns and y with rows. Every operation in this
module treats coordinates outside the grid as empty space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class GridError(ValueError):
    """Raised for malformed grids or incompatible grid operations."""


def _validated_data(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if arr.ndim != 3:
        raise GridError(f"grid data must have shape (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c < 1:
        raise GridError(f"grid dimensions must be positive, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise GridError("grid data contains NaN or Inf")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BevGrid:
    """Immutable BEV raster of shape (height, width, channels).

    ``cell_size`` is the edge length of one cell in meters. The stored array
    is copied and locked at construction so grids can be shared freely.
    """

    data: np.ndarray
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _validated_data(self.data))
        if not np.isfinite(self.cell_size) or self.cell_size <= 0:
            raise GridError(f"cell_size must be positive, got {self.cell_size}")
        ox, oy = float(self.origin[0]), float(self.origin[1])
        if not (np.isfinite(ox) and np.isfinite(oy)):
            raise GridError("grid origin must be finite")
        object.__setattr__(self, "origin", (ox, oy))

    @classmethod
    def zeros(cls, height: int, width: int, channels: int, cell_size: float,
              origin: tuple[float, float] = (0.0, 0.0)) -> "BevGrid":
        return cls(np.zeros((height, width, channels), dtype=np.float32),
                   cell_size, origin)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def extent_m(self) -> tuple[float, float]:
        """World extent covered by the raster, (width_m, height_m)."""
        return self.width * self.cell_size, self.height * self.cell_size

    def with_data(self, data: np.ndarray) -> "BevGrid":
        """New grid with the same geometry but different cell contents."""
        return BevGrid(data, self.cell_size, self.origin)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        ox, oy = self.origin
        return ox + col * self.cell_size, oy + row * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of all cell centers as (X, Y) arrays of (H, W)."""
        ox, oy = self.origin
        xs = ox + np.arange(self.width, dtype=np.float64) * self.cell_size
        ys = oy + np.arange(self.height, dtype=np.float64) * self.cell_size
        return np.meshgrid(xs, ys)

    def world_to_cell(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (column, row) coordinates of world points."""
        ox, oy = self.origin
        return ((np.asarray(x, dtype=np.float64) - ox) / self.cell_size,
                (np.asarray(y, dtype=np.float64) - oy) / self.cell_size)


class GridSpec(NamedTuple):
    """Geometry of a raster without contents."""

    height: int
    width: int
    cell_size: float
    origin: tuple[float, float]

    @classmethod
    def centered(cls, height: int, width: int, cell_size: float) -> "GridSpec":
        """Spec for a grid whose world extent is centered on the frame origin."""
        return cls(height, width, cell_size,
                   (-(width - 1) / 2.0 * cell_size, -(height - 1) / 2.0 * cell_size))

    def zeros(self, channels: int) -> BevGrid:
        return BevGrid.zeros(self.height, self.width, channels,
                             self.cell_size, self.origin)


def bilinear_many(data: np.ndarray, xs, ys) -> np.ndarray:
    """Bilinear interpolation of a (H, W, C) array at fractional coordinates.

    ``xs`` indexes columns and ``ys`` rows. Query points outside the node
    lattice [0, W-1] x [0, H-1] return zero vectors. Output is float64 with
    shape ``xs.shape + (C,)``.
    """
    h, w = data.shape[0], data.shape[1]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    vals = ((1.0 - fx) * (1.0 - fy) * data[y0, x0]
            + fx * (1.0 - fy) * data[y0, x1]
            + (1.0 - fx) * fy * data[y1, x0]
            + fx * fy * data[y1, x1])
    vals = vals.astype(np.float64, copy=False)
    vals[~inside] = 0.0
    return vals


def bilinear_sample(grid: BevGrid, x: float, y: float) -> np.ndarray:
    """Channel vector at continuous cell coordinates (x=column, y=row).

    Integer coordinates return the stored cell value exactly; out-of-bounds
    coordinates return the zero vector.
    """
    return bilinear_many(grid.data, float(x), float(y))


def downsample(grid: BevGrid, factor: int) -> BevGrid:
    """Mean-pool a grid by an integer factor.

    The output covers the same world extent: cell_size scales by ``factor``
    and the origin moves to the center of the first pooled block.
    """
    if factor < 1 or int(factor) != factor:
        raise GridError(f"downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return grid
    h, w, c = grid.data.shape
    if h % factor or w % factor:
        raise GridError(
            f"grid dimensions {h}x{w} not divisible by downsample factor {factor}")
    pooled = grid.data.reshape(h // factor, factor, w // factor, factor, c)
    pooled = pooled.astype(np.float64).mean(axis=(1, 3)).astype(np.float32)
    shift = (factor - 1) / 2.0 * grid.cell_size
    ox, oy = grid.origin
    return BevGrid(pooled, grid.cell_size * factor, (ox + shift, oy + shift))


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Dyadic multi-scale stack of grids; level 0 is the finest."""

    levels: tuple[BevGrid, ...]

    def __post_init__(self):
        if not self.levels:
            raise GridError("pyramid needs at least one level")
        object.__setattr__(self, "levels", tuple(self.levels))
        base = self.levels[0]
        for lvl, g in enumerate(self.levels[1:], start=1):
            prev = self.levels[lvl - 1]
            if (g.height * 2, g.width * 2) != (prev.height, prev.width):
                raise GridError(f"level {lvl} dimensions {g.height}x{g.width} "
                                f"do not halve level {lvl - 1}")
            if not np.isclose(g.cell_size, prev.cell_size * 2.0):
                raise GridError(f"level {lvl} cell_size does not double")
            if g.channels != base.channels:
                raise GridError(f"level {lvl} channel count differs from level 0")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> BevGrid:
        return self.levels[level]


def build_pyramid(grid: BevGrid, levels: int) -> FeaturePyramid:
    """Build a pyramid by repeated 2x2 mean pooling; level 0 is the input.

    Level-0 dimensions must be divisible by 2**(levels-1).
    """
    if levels < 1:
        raise GridError(f"pyramid must have at least one level, got {levels}")
    out = [grid]
    for lvl in range(1, levels):
        prev = out[-1]
        if prev.height % 2 or prev.width % 2:
            raise GridError(
                f"cannot build level {lvl}: dimensions {prev.height}x{prev.width} "
                f"are not divisible by 2")
        out.append(downsample(prev, 2))
    return FeaturePyramid(tuple(out))
