"""
Stereo Core

Rasters, continuous-coordinate sampling and resampling shared by the
blackbox matchers, the refinement network, training and evaluation.

Coordinate convention: pixel centers sit at integer coordinates and
resizing aligns the corner pixel centers of source and destination.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import DomainError

INVALID_DISPARITY = -1.0

# Slack for coordinates computed by floating point mappings onto the border
_BOUNDS_EPS = 1e-9


@dataclass(frozen=True)
class PixelGrid:
    """W x H x C raster of float64 values, stored row-major as (H, W, C)"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise DomainError(f"PixelGrid needs a non-empty (H, W, C) array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("PixelGrid values must be finite")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        """(height, width)"""
        return self.data.shape[0], self.data.shape[1]

    def plane(self, channel: int = 0) -> np.ndarray:
        return self.data[:, :, channel]


@dataclass(frozen=True)
class DisparityMap:
    """Single channel disparity raster; invalid pixels hold INVALID_DISPARITY"""

    grid: PixelGrid

    def __post_init__(self):
        if self.grid.channels != 1:
            raise DomainError(f"DisparityMap needs 1 channel, got {self.grid.channels}")
        values = self.grid.plane()
        bad = (values < 0) & (values != INVALID_DISPARITY)
        if np.any(bad):
            raise DomainError("negative disparities must be the invalid sentinel")

    @classmethod
    def from_array(cls, values: np.ndarray, valid: Optional[np.ndarray] = None) -> "DisparityMap":
        values = np.array(values, dtype=np.float64)
        if valid is not None:
            values = np.where(valid, values, INVALID_DISPARITY)
        return cls(PixelGrid(values))

    @property
    def values(self) -> np.ndarray:
        return self.grid.plane()

    @property
    def valid(self) -> np.ndarray:
        return self.values != INVALID_DISPARITY

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    def validate(self, d_max: float) -> None:
        """Check every valid value lies in [0, d_max]"""
        values = self.values[self.valid]
        if values.size and values.max() > d_max:
            raise DomainError(f"disparity {values.max():.3f} exceeds d_max={d_max}")


@dataclass(frozen=True)
class ContinuousCoord:
    x: float
    y: float


@dataclass(frozen=True)
class StereoPair:
    """Rectified pair; kappa = w_l / w_r >= 1 for unbalanced setups"""

    left: PixelGrid
    right: PixelGrid

    def __post_init__(self):
        aspect_l = self.left.width / self.left.height
        aspect_r = self.right.width / self.right.height
        if abs(aspect_l - aspect_r) > 1e-6 * aspect_l:
            raise DomainError(
                f"left {self.left.width}x{self.left.height} and right "
                f"{self.right.width}x{self.right.height} differ in aspect ratio"
            )
        if self.kappa < 1.0:
            raise DomainError(f"right image larger than left (kappa={self.kappa:.3f})")

    @property
    def kappa(self) -> float:
        return self.left.width / self.right.width

    @property
    def balanced(self) -> bool:
        return self.left.width == self.right.width


def _check_bounds(width: int, height: int, xs: np.ndarray, ys: np.ndarray) -> None:
    if (
        np.any(xs < -_BOUNDS_EPS)
        or np.any(ys < -_BOUNDS_EPS)
        or np.any(xs > width - 1 + _BOUNDS_EPS)
        or np.any(ys > height - 1 + _BOUNDS_EPS)
        or not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)))
    ):
        raise DomainError(f"coordinate outside the {width}x{height} grid")


def bilinear_sample_many(grid: PixelGrid, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample `grid` at N continuous coordinates, returning an (N, C) array"""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    _check_bounds(grid.width, grid.height, xs, ys)
    xs = np.clip(xs, 0.0, grid.width - 1)
    ys = np.clip(ys, 0.0, grid.height - 1)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, grid.width - 1)
    y1 = np.minimum(y0 + 1, grid.height - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]

    data = grid.data
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def bilinear_sample(grid: PixelGrid, coord: ContinuousCoord) -> np.ndarray:
    """Bilinear blend of the four pixel centers around `coord`, one value per channel"""
    return bilinear_sample_many(grid, np.array([coord.x]), np.array([coord.y]))[0]


def source_positions(src_size: int, out_size: int) -> np.ndarray:
    """Corner-aligned source positions for each of `out_size` output pixels"""
    if out_size < 1:
        raise DomainError(f"output size must be >= 1, got {out_size}")
    if out_size == 1:
        return np.array([(src_size - 1) / 2.0])
    return np.arange(out_size, dtype=np.float64) * (src_size - 1) / (out_size - 1)


def resize_bilinear(grid: PixelGrid, out_w: int, out_h: int) -> PixelGrid:
    if out_w < 1 or out_h < 1:
        raise DomainError(f"invalid output size {out_w}x{out_h}")
    if (out_w, out_h) == (grid.width, grid.height):
        return PixelGrid(grid.data.copy())
    xs = source_positions(grid.width, out_w)
    ys = source_positions(grid.height, out_h)
    gx, gy = np.meshgrid(xs, ys)
    samples = bilinear_sample_many(grid, gx, gy)
    return PixelGrid(samples.reshape(out_h, out_w, grid.channels))


def _nearest_index(positions: np.ndarray) -> np.ndarray:
    # x.5 rounds toward the lower index
    return np.ceil(positions - 0.5).astype(np.int64)


def resize_nearest(grid: PixelGrid, out_w: int, out_h: int) -> PixelGrid:
    if out_w < 1 or out_h < 1:
        raise DomainError(f"invalid output size {out_w}x{out_h}")
    ix = np.clip(_nearest_index(source_positions(grid.width, out_w)), 0, grid.width - 1)
    iy = np.clip(_nearest_index(source_positions(grid.height, out_h)), 0, grid.height - 1)
    return PixelGrid(grid.data[iy[:, None], ix[None, :]])


def resize_disparity_nearest(d: DisparityMap, out_w: int, out_h: int) -> DisparityMap:
    """Nearest-neighbor resize; the invalid sentinel is copied verbatim"""
    return DisparityMap(resize_nearest(d.grid, out_w, out_h))


def scale_disparity_values(d: DisparityMap, s: float) -> DisparityMap:
    if not s > 0 or not math.isfinite(s):
        raise DomainError(f"disparity scale must be positive, got {s}")
    values = d.values
    return DisparityMap.from_array(np.where(d.valid, values * s, INVALID_DISPARITY))
