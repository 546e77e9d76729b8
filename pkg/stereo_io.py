"""
Image and disparity file formats: PNG / PGM through OpenCV, PFM by hand.

Images are loaded as PixelGrids normalized to [0, 1]. PFM follows the
Middlebury convention: negative scale means little-endian, rows are stored
bottom-to-top and infinite values mark pixels without a disparity.
"""

import logging
import re
from pathlib import Path
from typing import Union

import cv2
import numpy as np

from errors import DomainError, InputError
from stereo_core import INVALID_DISPARITY, DisparityMap, PixelGrid

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def to_gray(grid: PixelGrid) -> PixelGrid:
    """Luma of an RGB grid; single channel grids pass through"""
    if grid.channels == 1:
        return grid
    if grid.channels != 3:
        raise DomainError(f"cannot convert {grid.channels} channels to grayscale")
    return PixelGrid(grid.data @ LUMA_WEIGHTS)


def read_image(path: PathLike) -> PixelGrid:
    """Read a PNG, PGM or PFM image into a [0, 1] PixelGrid (RGB or gray)"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"unreadable image: {path}")

    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise InputError(f"unsupported pixel type {raw.dtype} in {path}")

    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return PixelGrid(raw.astype(np.float64) / scale)


def _quantize(grid: PixelGrid, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.round(np.clip(grid.data, 0.0, 1.0) * top).astype(dtype)


def _imwrite(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), array):
        raise InputError(f"could not write {path}")


def write_png(grid: PixelGrid, path: PathLike) -> None:
    """Write an 8-bit grayscale or RGB PNG from a [0, 1] grid"""
    if grid.channels not in (1, 3):
        raise DomainError(f"PNG export supports 1 or 3 channels, got {grid.channels}")
    array = _quantize(grid, 8)
    if grid.channels == 3:
        array = cv2.cvtColor(array, cv2.COLOR_RGB2BGR)
    else:
        array = array[:, :, 0]
    _imwrite(Path(path), array)


def write_pgm(grid: PixelGrid, path: PathLike, bits: int = 8) -> None:
    """Write a binary (P5) 8 or 16-bit PGM from a [0, 1] grid"""
    if bits not in (8, 16):
        raise DomainError(f"PGM depth must be 8 or 16, got {bits}")
    _imwrite(Path(path), _quantize(to_gray(grid), bits)[:, :, 0])


def read_pfm(path: PathLike) -> PixelGrid:
    """Read a PFM file; non-finite values are kept out by mapping them to the sentinel"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"PFM not found: {path}")
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise InputError(f"not a PFM file: {path}")

        dims = _PFM_DIMS.match(f.readline())
        if not dims:
            raise InputError(f"malformed PFM header in {path}")
        width, height = int(dims.group(1)), int(dims.group(2))

        try:
            scale = float(f.readline().strip())
        except ValueError as e:
            raise InputError(f"malformed PFM scale in {path}") from e
        endian = "<" if scale < 0 else ">"

        data = np.fromfile(f, dtype=endian + "f4")

    expected = width * height * channels
    if data.size != expected:
        raise InputError(f"PFM {path} holds {data.size} values, expected {expected}")

    data = np.flipud(data.reshape(height, width, channels)).astype(np.float64)
    data[~np.isfinite(data)] = INVALID_DISPARITY
    return PixelGrid(data)


def read_disparity(path: PathLike) -> DisparityMap:
    grid = read_pfm(path)
    if grid.channels != 1:
        raise InputError(f"disparity PFM must have one channel: {path}")
    values = grid.plane()
    return DisparityMap.from_array(values, valid=values >= 0)


def write_pfm(d: Union[DisparityMap, PixelGrid], path: PathLike) -> None:
    """Write a little-endian PFM; invalid disparities are stored as +inf"""
    if isinstance(d, DisparityMap):
        data = np.where(d.valid, d.values, np.inf)[:, :, None]
    else:
        data = d.data
    height, width, channels = data.shape
    if channels not in (1, 3):
        raise DomainError(f"PFM supports 1 or 3 channels, got {channels}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{'PF' if channels == 3 else 'Pf'}\n{width} {height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.flipud(data).astype("<f4").tobytes())
    logger.debug("wrote %dx%d PFM to %s", width, height, path)
