"""
Stereo Blackbox

Traditional matchers producing the noisy disparity map fed to the refiner:
    - census transform and Hamming / AD-Census matching costs
    - semi-global aggregation along 4 or 8 straight-line paths
    - cross-based support aggregation (AD-Census)
    - winner-take-all, left-right consistency
    - the unbalanced-pair wrapper (downsample left, match, upsample result)

Cost volumes are (H, W, d_max + 1) float64 arrays; a correspondence that
leaves the right image (x - d < 0) costs OUT_OF_FRAME_COST.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DomainError
from stereo_core import (
    DisparityMap,
    PixelGrid,
    StereoPair,
    resize_bilinear,
    resize_disparity_nearest,
    scale_disparity_values,
)
from stereo_io import to_gray

logger = logging.getLogger(__name__)

OUT_OF_FRAME_COST = 1e4

# (dx, dy): the path reaches p from p - r
PATHS_4: Tuple[Tuple[int, int], ...] = ((1, 0), (-1, 0), (0, 1), (0, -1))
PATHS_8: Tuple[Tuple[int, int], ...] = PATHS_4 + ((1, 1), (-1, 1), (1, -1), (-1, -1))


class SgmParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p1: float = Field(10.0, ge=0, description="penalty for a one pixel disparity jump")
    p2: float = Field(120.0, ge=0, description="penalty for larger disparity jumps")
    num_paths: Literal[4, 8] = 8
    lr_check: bool = True
    lr_threshold: float = Field(1.0, ge=0, description="left-right tolerance in px")

    @model_validator(mode="after")
    def _penalties_ordered(self) -> "SgmParams":
        if self.p2 < self.p1:
            raise ValueError(f"p2 ({self.p2}) must be >= p1 ({self.p1})")
        return self


class CrossParams(BaseModel):
    """Support-region thresholds on [0, 255] intensities"""

    model_config = ConfigDict(extra="forbid")

    tau1: float = 20.0
    tau2: float = 6.0
    l1: int = Field(34, ge=1)
    l2: int = Field(17, ge=1)


class BlackboxConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["sgm", "ad_census"] = "sgm"
    d_max: int = Field(32, ge=1, description="search range in left-image pixels")
    census_window: int = Field(5, ge=3, le=7)
    lambda_ad: float = 1.0
    lambda_census: float = 1.0
    sigma_ad: float = Field(10.0, gt=0)
    sigma_census: float = Field(8.0, gt=0)
    sgm: SgmParams = Field(default_factory=SgmParams)
    cross: CrossParams = Field(default_factory=CrossParams)


@dataclass(frozen=True)
class CensusGrid:
    """Per-pixel census codes; the first neighbor in row-major order is the most significant bit"""

    codes: np.ndarray
    valid: np.ndarray
    bits: int

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    @property
    def height(self) -> int:
        return self.codes.shape[0]


@dataclass(frozen=True)
class CostVolume:
    costs: np.ndarray

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        if costs.ndim != 3 or costs.shape[2] < 2:
            raise DomainError(f"cost volume must be (H, W, D>=2), got {costs.shape}")
        if not np.all(np.isfinite(costs)) or np.any(costs < 0):
            raise DomainError("costs must be finite and non-negative")
        object.__setattr__(self, "costs", costs)

    @property
    def width(self) -> int:
        return self.costs.shape[1]

    @property
    def height(self) -> int:
        return self.costs.shape[0]

    @property
    def d_max(self) -> int:
        return self.costs.shape[2] - 1


def _gray_plane(image: PixelGrid) -> np.ndarray:
    return to_gray(image).plane()


def census_transform(image: PixelGrid, window: int = 5) -> CensusGrid:
    if image.channels != 1:
        raise DomainError("census transform expects a grayscale image")
    if window < 3 or window % 2 == 0:
        raise DomainError(f"census window must be odd and >= 3, got {window}")
    if window * window - 1 > 64:
        raise DomainError(f"census window {window} does not fit a 64-bit code")

    r = window // 2
    plane = image.plane()
    h, w = plane.shape
    padded = np.pad(plane, r, mode="edge")

    codes = np.zeros((h, w), dtype=np.uint64)
    one = np.uint64(1)
    for dy in range(window):
        for dx in range(window):
            if dy == r and dx == r:
                continue
            neighbor = padded[dy : dy + h, dx : dx + w]
            codes = (codes << one) | (neighbor < plane).astype(np.uint64)

    valid = np.zeros((h, w), dtype=bool)
    valid[r : h - r, r : w - r] = True
    return CensusGrid(codes=codes, valid=valid, bits=window * window - 1)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(a, b)).astype(np.float64)


def matching_cost(
    pair: StereoPair,
    d_max: int,
    mode: Literal["census", "ad_census"] = "census",
    config: Optional[BlackboxConfig] = None,
) -> CostVolume:
    config = config or BlackboxConfig()
    if pair.left.shape != pair.right.shape:
        raise DomainError(
            f"matching needs equal sizes, got {pair.left.shape} and {pair.right.shape}"
        )
    if d_max < 1:
        raise DomainError(f"d_max must be >= 1, got {d_max}")
    if mode not in ("census", "ad_census"):
        raise DomainError(f"unknown matching cost mode {mode!r}")

    left = to_gray(pair.left)
    right = to_gray(pair.right)
    census_l = census_transform(left, config.census_window)
    census_r = census_transform(right, config.census_window)
    left_255 = left.plane() * 255.0
    right_255 = right.plane() * 255.0

    h, w = left.shape
    costs = np.full((h, w, d_max + 1), OUT_OF_FRAME_COST)
    for d in range(min(d_max, w - 1) + 1):
        ham = hamming(census_l.codes[:, d:], census_r.codes[:, : w - d])
        if mode == "census":
            costs[:, d:, d] = ham
        else:
            ad = np.abs(left_255[:, d:] - right_255[:, : w - d])
            costs[:, d:, d] = config.lambda_ad * (
                1.0 - np.exp(-ad / config.sigma_ad)
            ) + config.lambda_census * (1.0 - np.exp(-ham / config.sigma_census))
    return CostVolume(costs)


def _path_step(cost: np.ndarray, prev: np.ndarray, p1: float, p2: float) -> np.ndarray:
    """One step of the SGM recurrence for a batch of pixels, shapes (..., D)"""
    min_prev = prev.min(axis=-1, keepdims=True)
    best = prev.copy()
    best[..., 1:] = np.minimum(best[..., 1:], prev[..., :-1] + p1)
    best[..., :-1] = np.minimum(best[..., :-1], prev[..., 1:] + p1)
    best = np.minimum(best, min_prev + p2)
    return cost + (best - min_prev)


def aggregate_path(
    volume: CostVolume, direction: Tuple[int, int], p1: float, p2: float
) -> np.ndarray:
    """L_r for a single straight-line path; paths start at the border with L_r = C"""
    dx, dy = direction
    if (dx, dy) == (0, 0) or abs(dx) > 1 or abs(dy) > 1:
        raise DomainError(f"invalid path direction {direction}")
    costs = volume.costs
    h, w, _ = costs.shape
    agg = np.empty_like(costs)

    if dy == 0:
        columns = range(w) if dx > 0 else range(w - 1, -1, -1)
        for i, x in enumerate(columns):
            if i == 0:
                agg[:, x] = costs[:, x]
            else:
                agg[:, x] = _path_step(costs[:, x], agg[:, x - dx], p1, p2)
        return agg

    rows = range(h) if dy > 0 else range(h - 1, -1, -1)
    xs = np.arange(w)
    prev_x = xs - dx
    inside = (prev_x >= 0) & (prev_x < w)
    for i, y in enumerate(rows):
        if i == 0:
            agg[y] = costs[y]
            continue
        agg[y, ~inside] = costs[y, ~inside]
        agg[y, inside] = _path_step(
            costs[y, inside], agg[y - dy, prev_x[inside]], p1, p2
        )
    return agg


def sgm_aggregate(volume: CostVolume, params: SgmParams) -> CostVolume:
    paths = PATHS_8 if params.num_paths == 8 else PATHS_4
    total = np.zeros_like(volume.costs)
    for direction in paths:
        total += aggregate_path(volume, direction, params.p1, params.p2)
    return CostVolume(total)


def cross_arms(image: PixelGrid, params: CrossParams) -> np.ndarray:
    """Arm lengths (left, right, up, down) of each pixel's cross-shaped support region"""
    plane = _gray_plane(image) * 255.0
    h, w = plane.shape
    arms = np.zeros((h, w, 4), dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]

    for k, (sx, sy) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
        alive = np.ones((h, w), dtype=bool)
        for length in range(1, params.l1):
            qx = xs + sx * length
            qy = ys + sy * length
            inside = (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
            qx_c = np.clip(qx, 0, w - 1)
            qy_c = np.clip(qy, 0, h - 1)
            px_c = np.clip(qx - sx, 0, w - 1)
            py_c = np.clip(qy - sy, 0, h - 1)
            to_center = np.abs(plane[qy_c, qx_c] - plane)
            to_previous = np.abs(plane[qy_c, qx_c] - plane[py_c, px_c])
            ok = inside & (to_center < params.tau1) & (to_previous < params.tau1)
            if length > params.l2:
                ok &= to_center < params.tau2
            alive &= ok
            if not alive.any():
                break
            arms[:, :, k] += alive
    return arms


def _interval_sums(values: np.ndarray, lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    """Sum of `values` over [index - lo, index + hi] along `axis` (0 or 1) via prefix sums"""
    prefix = np.cumsum(values, axis=axis)
    pad = [(0, 0)] * values.ndim
    pad[axis] = (1, 0)
    prefix = np.pad(prefix, pad)
    n = values.shape[axis]
    index = np.arange(n).reshape((-1, 1) if axis == 0 else (1, -1))
    upper = index + hi + 1
    lower = index - lo
    if values.ndim == 3:
        upper = upper[:, :, None]
        lower = lower[:, :, None]
    upper = np.broadcast_to(upper, values.shape)
    lower = np.broadcast_to(lower, values.shape)
    return np.take_along_axis(prefix, upper, axis=axis) - np.take_along_axis(
        prefix, lower, axis=axis
    )


def cross_aggregate(volume: CostVolume, arms: np.ndarray) -> CostVolume:
    """Horizontal-then-vertical support sums, normalized by support size"""
    costs = volume.costs
    if arms.shape[:2] != costs.shape[:2]:
        raise DomainError("arm map and cost volume differ in size")
    left, right, up, down = (arms[:, :, k] for k in range(4))
    ones = np.ones(costs.shape[:2])

    horizontal = _interval_sums(costs, left, right, axis=1)
    counts = _interval_sums(ones, left, right, axis=1)
    total = _interval_sums(horizontal, up, down, axis=0)
    support = _interval_sums(counts, up, down, axis=0)
    return CostVolume(total / support[:, :, None])


def wta(volume: CostVolume) -> DisparityMap:
    """Per-pixel argmin; the lowest disparity wins ties"""
    costs = volume.costs
    best = np.argmin(costs, axis=2)
    best_cost = np.take_along_axis(costs, best[:, :, None], axis=2)[:, :, 0]
    xs = np.arange(volume.width)[None, :]
    valid = (best_cost < OUT_OF_FRAME_COST) & (xs - best >= 0)
    return DisparityMap.from_array(best.astype(np.float64), valid=valid)


def right_disparity(volume: CostVolume) -> DisparityMap:
    """WTA for the right view, reading cost(x, y, d) at (x + d, y)"""
    costs = volume.costs
    h, w, n_disp = costs.shape
    reindexed = np.full_like(costs, OUT_OF_FRAME_COST)
    for d in range(min(n_disp, w)):
        reindexed[:, : w - d, d] = costs[:, d:, d]
    best = np.argmin(reindexed, axis=2)
    best_cost = np.take_along_axis(reindexed, best[:, :, None], axis=2)[:, :, 0]
    xs = np.arange(w)[None, :]
    valid = (best_cost < OUT_OF_FRAME_COST) & (xs + best < w)
    return DisparityMap.from_array(best.astype(np.float64), valid=valid)


def lr_consistency(
    left_disp: DisparityMap, right_disp: DisparityMap, threshold: float
) -> DisparityMap:
    if left_disp.grid.shape != right_disp.grid.shape:
        raise DomainError("left and right disparity maps differ in size")
    d_left = left_disp.values
    h, w = d_left.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xr = xs - np.floor(d_left + 0.5).astype(np.int64)
    inside = left_disp.valid & (xr >= 0) & (xr < w)
    xr = np.clip(xr, 0, w - 1)
    d_right = right_disp.values[ys, xr]
    consistent = (
        inside
        & right_disp.valid[ys, xr]
        & (np.abs(d_left - d_right) <= threshold)
    )
    return DisparityMap.from_array(d_left, valid=consistent)


def _match_balanced(pair: StereoPair, d_max: int, config: BlackboxConfig) -> DisparityMap:
    if config.method == "sgm":
        volume = matching_cost(pair, d_max, "census", config)
        aggregated = sgm_aggregate(volume, config.sgm)
    else:
        volume = matching_cost(pair, d_max, "ad_census", config)
        aggregated = cross_aggregate(volume, cross_arms(pair.left, config.cross))

    disparity = wta(aggregated)
    if config.sgm.lr_check:
        disparity = lr_consistency(
            disparity, right_disparity(aggregated), config.sgm.lr_threshold
        )
    return disparity


def run_blackbox(pair: StereoPair, config: Optional[BlackboxConfig] = None) -> DisparityMap:
    """Raw disparity at left-image resolution, in left-image pixel units"""
    config = config or BlackboxConfig()
    started = time.perf_counter()

    if pair.balanced:
        disparity = _match_balanced(pair, config.d_max, config)
    else:
        kappa = pair.kappa
        right = pair.right
        left_small = resize_bilinear(pair.left, right.width, right.height)
        d_max_low = max(1, math.ceil(config.d_max / kappa))
        low = _match_balanced(StereoPair(left_small, right), d_max_low, config)
        disparity = scale_disparity_values(
            resize_disparity_nearest(low, pair.left.width, pair.left.height), kappa
        )

    logger.info(
        "%s blackbox on %dx%d (kappa=%.2f): %.1f%% valid (done in %.2fs)",
        config.method,
        pair.left.width,
        pair.left.height,
        pair.kappa,
        100.0 * disparity.valid.mean(),
        time.perf_counter() - started,
    )
    return disparity


def blackbox_summary(d: DisparityMap) -> Dict[str, float]:
    values = d.values[d.valid]
    if values.size == 0:
        return {"valid_fraction": 0.0}
    return {
        "valid_fraction": float(d.valid.mean()),
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
    }
