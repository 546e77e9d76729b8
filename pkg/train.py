"""
Training: classification + offset loss, synthetic scenes and the training loop.

Each step draws a fresh synthetic scene, picks the raw disparity source
(SGM, AD-Census or corrupted ground truth), scales raw and ground truth
jointly, samples continuous coordinates and takes one Adam step. Every
step seeds its own generator from (seed, step), so runs are reproducible
with or without scene prefetching.
"""

import logging
import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

import autodiff as ad
from blackbox import BlackboxConfig, run_blackbox
from errors import DivergenceError, DomainError
from evaluation import epe
from refine_net import RefinementModel, prepare_disparity_input, refine_grid, save_checkpoint
from stereo_core import (
    ContinuousCoord,
    DisparityMap,
    PixelGrid,
    StereoPair,
    bilinear_sample_many,
    resize_bilinear,
    scale_disparity_values,
)

logger = logging.getLogger(__name__)

RawSource = Literal["sgm", "ad_census", "corrupt_gt"]
NUISANCES = ("noise", "holes", "quantize", "bias")

METRIC_COLUMNS = ["step", "total", "ce", "offset", "masked_fraction", "val_epe"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(2000, ge=0)
    crop_w: int = Field(64, ge=16)
    crop_h: int = Field(64, ge=16)
    n_coords: int = Field(2048, ge=1)
    scene_d_max: int = Field(12, ge=1, description="largest synthetic disparity, left-image px")
    lr: float = Field(1e-4, ge=0)
    lr_decay_at: float = Field(0.8, ge=0, le=1)
    lr_decay_factor: float = Field(0.5, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    sigma: float = Field(math.sqrt(2.0), gt=0)
    scale_min: float = Field(0.2, gt=0)
    scale_max: float = Field(3.0, gt=0)
    raw_sources: List[RawSource] = Field(default_factory=lambda: ["sgm", "ad_census", "corrupt_gt"])
    kappas: List[int] = Field(default_factory=lambda: [1, 2])
    seed: int = 0
    val_every: int = Field(250, ge=0)
    val_scenes: int = Field(4, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    log_every: int = Field(50, ge=1)
    prefetch: int = Field(0, ge=0, description="scene generation worker threads, 0 generates inline")

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.scale_max < self.scale_min:
            raise ValueError("scale_max must be >= scale_min")
        if not self.raw_sources:
            raise ValueError("at least one raw disparity source is required")
        if any(k < 1 or self.crop_w % k or self.crop_h % k for k in self.kappas):
            raise ValueError(f"every kappa in {self.kappas} must divide the {self.crop_w}x{self.crop_h} crop")
        if 4 * self.scene_d_max >= self.crop_w:
            raise ValueError(f"scene_d_max={self.scene_d_max} must stay below crop_w / 4")
        return self


# ---- loss ----


@dataclass
class LossBreakdown:
    ce_term: float
    offset_term: float
    total: float
    masked_fraction: float
    loss: Optional[ad.Tensor] = None

    def as_row(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "ce": self.ce_term,
            "offset": self.offset_term,
            "masked_fraction": self.masked_fraction,
        }


def gaussian_targets(d_star: np.ndarray, sigma: float, d_bins: int) -> np.ndarray:
    """(N, d_bins) normalized Gaussian weights centred at each d_star"""
    d_star = np.atleast_1d(np.asarray(d_star, dtype=np.float64))
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if np.any(d_star < 0) or np.any(d_star > d_bins - 1) or not np.all(np.isfinite(d_star)):
        raise DomainError(f"target disparity outside [0, {d_bins - 1}]")
    bins = np.arange(d_bins, dtype=np.float64)
    log_w = -((bins[None, :] - d_star[:, None]) ** 2) / (2.0 * sigma**2)
    log_w -= log_w.max(axis=1, keepdims=True)
    w = np.exp(log_w)
    return w / w.sum(axis=1, keepdims=True)


def gaussian_target(d_star: float, sigma: float, d_bins: int) -> np.ndarray:
    return gaussian_targets(np.array([d_star]), sigma, d_bins)[0]


def target_entropy(d_star: np.ndarray, sigma: float, d_bins: int) -> float:
    """Mean entropy of the Gaussian targets, the floor of the cross-entropy term"""
    t = gaussian_targets(d_star, sigma, d_bins)
    logs = np.log(np.where(t > 0, t, 1.0))
    return float(np.mean(-(t * logs).sum(axis=1)))


def refinement_loss(logits: ad.Tensor, offset: ad.Tensor, d_star: np.ndarray, sigma: float) -> LossBreakdown:
    """Cross-entropy against a Gaussian target plus a masked L1 offset term

    logits: (N, d_bins), offset: (N,), d_star: (N,) target disparity in bins.
    The offset term only counts points whose target lies within one bin of
    the predicted class; other points contribute exactly zero.
    """
    d_star = np.atleast_1d(np.asarray(d_star, dtype=np.float64))
    n, d_bins = logits.shape
    if offset.shape != (n,) or d_star.shape != (n,):
        raise DomainError(f"loss inputs disagree: logits {logits.shape}, offset {offset.shape}, d* {d_star.shape}")
    targets = gaussian_targets(d_star, sigma, d_bins)

    log_probs = ad.log_softmax(logits, axis=1)
    ce = ad.mul_scalar(ad.reduce_mean(ad.reduce_sum(ad.mul(log_probs, targets), axis=1)), -1.0)

    d_s = d_star - np.argmax(logits.values, axis=1)
    mask = (np.abs(d_s) <= 1.0).astype(np.float64)
    residual = ad.absolute(ad.sub(offset, d_s))
    offset_term = ad.reduce_mean(ad.mul(residual, mask))

    total = ad.add(ce, offset_term)
    return LossBreakdown(
        ce_term=ce.item(),
        offset_term=offset_term.item(),
        total=total.item(),
        masked_fraction=float(1.0 - mask.mean()),
        loss=total,
    )


def l1_loss(regression: ad.Tensor, d_star: np.ndarray, max_disp: int) -> LossBreakdown:
    """Mean |prediction - d*| in bins for the regression head, reported as the offset term"""
    d_star = np.atleast_1d(np.asarray(d_star, dtype=np.float64))
    if regression.shape != d_star.shape:
        raise DomainError(f"regression {regression.shape} does not match targets {d_star.shape}")
    loss = ad.reduce_mean(ad.absolute(ad.sub(ad.mul_scalar(regression, max_disp), d_star)))
    value = loss.item()
    return LossBreakdown(ce_term=0.0, offset_term=value, total=value, masked_fraction=0.0, loss=loss)


# ---- synthetic scenes ----


@dataclass(frozen=True)
class SceneLayer:
    """A textured planar patch; disparity is d0 at (cx, cy) plus linear slopes"""

    shape: Literal["frame", "rect", "ellipse"]
    cx: float
    cy: float
    rx: float
    ry: float
    d0: float
    texture: np.ndarray
    slope_x: float = 0.0
    slope_y: float = 0.0

    def disparity_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.d0 + self.slope_x * (x - self.cx) + self.slope_y * (y - self.cy)

    def covers(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.shape == "frame":
            return np.ones(np.broadcast(x, y).shape, dtype=bool)
        u = (x - self.cx) / self.rx
        v = (y - self.cy) / self.ry
        if self.shape == "rect":
            return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        return u * u + v * v <= 1.0

    def left_x_from_right(self, xr: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Left-image x of the surface point this layer would show at right-image x"""
        return (xr + self.d0 - self.slope_x * self.cx + self.slope_y * (y - self.cy)) / (1.0 - self.slope_x)

    def shade(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        tex = PixelGrid(self.texture)
        xs = np.clip(x, 0.0, tex.width - 1)
        ys = np.clip(y, 0.0, tex.height - 1)
        return bilinear_sample_many(tex, xs, ys)[:, 0].reshape(np.shape(x))


@dataclass
class SyntheticScene:
    left: PixelGrid
    right: PixelGrid
    d_gt: DisparityMap
    occlusion: np.ndarray
    layers: List[SceneLayer] = field(default_factory=list)

    @property
    def pair(self) -> StereoPair:
        return StereoPair(self.left, self.right)


def _front_layer(layers: Sequence[SceneLayer], x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index and disparity of the nearest layer covering each left-image point"""
    best = np.full(x.shape, -1, dtype=np.int64)
    depth = np.full(x.shape, -np.inf)
    for i, layer in enumerate(layers):
        d = layer.disparity_at(x, y)
        hit = layer.covers(x, y) & (d > depth)
        best[hit] = i
        depth[hit] = d[hit]
    return best, depth


def _front_layer_right(
    layers: Sequence[SceneLayer], xr: np.ndarray, y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Index and left-image x of the layer visible at each right-image point"""
    best = np.full(xr.shape, -1, dtype=np.int64)
    depth = np.full(xr.shape, -np.inf)
    source_x = np.zeros(xr.shape)
    for i, layer in enumerate(layers):
        xl = layer.left_x_from_right(xr, y)
        d = layer.disparity_at(xl, y)
        hit = layer.covers(xl, y) & (d > depth)
        best[hit] = i
        depth[hit] = d[hit]
        source_x[hit] = xl[hit]
    return best, source_x


def render_layers(layers: Sequence[SceneLayer], w: int, h: int) -> SyntheticScene:
    """Render both views of a layered scene; layers[0] must cover the whole frame

    Nearer surfaces (larger disparity) win in both views. A left pixel is
    occluded when its surface point leaves the right frame or is hidden by
    another layer there.
    """
    if not layers or layers[0].shape != "frame":
        raise DomainError("the first layer must be a full-frame background")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    front, d_gt = _front_layer(layers, xs, ys)
    left = np.zeros((h, w))
    for i, layer in enumerate(layers):
        mask = front == i
        if mask.any():
            left[mask] = layer.shade(xs[mask], ys[mask])

    right_front, source_x = _front_layer_right(layers, xs, ys)
    right = np.zeros((h, w))
    for i, layer in enumerate(layers):
        mask = right_front == i
        if mask.any():
            right[mask] = layer.shade(source_x[mask], ys[mask])

    xr = xs - d_gt
    seen_from, _ = _front_layer_right(layers, xr, ys)
    occlusion = (xr < 0) | (seen_from != front)

    return SyntheticScene(
        left=PixelGrid(left),
        right=PixelGrid(right),
        d_gt=DisparityMap.from_array(d_gt),
        occlusion=occlusion,
        layers=list(layers),
    )


def _texture(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8)
    cell = int(rng.integers(1, 4))
    coarse = rng.uniform(-1.0, 1.0, (h // cell + 2, w // cell + 2))
    blocks = np.kron(coarse, np.ones((cell, cell)))[:h, :w]
    fine = rng.uniform(-1.0, 1.0, (h, w))
    return np.clip(base + 0.25 * blocks + 0.15 * fine, 0.0, 1.0)


def synth_scene(
    seed,
    w: int,
    h: int,
    d_max: float,
    integer_disparity: bool = False,
    slopes: bool = True,
    n_layers: Optional[int] = None,
) -> SyntheticScene:
    """Random layered scene: a textured background and 3-8 nearer rectangles / ellipses"""
    if not 0 < d_max < w / 4:
        raise DomainError(f"d_max={d_max} must be positive and below w/4={w / 4}")
    rng = np.random.default_rng(seed)
    tex_w = int(math.ceil(w + d_max)) + 3

    def disparity(lo: float, hi: float) -> float:
        value = rng.uniform(lo, hi)
        return float(np.floor(value)) if integer_disparity else value

    def slope(d0: float, rx: float, ry: float) -> Tuple[float, float]:
        if not slopes or integer_disparity or rng.random() < 0.5:
            return 0.0, 0.0
        room = min(d0, d_max - d0) / (rx + ry + 1.0)
        return rng.uniform(-room, room), rng.uniform(-room, room)

    bg_d = disparity(0.0, d_max / 3.0)
    sx, sy = slope(bg_d, w / 2.0, h / 2.0)
    layers = [SceneLayer("frame", w / 2.0, h / 2.0, w / 2.0, h / 2.0, bg_d, _texture(rng, tex_w, h), sx, sy)]

    count = n_layers if n_layers is not None else int(rng.integers(3, 9))
    for _ in range(count):
        rx = rng.uniform(0.08, 0.3) * w
        ry = rng.uniform(0.08, 0.3) * h
        cx = rng.uniform(0.0, w - 1.0)
        cy = rng.uniform(0.0, h - 1.0)
        d0 = disparity(bg_d + 1.0, d_max) if bg_d + 1.0 < d_max else bg_d
        sx, sy = slope(d0, rx, ry)
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        layers.append(SceneLayer(shape, cx, cy, rx, ry, d0, _texture(rng, tex_w, h), sx, sy))

    return render_layers(layers, w, h)


def corrupt_gt(
    d_gt: DisparityMap,
    seed,
    nuisances: Optional[Sequence[str]] = None,
    strength: float = 1.0,
    noise_sigma: Optional[float] = None,
) -> DisparityMap:
    """Ground truth degraded by a random mix of noise, holes, quantization and bias patches

    `nuisances` fixes the mix instead of drawing it; strength 0 returns the
    map unchanged.
    """
    rng = np.random.default_rng(seed)
    if strength == 0:
        return DisparityMap.from_array(d_gt.values)
    if nuisances is None:
        picked = [n for n in NUISANCES if rng.random() < 0.5]
        nuisances = picked or [NUISANCES[int(rng.integers(len(NUISANCES)))]]
    unknown = set(nuisances) - set(NUISANCES)
    if unknown:
        raise DomainError(f"unknown nuisances {sorted(unknown)}")

    h, w = d_gt.height, d_gt.width
    values = d_gt.values.copy()
    valid = d_gt.valid.copy()

    if "bias" in nuisances:
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
            pw, ph = int(rng.integers(w // 8 + 1, w // 3 + 2)), int(rng.integers(h // 8 + 1, h // 3 + 2))
            values[y0 : y0 + ph, x0 : x0 + pw] += strength * rng.uniform(-3.0, 3.0)
    if "noise" in nuisances:
        sigma = noise_sigma if noise_sigma is not None else strength * rng.uniform(0.25, 2.0)
        values += rng.normal(0.0, sigma, values.shape)
    if "quantize" in nuisances:
        values = np.round(values)
    if "holes" in nuisances:
        budget = strength * rng.uniform(0.02, 0.2) * w * h
        holes = np.zeros((h, w), dtype=bool)
        while holes.sum() < budget:
            pw, ph = int(rng.integers(2, w // 4 + 3)), int(rng.integers(2, h // 4 + 3))
            x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
            candidate = holes.copy()
            candidate[y0 : y0 + ph, x0 : x0 + pw] = True
            if candidate.sum() > 0.2 * w * h:
                break
            holes = candidate
        valid &= ~holes

    values = np.maximum(values, 0.0)
    return DisparityMap.from_array(values, valid=valid)


# ---- training samples ----


@dataclass
class TrainSample:
    left: PixelGrid
    right: PixelGrid
    d_raw: DisparityMap
    d_gt: DisparityMap
    xs: np.ndarray
    ys: np.ndarray
    gt_at_coords: np.ndarray
    kappa: int = 1
    source: str = "corrupt_gt"
    scale: float = 1.0

    @property
    def coords(self) -> List[ContinuousCoord]:
        return [ContinuousCoord(float(x), float(y)) for x, y in zip(self.xs, self.ys)]


def sample_gt(d_gt: DisparityMap, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ground truth at continuous coordinates and a mask of usable samples

    Bilinear where the four surrounding pixels are valid and within 1 px of
    each other, nearest pixel elsewhere so depth edges are never blended.
    """
    h, w = d_gt.height, d_gt.width
    values, valid = d_gt.values, d_gt.valid
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    corners = np.stack([values[y0, x0], values[y0, x1], values[y1, x0], values[y1, x1]])
    corner_valid = np.stack([valid[y0, x0], valid[y0, x1], valid[y1, x0], valid[y1, x1]]).all(axis=0)
    smooth = corner_valid & (corners.max(axis=0) - corners.min(axis=0) <= 1.0)

    nx = np.clip(np.ceil(xs - 0.5).astype(np.int64), 0, w - 1)
    ny = np.clip(np.ceil(ys - 0.5).astype(np.int64), 0, h - 1)
    out = values[ny, nx].copy()
    usable = valid[ny, nx] | smooth
    if smooth.any():
        out[smooth] = bilinear_sample_many(d_gt.grid, xs[smooth], ys[smooth])[:, 0]
    return out, usable


def sample_coords(
    rng: np.random.Generator, d_gt: DisparityMap, n: int, max_tries: int = 20
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """N uniform continuous coordinates over the crop, redrawing those that land on invalid GT"""
    w, h = d_gt.width, d_gt.height
    xs = rng.uniform(0.0, w - 1.0, n)
    ys = rng.uniform(0.0, h - 1.0, n)
    gt, usable = sample_gt(d_gt, xs, ys)
    for _ in range(max_tries):
        if usable.all():
            break
        redo = ~usable
        xs[redo] = rng.uniform(0.0, w - 1.0, redo.sum())
        ys[redo] = rng.uniform(0.0, h - 1.0, redo.sum())
        gt[redo], usable[redo] = sample_gt(d_gt, xs[redo], ys[redo])
    return xs[usable], ys[usable], gt[usable]


def make_train_sample(
    step: int,
    config: TrainConfig,
    max_disp: int,
    blackbox: Optional[BlackboxConfig] = None,
) -> TrainSample:
    rng = np.random.default_rng([config.seed, step])
    kappa = int(rng.choice(config.kappas))
    scene = synth_scene(rng.integers(2**32), config.crop_w, config.crop_h, config.scene_d_max)
    right = scene.right
    if kappa > 1:
        right = resize_bilinear(right, config.crop_w // kappa, config.crop_h // kappa)

    source = str(rng.choice(config.raw_sources))
    if source == "corrupt_gt":
        d_raw = corrupt_gt(scene.d_gt, rng.integers(2**32))
    else:
        bb = (blackbox or BlackboxConfig()).model_copy(update={"method": source, "d_max": config.scene_d_max})
        d_raw = run_blackbox(StereoPair(scene.left, right), bb)

    # scale raw and ground truth jointly, never beyond the network's range
    largest = max(scene.d_gt.values.max(), d_raw.values[d_raw.valid].max(initial=0.0), 1e-6)
    scale = min(rng.uniform(config.scale_min, config.scale_max), max_disp / largest)
    d_raw = scale_disparity_values(d_raw, scale)
    d_gt = scale_disparity_values(scene.d_gt, scale)

    xs, ys, gt = sample_coords(rng, d_gt, config.n_coords)
    return TrainSample(scene.left, right, d_raw, d_gt, xs, ys, gt, kappa, source, scale)


# ---- training loop ----


@dataclass
class TrainResult:
    model: RefinementModel
    metrics: pd.DataFrame
    checkpoint: Optional[Path] = None


def learning_rate(step: int, config: TrainConfig) -> float:
    if config.steps and step >= config.lr_decay_at * config.steps:
        return config.lr * config.lr_decay_factor
    return config.lr


def train_step(model: RefinementModel, optimizer: ad.Adam, sample: TrainSample, lr: float, sigma: float) -> LossBreakdown:
    config = model.config
    head = model.forward_points(
        sample.left,
        prepare_disparity_input(sample.d_raw, config.max_disp),
        sample.xs,
        sample.ys,
    )
    if config.head == "classification":
        breakdown = refinement_loss(head.logits, head.offset, sample.gt_at_coords, sigma)
    else:
        breakdown = l1_loss(head.regression, sample.gt_at_coords, config.max_disp)
    if not math.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss {breakdown.total}")
    ad.backward(breakdown.loss, optimizer.params)
    optimizer.step(lr)
    return breakdown


def validation_scenes(config: TrainConfig, blackbox: Optional[BlackboxConfig] = None) -> List[Tuple[SyntheticScene, DisparityMap]]:
    """Held-out scenes (seeds disjoint from training) with their SGM raw maps"""
    bb = (blackbox or BlackboxConfig()).model_copy(update={"method": "sgm", "d_max": config.scene_d_max})
    scenes = []
    for i in range(config.val_scenes):
        scene = synth_scene([config.seed, 10**9 + i], config.crop_w, config.crop_h, config.scene_d_max)
        scenes.append((scene, run_blackbox(scene.pair, bb)))
    return scenes


def validate(model: RefinementModel, scenes: Sequence[Tuple[SyntheticScene, DisparityMap]]) -> float:
    errors = []
    for scene, raw in scenes:
        refined = refine_grid(scene.pair, raw, model, scene.left.width, scene.left.height)
        errors.append(epe(refined, scene.d_gt))
    return float(np.mean(errors))


def train_epochs(
    model: RefinementModel,
    config: TrainConfig,
    blackbox: Optional[BlackboxConfig] = None,
    out_dir: Optional[Path] = None,
    sample_fn: Optional[Callable[[int], TrainSample]] = None,
) -> TrainResult:
    """Train `model` in place for config.steps steps and return it with the metrics log

    `sample_fn(step)` replaces scene generation, e.g. to overfit one crop.
    """
    if sample_fn is None:
        def sample_fn(step: int) -> TrainSample:
            return make_train_sample(step, config, model.config.max_disp, blackbox)

    optimizer = ad.Adam(model.parameters(), config.beta1, config.beta2)
    val_set = validation_scenes(config, blackbox) if config.val_every and config.steps else []
    rows = []
    started = time.perf_counter()
    logger.info("training %d steps (head=%s, seed=%d)", config.steps, model.config.head, config.seed)

    executor = ThreadPoolExecutor(max_workers=config.prefetch) if config.prefetch else None
    pending: Dict[int, Future] = {}
    lookahead = 2 * config.prefetch
    try:
        for step in range(config.steps):
            if executor is not None:
                for ahead in range(step, min(step + lookahead + 1, config.steps)):
                    if ahead not in pending:
                        pending[ahead] = executor.submit(sample_fn, ahead)
                sample = pending.pop(step).result()
            else:
                sample = sample_fn(step)

            breakdown = train_step(model, optimizer, sample, learning_rate(step, config), config.sigma)
            row = {"step": step, **breakdown.as_row(), "val_epe": float("nan")}

            last = step == config.steps - 1
            if val_set and ((step + 1) % config.val_every == 0 or last):
                row["val_epe"] = validate(model, val_set)
                logger.info("step %d validation EPE %.3f", step + 1, row["val_epe"])
            if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, Path(out_dir) / f"checkpoint_{step + 1:06d}.npz", {"step": step + 1})
            if step % config.log_every == 0 or last:
                logger.info(
                    "step %d/%d loss %.4f (ce %.4f, offset %.4f, masked %.1f%%, %s kappa=%d)",
                    step + 1,
                    config.steps,
                    breakdown.total,
                    breakdown.ce_term,
                    breakdown.offset_term,
                    100.0 * breakdown.masked_fraction,
                    sample.source,
                    sample.kappa,
                )
            rows.append(row)
    finally:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(out_dir / "metrics.csv", index=False)
        checkpoint = save_checkpoint(
            model, out_dir / "model.npz", {"steps": config.steps, "train_config": config.model_dump()}
        )
    logger.info("training finished in %.1fs", time.perf_counter() - started)
    return TrainResult(model, metrics, checkpoint)
