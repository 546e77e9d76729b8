"""
Evaluation: EPE, bad-th and soft edge error, comparison reports and PLY export.

All metrics are computed over pixels with valid ground truth. A prediction
without a value at such a pixel scores as disparity 0.

Soft edge error (SEE) as computed here: edge pixels are valid GT pixels
whose patch x patch GT neighbourhood spans more than `edge_range_th` px;
each contributes the smallest |pred(p) - gt(q)| over valid q in its patch.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from numpy.lib.stride_tricks import sliding_window_view
from plotly.subplots import make_subplots
from pydantic import BaseModel, ConfigDict, Field

from errors import DomainError, InputError
from stereo_core import DisparityMap, PixelGrid

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (2.0, 3.0, 4.0, 5.0)
PLY_MIN_DISPARITY = 1e-3
SEE_NOTE = (
    "SEE: mean over edge pixels ({patch}x{patch} GT range > {th:g} px) of the smallest |pred - gt| "
    "within the patch; maps with holes are background-filled before scoring"
)


def _aligned(pred: DisparityMap, gt: DisparityMap) -> np.ndarray:
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise DomainError(f"prediction {pred.width}x{pred.height} and GT {gt.width}x{gt.height} differ in size")
    mask = gt.valid
    if not mask.any():
        raise DomainError("ground truth has no valid pixels")
    return mask


def _abs_error(pred: DisparityMap, gt: DisparityMap) -> np.ndarray:
    mask = _aligned(pred, gt)
    scored = np.where(pred.valid, pred.values, 0.0)
    return np.abs(scored - gt.values)[mask]


def epe(pred: DisparityMap, gt: DisparityMap) -> float:
    return float(_abs_error(pred, gt).mean())


def bad(pred: DisparityMap, gt: DisparityMap, th: float) -> float:
    """Percentage of valid GT pixels with an error above `th` px"""
    return float(100.0 * np.mean(_abs_error(pred, gt) > th))


def _see_terms(pred: DisparityMap, gt: DisparityMap, patch: int, edge_range_th: float) -> np.ndarray:
    if patch < 1 or patch % 2 == 0:
        raise DomainError(f"SEE patch must be odd, got {patch}")
    mask = _aligned(pred, gt)
    r = patch // 2
    values = np.pad(gt.values, r, constant_values=0.0)
    valid = np.pad(gt.valid, r, constant_values=False)
    windows = sliding_window_view(values, (patch, patch))
    window_valid = sliding_window_view(valid, (patch, patch))

    hi = np.where(window_valid, windows, -np.inf).max(axis=(2, 3))
    lo = np.where(window_valid, windows, np.inf).min(axis=(2, 3))
    edges = mask & (hi - lo > edge_range_th)

    scored = np.where(pred.valid, pred.values, 0.0)
    errors = np.where(window_valid, np.abs(scored[:, :, None, None] - windows), np.inf).min(axis=(2, 3))
    return errors[edges]


def see(pred: DisparityMap, gt: DisparityMap, patch: int = 5, edge_range_th: float = 2.0) -> Optional[float]:
    """Soft edge error, or None when the GT has no edge pixels"""
    terms = _see_terms(pred, gt, patch, edge_range_th)
    if terms.size == 0:
        return None
    return float(terms.mean())


@dataclass
class MetricReport:
    epe: float
    bad: Dict[float, float]
    see: Optional[float]
    valid_count: int
    edge_count: int

    def as_row(self) -> Dict[str, Optional[float]]:
        row = {f"bad{th:g}": value for th, value in self.bad.items()}
        row["EPE"] = self.epe
        row["SEE"] = self.see
        return row


def metric_report(
    pred: DisparityMap,
    gt: DisparityMap,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    patch: int = 5,
    edge_range_th: float = 2.0,
) -> MetricReport:
    terms = _see_terms(pred, gt, patch, edge_range_th)
    return MetricReport(
        epe=epe(pred, gt),
        bad={float(th): bad(pred, gt, th) for th in thresholds},
        see=float(terms.mean()) if terms.size else None,
        valid_count=int(gt.valid.sum()),
        edge_count=int(terms.size),
    )


def fill_holes(d: DisparityMap) -> DisparityMap:
    """Fill invalid pixels row by row with the smaller (background) of the nearest valid neighbours"""
    values, valid = d.values, d.valid
    if valid.all():
        return d
    h, w = values.shape
    cols = np.arange(w)[None, :].repeat(h, axis=0)

    left_idx = np.maximum.accumulate(np.where(valid, cols, -1), axis=1)
    right_idx = np.minimum.accumulate(np.where(valid, cols, w)[:, ::-1], axis=1)[:, ::-1]
    rows = np.arange(h)[:, None]
    left = np.where(left_idx >= 0, values[rows, np.clip(left_idx, 0, w - 1)], np.inf)
    right = np.where(right_idx < w, values[rows, np.clip(right_idx, 0, w - 1)], np.inf)
    background = np.minimum(left, right)
    background[~np.isfinite(background)] = 0.0
    return DisparityMap.from_array(np.where(valid, values, background))


@dataclass
class ComparisonReport:
    raw: MetricReport
    refined: MetricReport
    deltas: Dict[str, Optional[float]] = field(default_factory=dict)
    note: str = ""

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            [self.raw.as_row(), self.refined.as_row(), self.deltas],
            index=["raw", "refined", "delta"],
        )
        frame.index.name = "map"
        return frame

    def to_text(self) -> str:
        lines = ["=" * 60, "📊 DISPARITY REFINEMENT REPORT", "=" * 60]
        lines.append(self.to_frame().to_string(float_format=lambda v: f"{v:.4f}", na_rep="n/a"))
        lines.append("")
        lines.append(f"valid GT pixels: {self.raw.valid_count}, edge pixels: {self.raw.edge_count}")
        lines.append(self.note)
        return "\n".join(lines)

    def to_dict(self) -> Dict:
        return {
            "raw": asdict(self.raw),
            "refined": asdict(self.refined),
            "deltas": self.deltas,
            "note": self.note,
        }


def compare_report(
    raw: DisparityMap,
    refined: DisparityMap,
    gt: DisparityMap,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    patch: int = 5,
    edge_range_th: float = 2.0,
    fill: bool = True,
) -> ComparisonReport:
    """Raw vs refined metrics; with `fill`, maps with holes are background-filled first"""
    prepare = fill_holes if fill else (lambda d: d)
    raw_report = metric_report(prepare(raw), gt, thresholds, patch, edge_range_th)
    refined_report = metric_report(prepare(refined), gt, thresholds, patch, edge_range_th)
    deltas = {}
    for key, before in raw_report.as_row().items():
        after = refined_report.as_row()[key]
        deltas[key] = None if before is None or after is None else after - before
    return ComparisonReport(raw_report, refined_report, deltas, SEE_NOTE.format(patch=patch, th=edge_range_th))


def write_report(report: ComparisonReport, out_dir: Union[str, Path], stem: str = "report") -> Dict[str, Path]:
    """Write the comparison as CSV, plain text and JSON"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / f"{stem}.csv",
        "text": out_dir / f"{stem}.txt",
        "json": out_dir / f"{stem}.json",
    }
    report.to_frame().to_csv(paths["csv"], float_format="%.6f")
    paths["text"].write_text(report.to_text() + "\n", encoding="utf-8")
    with open(paths["json"], "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, default=str)
    logger.info("report written to %s", paths["csv"])
    return paths


def export_html_report(report: ComparisonReport, path: Union[str, Path], maps: Dict[str, DisparityMap]) -> Path:
    """Metric bars plus one heatmap per disparity map, as a standalone HTML page"""
    frame = report.to_frame().drop(index="delta")
    columns = max(len(maps), 1)
    fig = make_subplots(
        rows=2,
        cols=columns,
        specs=[[{"type": "xy", "colspan": columns}] + [None] * (columns - 1), [{"type": "heatmap"}] * columns],
        subplot_titles=["Raw vs refined"] + list(maps),
        vertical_spacing=0.12,
    )
    for name, row in frame.iterrows():
        fig.add_trace(go.Bar(name=name, x=list(row.index), y=row.values.astype(float)), row=1, col=1)
    for i, (name, d) in enumerate(maps.items(), start=1):
        z = np.where(d.valid, d.values, np.nan)
        fig.add_trace(go.Heatmap(z=z, colorscale="Viridis", showscale=i == columns), row=2, col=i)
        fig.update_yaxes(autorange="reversed", row=2, col=i)
    fig.update_layout(title="Disparity refinement", barmode="group", height=800)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    logger.info("HTML report written to %s", path)
    return path


class CameraModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    focal: float = Field(100.0, gt=0, description="focal length in px")
    baseline: float = Field(0.1, gt=0, description="baseline in m")
    cx: Optional[float] = Field(None, description="principal point x, image centre when unset")
    cy: Optional[float] = None


def export_pointcloud(
    d: DisparityMap,
    rgb: PixelGrid,
    cam: CameraModel,
    path: Union[str, Path],
    binary: bool = False,
) -> int:
    """Back-project a disparity map through a pinhole camera into a coloured PLY

    Returns the number of vertices written.
    """
    if (d.width, d.height) != (rgb.width, rgb.height):
        raise DomainError(f"disparity {d.width}x{d.height} and image {rgb.width}x{rgb.height} differ in size")
    colors = rgb.data if rgb.channels == 3 else np.repeat(rgb.data[:, :, :1], 3, axis=2)
    colors = np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)

    cx = cam.cx if cam.cx is not None else (d.width - 1) / 2.0
    cy = cam.cy if cam.cy is not None else (d.height - 1) / 2.0
    keep = d.valid & (d.values > PLY_MIN_DISPARITY)
    v, u = np.nonzero(keep)
    z = cam.focal * cam.baseline / d.values[keep]
    x = (u - cx) * z / cam.focal
    y = (v - cy) * z / cam.focal
    rgb_kept = colors[keep]

    header = "\n".join(
        [
            "ply",
            f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {z.size}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "end_header",
        ]
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if binary:
            vertices = np.empty(
                z.size,
                dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")],
            )
            vertices["x"], vertices["y"], vertices["z"] = x, y, z
            vertices["red"], vertices["green"], vertices["blue"] = rgb_kept.T
            with open(path, "wb") as f:
                f.write((header + "\n").encode("ascii"))
                f.write(vertices.tobytes())
        else:
            with open(path, "w", encoding="ascii") as f:
                f.write(header + "\n")
                for xi, yi, zi, (r, g, b) in zip(x, y, z, rgb_kept):
                    f.write(f"{xi:.6f} {yi:.6f} {zi:.6f} {r} {g} {b}\n")
    except OSError as e:
        raise InputError(f"could not write point cloud {path}: {e}") from e
    logger.info("wrote %d points to %s", z.size, path)
    return int(z.size)
