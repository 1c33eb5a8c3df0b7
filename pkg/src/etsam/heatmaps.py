"""Target heatmap synthesis for text-center supervision.

The detector is supervised by a single-channel field at 1/4 input resolution
whose value is 1.0 on word centers and decays with a Gaussian profile away
from them. Two variants exist: the default stamps one isotropic kernel per
sampled center-line point, width-adaptive through the local polygon width;
the alternative stamps one anisotropic rotated kernel per word at its
oriented-rectangle center. Overlapping kernels merge cell-wise by maximum,
so the field never exceeds 1.

Cell conventions: a heatmap cell (r, c) covers input pixels
[stride*c, stride*c + stride) x [stride*r, ...); kernels are centered on the
integer cell containing the sampled point so that the point's own cell holds
exactly 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy.ndimage import label as nd_label
from scipy.ndimage import maximum_filter

from .annotations import LineAnn, Polygon, WordAnn, center_line, min_bounding_rect, union_mask

STRIDE = 4
BETA = 0.25  # center-line width -> sigma factor
KAPPA = 0.25  # rectangle extent -> sigma factor
SIGMA_MIN = 0.5  # cells
TRUNCATE = 4.0  # kernel support half-width in sigmas


@dataclass
class Heatmap:
    """Dense target field at 1/stride input resolution, values in [0, 1]."""

    grid: np.ndarray  # (H/stride, W/stride) float64
    stride: int = STRIDE

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"heatmap grid must be 2-D, got shape {self.grid.shape}")


def _check_image_size(image_size: tuple[int, int]) -> tuple[int, int]:
    h, w = image_size
    if h % STRIDE or w % STRIDE:
        raise ValueError(f"image size {image_size} must be divisible by {STRIDE}")
    return h // STRIDE, w // STRIDE


def _polygons(words: Sequence[WordAnn | Polygon]) -> list[Polygon]:
    return [w.polygon if isinstance(w, WordAnn) else w for w in words]


def stamp_kernel(
    grid: np.ndarray,
    center: tuple[int, int],
    sigma_w: float,
    sigma_h: float | None = None,
    theta: float = 0.0,
) -> None:
    """Max-merge one Gaussian kernel into ``grid`` at integer cell ``center``.

    ``center`` is (row, col). With ``sigma_h`` None the kernel is isotropic
    with scale ``sigma_w``; otherwise it is the rotated anisotropic form
    whose ``sigma_w`` axis points along ``theta``. Support is truncated at
    TRUNCATE sigmas per principal axis; cells outside stay untouched (the
    kernel contributes exactly 0 there).
    """
    h, w = grid.shape
    cy, cx = int(center[0]), int(center[1])
    if sigma_h is None:
        sigma_h = sigma_w
        theta = 0.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # Bounding box of the truncated support in grid axes.
    half_x = TRUNCATE * (sigma_w * abs(cos_t) + sigma_h * abs(sin_t))
    half_y = TRUNCATE * (sigma_w * abs(sin_t) + sigma_h * abs(cos_t))
    c0, c1 = max(0, int(math.floor(cx - half_x))), min(w - 1, int(math.ceil(cx + half_x)))
    r0, r1 = max(0, int(math.floor(cy - half_y))), min(h - 1, int(math.ceil(cy + half_y)))
    if c0 > c1 or r0 > r1:
        return
    xs = np.arange(c0, c1 + 1, dtype=np.float64) - cx
    ys = np.arange(r0, r1 + 1, dtype=np.float64) - cy
    dx, dy = np.meshgrid(xs, ys)
    u = dx * cos_t + dy * sin_t
    v = dy * cos_t - dx * sin_t
    values = np.exp(-(u**2 / (2.0 * sigma_w**2) + v**2 / (2.0 * sigma_h**2)))
    values[(np.abs(u) > TRUNCATE * sigma_w) | (np.abs(v) > TRUNCATE * sigma_h)] = 0.0
    region = grid[r0 : r1 + 1, c0 : c1 + 1]
    np.maximum(region, values, out=region)


def _snap_cell(point_xy: np.ndarray, grid_shape: tuple[int, int], stride: int) -> tuple[int, int]:
    """Cell (row, col) containing an input-pixel point, clipped to the grid."""
    gh, gw = grid_shape
    col = min(max(int(math.floor(point_xy[0] / stride)), 0), gw - 1)
    row = min(max(int(math.floor(point_xy[1] / stride)), 0), gh - 1)
    return row, col


def centerline_heatmap(
    words: Sequence[WordAnn | Polygon],
    image_size: tuple[int, int],
    beta: float = BETA,
    sigma_min: float = SIGMA_MIN,
) -> Heatmap:
    """Width-adaptive center-line target field.

    Every word contributes one isotropic kernel per center-line sample (taken
    at one-cell spacing); the kernel scale is ``beta`` times the local width
    in cells, floored at ``sigma_min``. Kernels merge by cell-wise max, so
    each sampled point's cell reads exactly 1.0.
    """
    shape = _check_image_size(image_size)
    grid = np.zeros(shape, dtype=np.float64)
    for poly in _polygons(words):
        path = center_line(poly, spacing=float(STRIDE))
        for x, y, width in path:
            sigma = max(beta * width / STRIDE, sigma_min)
            stamp_kernel(grid, _snap_cell(np.array([x, y]), shape, STRIDE), sigma)
    return Heatmap(grid)


def centerpoint_heatmap(
    words: Sequence[WordAnn | Polygon],
    image_size: tuple[int, int],
    kappa: float = KAPPA,
    sigma_min: float = SIGMA_MIN,
) -> Heatmap:
    """Single anisotropic kernel per word at its oriented-rectangle center.

    The kernel's long axis follows the rectangle orientation: the extent
    along ``angle`` is scaled by ``kappa * width`` and the perpendicular one
    by ``kappa * height`` (both in cells, floored at ``sigma_min``).
    """
    shape = _check_image_size(image_size)
    grid = np.zeros(shape, dtype=np.float64)
    for poly in _polygons(words):
        rect = min_bounding_rect(poly)
        sigma_w = max(kappa * rect.width / STRIDE, sigma_min)
        sigma_h = max(kappa * rect.height / STRIDE, sigma_min)
        cell = _snap_cell(np.asarray(rect.center), shape, STRIDE)
        stamp_kernel(grid, cell, sigma_w, sigma_h, rect.angle)
    return Heatmap(grid)


def refine_pseudo_heatmap(
    pred: Heatmap | np.ndarray,
    lines: Sequence[LineAnn | Polygon],
    dilation: int = 2,
) -> Heatmap:
    """Mask a predicted field to the neighborhood of known text-lines.

    Used when only line polygons are annotated: the model's own heatmap
    prediction becomes the target after zeroing everything farther than
    ``dilation`` cells (Chebyshev distance) from any line region. With no
    lines the result is all zero.
    """
    grid = pred.grid if isinstance(pred, Heatmap) else np.asarray(pred, dtype=np.float64)
    stride = pred.stride if isinstance(pred, Heatmap) else STRIDE
    polys = [ln.polygon if isinstance(ln, LineAnn) else ln for ln in lines]
    if not polys:
        return Heatmap(np.zeros_like(grid), stride)
    line_mask = union_mask(polys, grid.shape, scale=1.0 / stride)
    if dilation > 0:
        line_mask = maximum_filter(line_mask, size=2 * dilation + 1, mode="constant")
    return Heatmap(np.where(line_mask, grid, 0.0), stride)


def local_maxima(grid: np.ndarray, threshold: float, dedup: bool = True) -> np.ndarray:
    """Cells that equal their 3x3 neighborhood maximum and exceed ``threshold``.

    Border cells compare only against in-grid neighbors. With ``dedup`` each
    plateau (an 8-connected component of equal-valued candidate cells) reduces
    to its lexicographically smallest (row, col); adjacent candidates always
    share a value, so components of the candidate mask are exactly the
    plateaus. Returns an (M, 2) int array of (row, col), sorted
    lexicographically.
    """
    grid = np.asarray(grid)
    neighborhood_max = maximum_filter(grid, size=3, mode="constant", cval=-np.inf)
    candidates = (grid == neighborhood_max) & (grid > threshold)
    coords = np.argwhere(candidates)  # row-major order == lexicographic
    if not dedup or len(coords) == 0:
        return coords
    labels, _ = nd_label(candidates, structure=np.ones((3, 3), dtype=bool))
    seen: set[int] = set()
    keep = []
    for r, c in coords:
        lab = int(labels[r, c])
        if lab not in seen:
            seen.add(lab)
            keep.append((r, c))
    return np.array(keep, dtype=np.int64)


def save_heatmap_png(hm: Heatmap | np.ndarray, path: str | Path) -> None:
    """Persist a heatmap as single-channel 8-bit PNG (values round(255 * H))."""
    grid = hm.grid if isinstance(hm, Heatmap) else np.asarray(hm)
    data = np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise IOError(f"could not write heatmap {path}")


def load_heatmap_png(path: str | Path, stride: int = STRIDE) -> Heatmap:
    """Inverse of save_heatmap_png up to 8-bit quantization."""
    data = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if data is None:
        raise FileNotFoundError(f"could not read heatmap {path}")
    return Heatmap(data.astype(np.float64) / 255.0, stride)
