"""Annotation types and polygon geometry for hierarchical text datasets.

A dataset sample nests word polygons inside text-lines inside paragraphs.
This module owns the JSON schema for such samples, plus the geometric
primitives everything downstream leans on: polygon rasterization onto cell
grids, minimum-area oriented bounding rectangles, and center-line sampling
with local width estimates.

Coordinates are pixel units with x to the right and y downward. Cell grids
index as (row, col); a cell (r, c) covers the half-open pixel square
[c, c+1) x [r, r+1) and has its center at (c + 0.5, r + 0.5).
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

TASK_MULTI = 0
TASK_WORD_ONLY = 1
TASK_LINE_ONLY = 2


class ParseError(ValueError):
    """Raised when an annotation file is malformed or internally inconsistent."""


@dataclass
class Polygon:
    """Simple polygon, vertices ordered along the boundary (either winding)."""

    points: np.ndarray  # (N, 2) float64, N >= 3

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError(f"polygon needs (N>=3, 2) vertices, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polygon vertices must be finite")
        self.points = pts

    @property
    def signed_area(self) -> float:
        x, y = self.points[:, 0], self.points[:, 1]
        return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    @property
    def centroid(self) -> np.ndarray:
        """Area centroid; vertex mean when the ring is degenerate."""
        x, y = self.points[:, 0], self.points[:, 1]
        cross = x * np.roll(y, -1) - np.roll(x, -1) * y
        a = cross.sum() / 2.0
        if abs(a) < 1e-12:
            return self.points.mean(axis=0)
        cx = float(((x + np.roll(x, -1)) * cross).sum() / (6.0 * a))
        cy = float(((y + np.roll(y, -1)) * cross).sum() / (6.0 * a))
        return np.array([cx, cy])

    def bounds(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max)."""
        mn = self.points.min(axis=0)
        mx = self.points.max(axis=0)
        return float(mn[0]), float(mn[1]), float(mx[0]), float(mx[1])

    def contains_points(self, queries: np.ndarray) -> np.ndarray:
        """Even-odd membership test for an (M, 2) array of query points.

        Points exactly on the boundary resolve deterministically: for
        axis-aligned boxes the minimum-x and minimum-y edges are inclusive,
        the maximum edges exclusive, so abutting boxes tile without overlap
        (in image coordinates that is left/top inclusive).
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        px, py = q[:, 0], q[:, 1]
        inside = np.zeros(len(q), dtype=bool)
        pts = self.points
        n = len(pts)
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            crosses = (y1 > py) != (y2 > py)
            if not crosses.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < x_int)
        return inside

    def transformed(self, matrix: np.ndarray) -> "Polygon":
        """Apply a 2x3 affine matrix to every vertex."""
        m = np.asarray(matrix, dtype=np.float64)
        pts = self.points @ m[:, :2].T + m[:, 2]
        return Polygon(pts)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Polygon) and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class OrientedRect:
    """Minimum-area bounding rectangle with width >= height.

    ``angle`` is the rotation of the width axis from the +x axis, in radians,
    normalized to [-pi/2, pi/2).
    """

    center: tuple[float, float]
    width: float
    height: float
    angle: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = np.array([c, s]) * (self.width / 2.0)
        v = np.array([-s, c]) * (self.height / 2.0)
        ctr = np.asarray(self.center)
        return np.stack([ctr - u - v, ctr + u - v, ctr + u + v, ctr - u + v])


@dataclass
class WordAnn:
    id: int
    polygon: Polygon


@dataclass
class LineAnn:
    id: int
    polygon: Polygon
    word_ids: list[int] = field(default_factory=list)


@dataclass
class ParagraphAnn:
    id: int
    line_ids: list[int] = field(default_factory=list)
    polygon: Polygon | None = None  # None: region is the union of member lines


@dataclass
class HierSample:
    """One annotated image with whatever annotation levels the source provides.

    ``task_id`` encodes which levels are present: 0 all three, 1 words only,
    2 text-lines only.
    """

    image_id: str
    task_id: int
    words: list[WordAnn] = field(default_factory=list)
    lines: list[LineAnn] = field(default_factory=list)
    paragraphs: list[ParagraphAnn] = field(default_factory=list)
    image: np.ndarray | None = None  # (H, W, 3) float32 in [0, 1]

    def word_by_id(self, word_id: int) -> WordAnn:
        for w in self.words:
            if w.id == word_id:
                return w
        raise KeyError(f"no word with id {word_id}")

    def line_of_word(self) -> dict[int, int]:
        """word id -> id of the line containing it."""
        out: dict[int, int] = {}
        for line in self.lines:
            for wid in line.word_ids:
                out[wid] = line.id
        return out

    def paragraph_of_line(self) -> dict[int, int]:
        """line id -> id of the paragraph containing it."""
        out: dict[int, int] = {}
        for para in self.paragraphs:
            for lid in para.line_ids:
                out[lid] = para.id
        return out

    def group_words(self, line_id: int) -> list[WordAnn]:
        """Words forming the word group of a line (all words on that line)."""
        line = next(ln for ln in self.lines if ln.id == line_id)
        by_id = {w.id: w for w in self.words}
        return [by_id[wid] for wid in line.word_ids]


# ---------------------------------------------------------------------------
# Rasterization


def rasterize(polygon: Polygon, grid_shape: tuple[int, int], scale: float = 1.0) -> np.ndarray:
    """Binary occupancy of a scaled polygon on a cell grid.

    Cell (r, c) is set iff its center (c + 0.5, r + 0.5) lies inside the
    polygon after multiplying every coordinate by ``scale``. Boundary ties
    resolve left/top inclusive (see Polygon.contains_points), so translates
    of the same polygon tile cleanly.

    A polygon that is degenerate after scaling yields an all-zero mask and a
    RuntimeWarning rather than an error.
    """
    h, w = grid_shape
    mask = np.zeros((h, w), dtype=bool)
    scaled = Polygon(polygon.points * scale) if scale != 1.0 else polygon
    if scaled.area < 1e-12:
        warnings.warn("degenerate polygon rasterizes to an empty mask", RuntimeWarning, stacklevel=2)
        return mask
    x0, y0, x1, y1 = scaled.bounds()
    c0 = max(int(math.floor(x0 - 0.5)), 0)
    c1 = min(int(math.ceil(x1 + 0.5)), w - 1)
    r0 = max(int(math.floor(y0 - 0.5)), 0)
    r1 = min(int(math.ceil(y1 + 0.5)), h - 1)
    if c0 > c1 or r0 > r1:
        return mask
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    cx, cy = np.meshgrid(cols + 0.5, rows + 0.5)
    queries = np.stack([cx.ravel(), cy.ravel()], axis=1)
    inside = scaled.contains_points(queries).reshape(len(rows), len(cols))
    mask[r0 : r1 + 1, c0 : c1 + 1] = inside
    return mask


def union_mask(polygons: list[Polygon], grid_shape: tuple[int, int], scale: float = 1.0) -> np.ndarray:
    """Union of several rasterized polygons on one grid."""
    out = np.zeros(grid_shape, dtype=bool)
    for poly in polygons:
        out |= rasterize(poly, grid_shape, scale)
    return out


def paragraph_region_mask(
    sample: HierSample, para: ParagraphAnn, grid_shape: tuple[int, int], scale: float = 1.0
) -> np.ndarray:
    """Rasterized paragraph region: its own polygon, else union of its lines."""
    if para.polygon is not None:
        return rasterize(para.polygon, grid_shape, scale)
    lines = {ln.id: ln for ln in sample.lines}
    polys = [lines[lid].polygon for lid in para.line_ids if lid in lines]
    return union_mask(polys, grid_shape, scale)


# ---------------------------------------------------------------------------
# Oriented rectangles


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices counter-clockwise.

    Collinear inputs collapse to a 2-point "hull" instead of raising, which
    min_bounding_rect handles explicitly.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_bounding_rect(polygon: Polygon) -> OrientedRect:
    """Minimum-area oriented bounding rectangle of a polygon.

    Sweeps the convex hull edges (one of which the optimal rectangle must be
    flush with), picks the smallest-area orientation, and normalizes so that
    width >= height and the angle lies in [-pi/2, pi/2). Collinear input
    degenerates to a 1-pixel-high rectangle along the point spread, with a
    RuntimeWarning.
    """
    hull = _convex_hull(polygon.points)
    if len(hull) < 3 or Polygon(hull).area < 1e-12:
        warnings.warn("collinear polygon; bounding rectangle height clamped to 1", RuntimeWarning, stacklevel=2)
        pts = np.unique(polygon.points, axis=0)
        if len(pts) == 1:
            return OrientedRect((float(pts[0, 0]), float(pts[0, 1])), 1.0, 1.0, 0.0)
        # Direction of maximum spread for the collinear set.
        idx = np.argmax(np.linalg.norm(pts - pts[0], axis=1))
        d = pts[idx] - pts[0]
        angle = math.atan2(d[1], d[0])
        u = np.array([math.cos(angle), math.sin(angle)])
        proj = (pts - pts[0]) @ u
        width = float(proj.max() - proj.min())
        mid = pts[0] + u * (proj.max() + proj.min()) / 2.0
        return _normalized_rect((float(mid[0]), float(mid[1])), max(width, 1.0), 1.0, angle)

    best = None
    for i in range(len(hull)):
        edge = hull[(i + 1) % len(hull)] - hull[i]
        angle = math.atan2(edge[1], edge[0])
        c, s = math.cos(-angle), math.sin(-angle)
        rot = hull @ np.array([[c, -s], [s, c]]).T
        mn = rot.min(axis=0)
        mx = rot.max(axis=0)
        ext = mx - mn
        area = float(ext[0] * ext[1])
        if best is None or area < best[0] - 1e-12:
            mid_rot = (mn + mx) / 2.0
            inv = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
            center = inv @ mid_rot
            best = (area, center, float(ext[0]), float(ext[1]), angle)
    _, center, ext_x, ext_y, angle = best
    if ext_x >= ext_y:
        return _normalized_rect((float(center[0]), float(center[1])), ext_x, ext_y, angle)
    return _normalized_rect((float(center[0]), float(center[1])), ext_y, ext_x, angle + math.pi / 2.0)


def _normalized_rect(center: tuple[float, float], width: float, height: float, angle: float) -> OrientedRect:
    a = math.fmod(angle + math.pi / 2.0, math.pi)
    if a < 0:
        a += math.pi
    a -= math.pi / 2.0
    return OrientedRect(center, width, height, a)


# ---------------------------------------------------------------------------
# Center lines


def center_line(polygon: Polygon, spacing: float) -> np.ndarray:
    """Sample the center path of a word or line polygon.

    Returns an (M, 3) float array of (x, y, local_width). The path derives
    from boundary-point pairing: a 4-vertex quad joins the midpoints of its
    two short edges; a 2k-vertex contour (k >= 3) pairs vertex i with vertex
    2k-1-i, the usual top-chain / reversed-bottom-chain layout of curved-text
    datasets. local_width is the distance between the paired boundary points,
    linearly interpolated along the densified path. Polygons matching neither
    convention fall back to the midline of their minimum-area bounding
    rectangle with that rectangle's height as the width estimate.

    Consecutive samples are at most ``spacing`` apart; pair midpoints are
    always retained exactly. Every sample is clamped into the polygon, so for
    convex polygons all returned points are interior. A degenerate polygon
    yields its centroid with width 1.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = polygon.points
    n = len(pts)
    if polygon.area < 1e-12:
        c = polygon.centroid
        return np.array([[c[0], c[1], 1.0]])

    if n == 4:
        mids, widths = _quad_pairing(pts)
    elif n >= 6 and n % 2 == 0:
        k = n // 2
        top = pts[:k]
        bottom = pts[n - 1 : k - 1 : -1]  # vertex 2k-1-i for i = 0..k-1
        mids = (top + bottom) / 2.0
        widths = np.linalg.norm(top - bottom, axis=1)
    else:
        rect = min_bounding_rect(polygon)
        u = np.array([math.cos(rect.angle), math.sin(rect.angle)])
        ctr = np.asarray(rect.center)
        mids = np.stack([ctr - u * rect.width / 2.0, ctr + u * rect.width / 2.0])
        widths = np.array([rect.height, rect.height])

    path = _densify(mids, widths, spacing)
    path[:, :2] = _clamp_into(polygon, path[:, :2])
    return path


def _quad_pairing(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pair quad corners across the long direction (short edges joined)."""
    # Candidate A pairs (v0,v3),(v1,v2); candidate B pairs (v0,v1),(v3,v2).
    mids_a = np.stack([(pts[0] + pts[3]) / 2.0, (pts[1] + pts[2]) / 2.0])
    mids_b = np.stack([(pts[0] + pts[1]) / 2.0, (pts[3] + pts[2]) / 2.0])
    len_a = np.linalg.norm(mids_a[1] - mids_a[0])
    len_b = np.linalg.norm(mids_b[1] - mids_b[0])
    if len_a >= len_b:
        widths = np.array([np.linalg.norm(pts[0] - pts[3]), np.linalg.norm(pts[1] - pts[2])])
        return mids_a, widths
    widths = np.array([np.linalg.norm(pts[0] - pts[1]), np.linalg.norm(pts[3] - pts[2])])
    return mids_b, widths


def _densify(mids: np.ndarray, widths: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a widths-carrying polyline so neighbors are <= spacing apart."""
    out_xy: list[np.ndarray] = [mids[0]]
    out_w: list[float] = [float(widths[0])]
    for i in range(len(mids) - 1):
        a, b = mids[i], mids[i + 1]
        wa, wb = float(widths[i]), float(widths[i + 1])
        seg = float(np.linalg.norm(b - a))
        steps = max(1, int(math.ceil(seg / spacing - 1e-9)))
        for j in range(1, steps + 1):
            t = j / steps
            out_xy.append(a + (b - a) * t)
            out_w.append(wa + (wb - wa) * t)
    xy = np.array(out_xy)
    w = np.array(out_w)
    # Zero-length segments duplicate points; keep the first of each run.
    keep = np.ones(len(xy), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(xy, axis=0), axis=1) > 1e-12
    return np.column_stack([xy[keep], w[keep]])


def _clamp_into(polygon: Polygon, points: np.ndarray) -> np.ndarray:
    """Replace points outside the polygon with their nearest boundary point."""
    inside = polygon.contains_points(points)
    if inside.all():
        return points
    out = points.copy()
    verts = polygon.points
    n = len(verts)
    for idx in np.nonzero(~inside)[0]:
        p = points[idx]
        best_d, best_q = math.inf, p
        for i in range(n):
            a, b = verts[i], verts[(i + 1) % n]
            ab = b - a
            denom = float(ab @ ab)
            t = 0.0 if denom < 1e-18 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
            q = a + t * ab
            d = float(np.linalg.norm(p - q))
            if d < best_d:
                best_d, best_q = d, q
        out[idx] = best_q
    return out


# ---------------------------------------------------------------------------
# JSON schema


def parse_hiertext_json(path: str | Path, image_root: str | Path | None = None) -> list[HierSample]:
    """Load annotation samples from a JSON file.

    Expected layout::

        {"annotations": [
            {"image_id": "img_000",
             "paragraphs": [{"vertices": [[x, y], ...]?,        # optional region
                             "lines": [{"vertices": [...],
                                        "words": [{"vertices": [...]}, ...]},
                                       ...]},
                            ...]},
            ...]}

    Word-only files carry a top-level ``"words"`` list per record and
    line-only files a top-level ``"lines"`` list instead of ``"paragraphs"``.
    A flat variant is also accepted where top-level words carry ``"id"`` and
    lines reference them through ``"word_ids"``; dangling references raise.
    The task id is inferred from which levels are present.

    When ``image_root`` is given, ``<image_root>/<image_id>.png`` is loaded
    into ``HierSample.image`` as float32 RGB in [0, 1].
    """
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict) or "annotations" not in data:
        raise ParseError(f"{path}: missing top-level 'annotations' key")

    samples = []
    for rec_idx, rec in enumerate(data["annotations"]):
        try:
            samples.append(_parse_record(rec))
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: record {rec_idx}: {exc}") from exc

    if image_root is not None:
        root = Path(image_root)
        for sample in samples:
            img_path = root / f"{sample.image_id}.png"
            if not img_path.exists():
                raise FileNotFoundError(f"image for '{sample.image_id}' not found at {img_path}")
            sample.image = load_image(img_path)
    return samples


def _parse_polygon(obj: dict, context: str) -> Polygon:
    verts = obj.get("vertices")
    if not verts:
        raise ParseError(f"{context}: empty or missing 'vertices'")
    if len(verts) < 3:
        raise ParseError(f"{context}: polygon needs at least 3 vertices, got {len(verts)}")
    return Polygon(np.asarray(verts, dtype=np.float64))


def _parse_record(rec: dict) -> HierSample:
    image_id = rec.get("image_id")
    if not isinstance(image_id, str) or not image_id:
        raise ParseError("record is missing 'image_id'")
    words: list[WordAnn] = []
    lines: list[LineAnn] = []
    paragraphs: list[ParagraphAnn] = []
    next_word = 0
    next_line = 0

    def add_word(obj: dict, context: str) -> int:
        nonlocal next_word
        wid = obj.get("id", next_word)
        words.append(WordAnn(int(wid), _parse_polygon(obj, context)))
        next_word = max(next_word, int(wid) + 1)
        return int(wid)

    def add_line(obj: dict, context: str) -> LineAnn:
        nonlocal next_line
        lid = obj.get("id", next_line)
        line = LineAnn(int(lid), _parse_polygon(obj, context))
        next_line = max(next_line, int(lid) + 1)
        if "words" in obj:
            for w_idx, wobj in enumerate(obj["words"]):
                line.word_ids.append(add_word(wobj, f"{context} word {w_idx}"))
        if "word_ids" in obj:
            line.word_ids.extend(int(w) for w in obj["word_ids"])
        lines.append(line)
        return line

    ctx = f"image '{image_id}'"
    for w_idx, wobj in enumerate(rec.get("words", [])):
        add_word(wobj, f"{ctx} word {w_idx}")
    for p_idx, pobj in enumerate(rec.get("paragraphs", [])):
        para = ParagraphAnn(id=p_idx)
        if pobj.get("vertices"):
            para.polygon = _parse_polygon(pobj, f"{ctx} paragraph {p_idx}")
        for l_idx, lobj in enumerate(pobj.get("lines", [])):
            line = add_line(lobj, f"{ctx} paragraph {p_idx} line {l_idx}")
            para.line_ids.append(line.id)
        paragraphs.append(para)
    for l_idx, lobj in enumerate(rec.get("lines", [])):
        add_line(lobj, f"{ctx} line {l_idx}")

    known = {w.id for w in words}
    for line in lines:
        for wid in line.word_ids:
            if wid not in known:
                raise ParseError(f"{ctx}: line {line.id} references unknown word id {wid}")

    if paragraphs:
        task = TASK_MULTI
    elif words and not lines:
        task = TASK_WORD_ONLY
    elif lines and not words:
        task = TASK_LINE_ONLY
    elif lines and words:
        task = TASK_MULTI  # two levels without paragraphs: treat as multi-level
    else:
        raise ParseError(f"{ctx}: no annotation levels present")
    return HierSample(image_id=image_id, task_id=task, words=words, lines=lines, paragraphs=paragraphs)


def write_hiertext_json(samples: list[HierSample], path: str | Path) -> None:
    """Serialize samples back to the JSON layout parse_hiertext_json reads."""
    records = []
    for s in samples:
        rec: dict = {"image_id": s.image_id}
        if s.paragraphs:
            lines_by_id = {ln.id: ln for ln in s.lines}
            words_by_id = {w.id: w for w in s.words}
            paras = []
            for para in s.paragraphs:
                pobj: dict = {}
                if para.polygon is not None:
                    pobj["vertices"] = para.polygon.points.tolist()
                pobj["lines"] = [
                    {
                        "vertices": lines_by_id[lid].polygon.points.tolist(),
                        "words": [
                            {"vertices": words_by_id[wid].polygon.points.tolist()}
                            for wid in lines_by_id[lid].word_ids
                        ],
                    }
                    for lid in para.line_ids
                ]
                paras.append(pobj)
            rec["paragraphs"] = paras
        else:
            if s.words:
                rec["words"] = [{"vertices": w.polygon.points.tolist()} for w in s.words]
            if s.lines:
                rec["lines"] = [{"vertices": ln.polygon.points.tolist()} for ln in s.lines]
        records.append(rec)
    with open(path, "w") as fh:
        json.dump({"annotations": records}, fh)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG into float32 RGB in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"could not read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a float RGB image in [0, 1] as PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    bgr = cv2.cvtColor((arr * 255.0).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise IOError(f"could not write image {path}")
