"""Deterministic synthetic scenes with full word/line/paragraph ground truth.

Scenes are built top-down: paragraph blocks are packed onto the canvas by
rejection sampling against an occupancy map, each block is filled with rows
of word boxes, and ink-like strokes are drawn inside every word box on a
textured background. Line polygons are convex hulls of their word boxes and
paragraph polygons are hulls of their lines, so the containment invariants
hold by construction.

No real fonts: strokes are random short segments, which keeps the local
statistics text-like without any font assets.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .annotations import (
    TASK_LINE_ONLY,
    TASK_WORD_ONLY,
    HierSample,
    LineAnn,
    ParagraphAnn,
    Polygon,
    WordAnn,
    _convex_hull,
)

PLACEMENT_ATTEMPTS = 1000
CANVAS_MARGIN = 4
BLOCK_SEPARATION = 6
CURVE_SAMPLES = 8


def _check_range(name: str, rng_pair: tuple[int, int], minimum: int = 1) -> None:
    lo, hi = rng_pair
    if lo < minimum or hi < lo:
        raise ValueError(f"{name} must satisfy {minimum} <= lo <= hi, got {rng_pair}")


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic scene. All randomness comes from ``seed``."""

    seed: int = 0
    image_size: int = 256
    paragraphs: tuple[int, int] = (1, 3)
    lines_per_paragraph: tuple[int, int] = (1, 3)
    words_per_line: tuple[int, int] = (2, 4)
    word_height: tuple[int, int] = (10, 18)
    curvature: bool = False
    clutter: float = 0.15

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size must be at least 32, got {self.image_size}")
        _check_range("paragraphs", self.paragraphs)
        _check_range("lines_per_paragraph", self.lines_per_paragraph)
        _check_range("words_per_line", self.words_per_line)
        _check_range("word_height", self.word_height, minimum=4)
        if self.clutter < 0:
            raise ValueError(f"clutter must be non-negative, got {self.clutter}")


def _draw(rng: np.random.Generator, pair: tuple[int, int]) -> int:
    return int(rng.integers(pair[0], pair[1] + 1))


@dataclass
class _WordBox:
    x0: float
    y0: float
    width: float
    height: float
    bend: float  # signed vertical sine amplitude, 0 for straight words

    def polygon(self) -> Polygon:
        x1, y1 = self.x0 + self.width, self.y0 + self.height
        if self.bend == 0.0:
            pts = [[self.x0, self.y0], [x1, self.y0], [x1, y1], [self.x0, y1]]
            return Polygon(np.array(pts, dtype=float))
        t = np.linspace(0.0, 1.0, CURVE_SAMPLES)
        dy = self.bend * np.sin(np.pi * t)
        xs = self.x0 + t * self.width
        top = np.stack([xs, self.y0 + dy], axis=1)
        bottom = np.stack([xs, y1 + dy], axis=1)
        return Polygon(np.concatenate([top, bottom[::-1]]))


def _layout_paragraph(rng: np.random.Generator, spec: SceneSpec):
    """Word boxes in block-local coordinates plus the block footprint."""
    pad = 2.0
    n_lines = _draw(rng, spec.lines_per_paragraph)
    rows: list[list[_WordBox]] = []
    y = pad
    width = 0.0
    for _ in range(n_lines):
        h = float(_draw(rng, spec.word_height))
        amp = 0.3 * h if spec.curvature else 0.0
        n_words = _draw(rng, spec.words_per_line)
        gap = 0.35 * h
        x = pad
        row = []
        for _ in range(n_words):
            w = h * float(rng.uniform(1.1, 2.2))
            bend = float(rng.choice([-1.0, 1.0])) * amp if spec.curvature else 0.0
            row.append(_WordBox(x, y + amp, w, h, bend))
            x += w + gap
        width = max(width, x - gap + pad)
        rows.append(row)
        y += h + 2 * amp + 0.45 * h
    height = y - 0.45 * rows[-1][0].height + pad if rows else 2 * pad
    return rows, width, height


def generate(spec: SceneSpec) -> HierSample:
    """Render one scene. Identical specs produce identical samples."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    occupancy = np.zeros((size, size), dtype=bool)
    words: list[WordAnn] = []
    lines: list[LineAnn] = []
    paragraphs: list[ParagraphAnn] = []
    placed_boxes: list[tuple[int, int, list[list[_WordBox]]]] = []

    for _ in range(_draw(rng, spec.paragraphs)):
        rows, bw, bh = _layout_paragraph(rng, spec)
        span_x = size - CANVAS_MARGIN - int(np.ceil(bw))
        span_y = size - CANVAS_MARGIN - int(np.ceil(bh))
        placed = False
        for _ in range(PLACEMENT_ATTEMPTS):
            if span_x <= CANVAS_MARGIN or span_y <= CANVAS_MARGIN:
                break
            x0 = int(rng.integers(CANVAS_MARGIN, span_x + 1))
            y0 = int(rng.integers(CANVAS_MARGIN, span_y + 1))
            ry0 = max(y0 - BLOCK_SEPARATION, 0)
            rx0 = max(x0 - BLOCK_SEPARATION, 0)
            ry1 = min(y0 + int(np.ceil(bh)) + BLOCK_SEPARATION, size)
            rx1 = min(x0 + int(np.ceil(bw)) + BLOCK_SEPARATION, size)
            if occupancy[ry0:ry1, rx0:rx1].any():
                continue
            occupancy[ry0:ry1, rx0:rx1] = True
            placed_boxes.append((x0, y0, rows))
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"paragraph placement failed (up to {PLACEMENT_ATTEMPTS} attempts) for {spec}"
            )

    word_id = line_id = para_id = 0
    for x0, y0, rows in placed_boxes:
        para_lines = []
        line_points = []
        for row in rows:
            row_words = []
            row_points = []
            for box in row:
                shifted = _WordBox(box.x0 + x0, box.y0 + y0, box.width, box.height, box.bend)
                poly = shifted.polygon()
                words.append(WordAnn(id=word_id, polygon=poly))
                row_words.append(word_id)
                row_points.append(poly.points)
                word_id += 1
            hull = _convex_hull(np.concatenate(row_points))
            lines.append(LineAnn(id=line_id, polygon=Polygon(hull), word_ids=row_words))
            para_lines.append(line_id)
            line_points.append(hull)
            line_id += 1
        para_hull = _convex_hull(np.concatenate(line_points))
        paragraphs.append(
            ParagraphAnn(id=para_id, line_ids=para_lines, polygon=Polygon(para_hull))
        )
        para_id += 1

    image = _render(rng, spec, occupancy, words)
    return HierSample(
        image_id=f"synth_{spec.seed:05d}",
        task_id=0,
        words=words,
        lines=lines,
        paragraphs=paragraphs,
        image=image,
    )


def _render(
    rng: np.random.Generator,
    spec: SceneSpec,
    occupancy: np.ndarray,
    words: list[WordAnn],
) -> np.ndarray:
    size = spec.image_size
    coarse = rng.uniform(-1.0, 1.0, (size // 8 + 1, size // 8 + 1)).astype(np.float32)
    texture = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    gray = np.clip(0.62 + 0.05 * texture, 0.0, 1.0)

    n_clutter = int(round(spec.clutter * size / 16.0))
    for _ in range(n_clutter):
        cx = int(rng.integers(0, size))
        cy = int(rng.integers(0, size))
        angle = float(rng.uniform(0, 2 * np.pi))
        length = float(rng.uniform(4, 12))
        ex = int(np.clip(cx + length * np.cos(angle), 0, size - 1))
        ey = int(np.clip(cy + length * np.sin(angle), 0, size - 1))
        span = occupancy[min(cy, ey) : max(cy, ey) + 1, min(cx, ex) : max(cx, ex) + 1]
        if span.any():
            continue  # distractors stay off the text blocks
        cv2.line(gray, (cx, cy), (ex, ey), float(rng.uniform(0.35, 0.5)), 1)

    for word in words:
        _ink_word(rng, gray, word)

    tint = np.array([1.0, 0.985, 0.96], dtype=np.float32)
    image = np.clip(gray[:, :, None] * tint[None, None, :], 0.0, 1.0)
    return image.astype(np.float32)


def _ink_word(rng: np.random.Generator, gray: np.ndarray, word: WordAnn) -> None:
    """Glyph-like ink: a faint plate over the word region, then short
    near-vertical strokes along its spine."""
    pts = word.polygon.points
    plate = np.zeros(gray.shape, dtype=np.uint8)
    cv2.fillPoly(plate, [np.round(pts).astype(np.int32)], 1)
    region = plate.astype(bool)
    gray[region] *= 0.88
    n = len(pts)
    if n == 4:
        top, bottom = pts[:2], pts[3:1:-1]  # left-to-right on both chains
    else:
        k = n // 2
        top, bottom = pts[:k], pts[:k - n - 1:-1]
    x_left, x_right = float(top[0, 0]), float(top[-1, 0])
    width = x_right - x_left
    height = float(np.mean(bottom[:, 1] - top[:, 1]))
    n_strokes = max(2, int(width / max(height * 0.45, 1.0)))
    ink = float(rng.uniform(0.02, 0.15))
    for i in range(n_strokes):
        t = (i + 0.5) / n_strokes
        x = x_left + t * width + float(rng.uniform(-0.5, 0.5))
        y_top = float(np.interp(x, top[:, 0], top[:, 1]))
        y_bot = float(np.interp(x, bottom[:, 0], bottom[:, 1]))
        inset = 0.18 * (y_bot - y_top)
        slant = float(rng.uniform(-1.0, 1.0))
        cv2.line(
            gray,
            (int(round(x + slant)), int(round(y_top + inset))),
            (int(round(x - slant)), int(round(y_bot - inset))),
            ink,
            1,
        )


def degrade(sample: HierSample, mode: str) -> HierSample:
    """Strip annotation levels to emulate single-level training sources.

    ``word_only`` keeps words and drops everything above; ``line_only`` keeps
    line polygons but forgets which words formed them. The image is shared,
    not copied.
    """
    if mode == "word_only":
        return HierSample(
            image_id=sample.image_id,
            task_id=TASK_WORD_ONLY,
            words=list(sample.words),
            lines=[],
            paragraphs=[],
            image=sample.image,
        )
    if mode == "line_only":
        stripped = [
            LineAnn(id=ln.id, polygon=ln.polygon, word_ids=[]) for ln in sample.lines
        ]
        return HierSample(
            image_id=sample.image_id,
            task_id=TASK_LINE_ONLY,
            words=[],
            lines=stripped,
            paragraphs=[],
            image=sample.image,
        )
    raise ValueError(f"unknown degrade mode {mode!r}")
