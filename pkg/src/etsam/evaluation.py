"""Detection quality metrics: precision, recall, F-score, tightness, and
panoptic quality, plus the cluster-level layout evaluation.

Matching is greedy and one-to-one: candidate pairs are visited in order of
decreasing overlap and a pair becomes a true positive when its IoU clears the
threshold and neither side is taken yet. At the standard 0.5 threshold a
prediction can clear the bar with at most one ground-truth region, so the
greedy result coincides with the optimal assignment.

Dataset-level numbers are micro-averaged: raw counts are pooled across
images first and the metrics are computed once from the pooled counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .annotations import HierSample, paragraph_region_mask, rasterize, union_mask
from .inference import DetectionSet
from .model import GRANULARITIES

IOU_MATCH_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Counts and reports


@dataclass
class MetricCounts:
    """Raw matching totals. Floats so that pooled partial credit stays exact."""

    tp: float = 0.0
    fp: float = 0.0
    fn: float = 0.0
    iou_sum: float = 0.0

    def __add__(self, other: "MetricCounts") -> "MetricCounts":
        return MetricCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.iou_sum + other.iou_sum,
        )

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "iou_sum": self.iou_sum}


@dataclass
class MatchResult:
    """One-to-one matching outcome for a single image and granularity.

    ``pairs`` holds (prediction index, ground-truth index, IoU) triples; every
    IoU in it is at or above the matching threshold.
    """

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    fp: int = 0
    fn: int = 0

    @property
    def counts(self) -> MetricCounts:
        return MetricCounts(
            tp=float(len(self.pairs)),
            fp=float(self.fp),
            fn=float(self.fn),
            iou_sum=float(sum(iou for _, _, iou in self.pairs)),
        )


@dataclass
class MetricReport:
    """Final metric values as fractions in [0, 1]."""

    precision: float
    recall: float
    f_score: float
    tightness: float
    pq: float

    def as_percentages(self) -> dict:
        return {
            "precision": 100.0 * self.precision,
            "recall": 100.0 * self.recall,
            "f_score": 100.0 * self.f_score,
            "tightness": 100.0 * self.tightness,
            "pq": 100.0 * self.pq,
        }


# ---------------------------------------------------------------------------
# Matching


def _flatten_bool(masks: Sequence[np.ndarray] | np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    if len(masks) == 0:
        return np.zeros((0, 0), dtype=bool), ()
    stack = np.asarray(masks, dtype=bool)
    shape = stack.shape[1:]
    return stack.reshape(stack.shape[0], -1), shape


def cross_iou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise IoU between two stacks of binary masks, shape (P, G).

    Masks are bit-packed so the working set stays small even for full
    resolution grids. Two empty masks count as identical (IoU 1).
    """
    flat_p, shape_p = _flatten_bool(preds)
    flat_g, shape_g = _flatten_bool(gts)
    if len(flat_p) and len(flat_g) and shape_p != shape_g:
        raise ValueError(f"mask grids differ: {shape_p} vs {shape_g}")
    out = np.zeros((len(flat_p), len(flat_g)))
    if not len(flat_p) or not len(flat_g):
        return out
    packed_p = np.packbits(flat_p, axis=1)
    packed_g = np.packbits(flat_g, axis=1)
    area_p = flat_p.sum(axis=1)
    area_g = flat_g.sum(axis=1)
    for i in range(len(flat_p)):
        inter = np.bitwise_count(packed_p[i][None, :] & packed_g).sum(axis=1)
        union = area_p[i] + area_g - inter
        out[i] = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return out


def match(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    iou_thresh: float = IOU_MATCH_THRESHOLD,
) -> MatchResult:
    """Greedy unique matching by descending IoU."""
    iou = cross_iou(preds, gts)
    # stable sort on the negation keeps ties in (pred, gt) index order
    order = np.argsort(-iou, axis=None, kind="stable")
    pred_free = np.ones(iou.shape[0], dtype=bool)
    gt_free = np.ones(iou.shape[1], dtype=bool)
    pairs: list[tuple[int, int, float]] = []
    for flat in order:
        p, g = np.unravel_index(flat, iou.shape)
        if iou[p, g] < iou_thresh:
            break
        if pred_free[p] and gt_free[g]:
            pred_free[p] = False
            gt_free[g] = False
            pairs.append((int(p), int(g), float(iou[p, g])))
    return MatchResult(pairs=pairs, fp=int(pred_free.sum()), fn=int(gt_free.sum()))


def compute_metrics(source: MatchResult | MetricCounts) -> MetricReport:
    """Turn matching totals into the five headline numbers.

    Nothing predicted and nothing annotated is perfect agreement: all five
    come out as 1. With no true positives but something on either side,
    everything is 0.
    """
    counts = source.counts if isinstance(source, MatchResult) else source
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == 0 and fp == 0 and fn == 0:
        return MetricReport(1.0, 1.0, 1.0, 1.0, 1.0)
    if tp == 0:
        return MetricReport(0.0, 0.0, 0.0, 0.0, 0.0)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    f_score = 2.0 * tp / (2.0 * tp + fp + fn)
    tightness = counts.iou_sum / tp
    pq = counts.iou_sum / (tp + 0.5 * fp + 0.5 * fn)
    return MetricReport(precision, recall, f_score, tightness, pq)


# ---------------------------------------------------------------------------
# Ground-truth entities


def gt_entity_masks(sample: HierSample, granularity: str, size: int) -> list[np.ndarray]:
    """Binary masks for the annotated regions of one granularity on a
    (size, size) pixel grid in the sample's own coordinate frame."""
    shape = (size, size)
    if granularity == "word":
        return [rasterize(w.polygon, shape) for w in sample.words]
    if granularity == "word_group":
        by_id = {w.id: w for w in sample.words}
        out = []
        for line in sample.lines:
            polys = [by_id[wid].polygon for wid in line.word_ids if wid in by_id]
            if polys:
                out.append(union_mask(polys, shape))
        return out
    if granularity == "line":
        return [rasterize(ln.polygon, shape) for ln in sample.lines]
    if granularity == "paragraph":
        return [paragraph_region_mask(sample, p, shape) for p in sample.paragraphs]
    raise ValueError(f"unknown granularity {granularity!r}")


def _grid_size(pred: DetectionSet, gt: HierSample, size: int | None) -> int:
    if size is not None:
        return size
    for dets in pred.detections.values():
        for det in dets:
            return det.mask.shape[0]
    if gt.image is not None:
        return gt.image.shape[0]
    raise ValueError("grid size is needed when there are no detections and no image")


def evaluate_image(
    pred: DetectionSet, gt: HierSample, granularity: str, size: int | None = None
) -> MetricCounts:
    """Match one image's detections of one granularity against its annotations."""
    size = _grid_size(pred, gt, size)
    pred_masks = [d.mask for d in pred[granularity]]
    return match(pred_masks, gt_entity_masks(gt, granularity, size)).counts


# ---------------------------------------------------------------------------
# Layout analysis


def cluster_union_masks(pred: DetectionSet) -> list[np.ndarray]:
    """Union mask per predicted layout cluster, built from word-group
    detections. Detections without a cluster id each form their own entity."""
    groups: dict[object, np.ndarray] = {}
    fallback = 0
    for det in pred["word_group"]:
        key: object
        if det.cluster_id is None:
            key = ("solo", fallback)
            fallback += 1
        else:
            key = ("cluster", det.cluster_id)
        if key in groups:
            groups[key] = groups[key] | det.mask
        else:
            groups[key] = det.mask.copy()
    return [groups[k] for k in sorted(groups, key=str)]


def layout_counts(pred: DetectionSet, gt: HierSample, size: int | None = None) -> MetricCounts:
    size = _grid_size(pred, gt, size)
    gt_masks = gt_entity_masks(gt, "paragraph", size)
    return match(cluster_union_masks(pred), gt_masks).counts


def eval_layout(pred: DetectionSet, gt: HierSample, size: int | None = None) -> MetricReport:
    """Layout-analysis score: predicted cluster unions against annotated
    paragraph regions, same matching pipeline as the other granularities."""
    return compute_metrics(layout_counts(pred, gt, size))


# ---------------------------------------------------------------------------
# Dataset-level aggregation


def evaluate_dataset(
    pairs: Iterable[tuple[DetectionSet, HierSample]],
    granularities: Sequence[str] = ("word", "line"),
    layout: bool = True,
    size: int | None = None,
) -> dict:
    """Micro-averaged report over (prediction, ground truth) pairs.

    Returns a dict with one entry per evaluated channel holding percentages
    plus the pooled counts, and a per-image breakdown.
    """
    for g in granularities:
        if g not in GRANULARITIES:
            raise ValueError(f"unknown granularity {g!r}")
    channels = list(granularities) + (["layout"] if layout else [])
    totals = {c: MetricCounts() for c in channels}
    per_image = []
    for pred, gt in pairs:
        row: dict = {"image_id": gt.image_id}
        for g in granularities:
            counts = evaluate_image(pred, gt, g, size)
            totals[g] = totals[g] + counts
            row[g] = counts.to_dict()
        if layout:
            counts = layout_counts(pred, gt, size)
            totals["layout"] = totals["layout"] + counts
            row["layout"] = counts.to_dict()
        per_image.append(row)
    report: dict = {}
    for channel in channels:
        metrics = compute_metrics(totals[channel])
        report[channel] = metrics.as_percentages()
        report[channel]["counts"] = totals[channel].to_dict()
    report["per_image"] = per_image
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
