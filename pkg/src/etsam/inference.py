"""Detection pipelines: heatmap peaks to prompts, masks, NMS, and layout.

Fully annotated images run the complete cascade (line filtering and NMS,
dependent word-group/paragraph removal, union-find paragraph clustering);
single-level tasks keep only their own channel behind the same filter and
NMS stages.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .annotations import TASK_LINE_ONLY, TASK_MULTI, TASK_WORD_ONLY
from .heatmaps import STRIDE, Heatmap, local_maxima
from .model import GRANULARITIES, EtsamModel, granularity_index

POINT_CAP = 2000  # hard bound on prompts per image
BATCH_SIZE = 100  # prompt rows per decoder call
IOU_FILTER = 0.5  # min predicted IoU for a line/word to enter NMS
NMS_CUTOFF = 0.5  # min decayed score to survive Matrix NMS
NMS_SIGMA = 2.0
CLUSTER_IOU = 0.5  # paragraph-overlap threshold for union-find merging
DEFAULT_POINT_THRESHOLD = 0.6


@dataclass
class Detection:
    """One mask at input resolution with its confidence and origin."""

    mask: np.ndarray  # (S, S) bool
    score: float  # predicted IoU of this granularity, in [0, 1]
    granularity: str
    source_point_index: int
    cluster_id: int | None = None


@dataclass
class DetectionSet:
    detections: dict[str, list[Detection]] = field(default_factory=dict)
    image_id: str = ""
    task_id: int = TASK_MULTI

    def __getitem__(self, granularity: str) -> list[Detection]:
        return self.detections.get(granularity, [])

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.detections.values())


@dataclass
class InferConfig:
    point_threshold: float = DEFAULT_POINT_THRESHOLD
    iou_filter: float = IOU_FILTER
    nms_cutoff: float = NMS_CUTOFF
    nms_sigma: float = NMS_SIGMA
    nms_kernel: str = "gaussian"  # or "linear"
    cluster_iou: float = CLUSTER_IOU
    batch_size: int = BATCH_SIZE
    point_cap: int = POINT_CAP


# ---------------------------------------------------------------------------
# Peak extraction


def extract_peaks(
    heatmap: Heatmap | np.ndarray,
    threshold: float,
    cap: int = POINT_CAP,
    stride: int = STRIDE,
) -> np.ndarray:
    """Strict local maxima above ``threshold`` as (x, y) input pixels.

    A cell survives when it equals its 3x3 neighborhood maximum and strictly
    exceeds the threshold; each equal-valued plateau contributes only its
    lexicographically smallest cell. Past ``cap`` points, only the strongest
    are kept (ties resolved toward smaller cells) and a warning is issued.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"point threshold must lie in (0, 1), got {threshold}")
    grid = heatmap.grid if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if isinstance(heatmap, Heatmap):
        stride = heatmap.stride
    cells = local_maxima(grid, threshold, dedup=True)
    if len(cells) > cap:
        warnings.warn(
            f"{len(cells)} peak candidates exceed the {cap}-point cap; keeping the strongest",
            RuntimeWarning,
            stacklevel=2,
        )
        order = np.argsort(-grid[cells[:, 0], cells[:, 1]], kind="stable")
        cells = cells[np.sort(order[:cap])]
    if len(cells) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    xs = cells[:, 1] * stride + stride // 2
    ys = cells[:, 0] * stride + stride // 2
    return np.stack([xs, ys], axis=1).astype(np.float64)


# ---------------------------------------------------------------------------
# Prompt decoding


def _upsample_binarize(logits: torch.Tensor, size: int, chunk: int = 32) -> np.ndarray:
    """(K, G, G) logits -> (K, size, size) bool via bilinear then sign."""
    out = np.zeros((logits.shape[0], size, size), dtype=bool)
    for start in range(0, logits.shape[0], chunk):
        block = logits[start : start + chunk, None]
        grown = F.interpolate(block, size=(size, size), mode="bilinear", align_corners=False)
        out[start : start + chunk] = (grown[:, 0] > 0).cpu().numpy()
    return out


def run_points(
    model: EtsamModel,
    embedding,
    points: np.ndarray,
    task_id: int,
    batch_size: int = BATCH_SIZE,
) -> list[Detection]:
    """Decode every prompt point into per-granularity detections.

    Each point occupies one prompt row (remaining slots padded), rows are fed
    in batches, and the outputs concatenate in input order, so the batch
    partition never changes the result. Masks that binarize to nothing are
    dropped.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return []
    size = model.config.input_size
    n_slots = model.config.num_point_slots
    detections: list[Detection] = []
    with torch.no_grad():
        for start in range(0, len(points), batch_size):
            chunk = points[start : start + batch_size]
            k = len(chunk)
            coords = np.zeros((k, n_slots, 2), dtype=np.float64)
            validity = np.zeros((k, n_slots), dtype=bool)
            coords[:, 0] = chunk
            validity[:, 0] = True
            tokens = model.encode_points(coords, validity)
            bundle = model.hm_decode(embedding, tokens, task_id)
            for name in GRANULARITIES:
                gi = granularity_index(name)
                masks = _upsample_binarize(bundle.logits_for(name), size)
                scores = bundle.iou_pred[:, gi].cpu().numpy()
                for row in range(k):
                    if not masks[row].any():
                        continue
                    detections.append(
                        Detection(
                            mask=masks[row],
                            score=float(scores[row]),
                            granularity=name,
                            source_point_index=start + row,
                        )
                    )
    return detections


# ---------------------------------------------------------------------------
# Matrix NMS


def mask_iou_matrix(masks: np.ndarray) -> np.ndarray:
    """(N, H, W) bool -> (N, N) pairwise IoU; two empty masks count as 1."""
    n = len(masks)
    flat = masks.reshape(n, -1)
    packed = np.packbits(flat, axis=1)
    areas = flat.sum(axis=1)
    out = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        inter = np.bitwise_count(packed[i][None, :] & packed).sum(axis=1)
        union = areas[i] + areas - inter
        out[i] = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return out


def matrix_nms(
    dets: list[Detection],
    nms_threshold: float = NMS_CUTOFF,
    sigma: float = NMS_SIGMA,
    kernel: str = "gaussian",
) -> list[Detection]:
    """Soft suppression by decayed scores; keeps decayed >= threshold.

    Rank by score, then decay every detection by the most aggressive factor
    any higher-ranked overlap induces. The factor discounts each suppressor
    by how much it was itself overlapped from above, so chains of duplicates
    do not over-punish. Returned detections carry their decayed scores, in
    rank order.
    """
    if kernel not in ("gaussian", "linear"):
        raise ValueError(f"unknown NMS kernel {kernel!r}")
    n = len(dets)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: -dets[i].score)
    scores = np.array([dets[i].score for i in order])
    masks = np.stack([dets[i].mask for i in order])
    iou = mask_iou_matrix(masks)
    compensate = np.zeros(n)
    for m in range(1, n):
        compensate[m] = iou[:m, m].max()
    decayed = scores.copy()
    for m in range(1, n):
        above = iou[:m, m]
        if kernel == "gaussian":
            factors = np.exp(-(above**2 - compensate[:m] ** 2) / sigma)
        else:
            factors = (1.0 - above) / np.maximum(1.0 - compensate[:m], 1e-12)
        decayed[m] = scores[m] * factors.min()
    return [
        replace(dets[order[m]], score=float(decayed[m]))
        for m in range(n)
        if decayed[m] >= nms_threshold
    ]


# ---------------------------------------------------------------------------
# Layout clustering


def cluster_from_iou_matrix(iou: np.ndarray, tau: float = CLUSTER_IOU) -> np.ndarray:
    """Union-find labels: merge i, j whenever iou[i, j] > tau.

    The label of a component is its smallest member index, which makes the
    assignment deterministic and stable under permutation-free input.
    """
    n = iou.shape[0]
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if iou[i, j] > tau:
                ra, rb = find(i), find(j)
                if ra != rb:
                    # smaller index wins the root, keeping labels canonical
                    lo, hi = min(ra, rb), max(ra, rb)
                    parent[hi] = lo
    return np.array([find(i) for i in range(n)], dtype=np.int64)


def layout_cluster(paragraphs: list[Detection], tau: float = CLUSTER_IOU) -> np.ndarray:
    """Cluster paragraph detections by mask overlap; writes cluster_id."""
    if not paragraphs:
        return np.zeros(0, dtype=np.int64)
    iou = mask_iou_matrix(np.stack([d.mask for d in paragraphs]))
    labels = cluster_from_iou_matrix(iou, tau)
    for det, label in zip(paragraphs, labels):
        det.cluster_id = int(label)
    return labels


# ---------------------------------------------------------------------------
# Whole-image pipelines


def _by_granularity(dets: list[Detection]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {name: [] for name in GRANULARITIES}
    for det in dets:
        out[det.granularity].append(det)
    return out


def cascade_task0(dets: list[Detection], config: InferConfig) -> DetectionSet:
    """Line-driven cascade for fully annotated inference.

    Lines pass the predicted-IoU filter and Matrix NMS; word groups and
    paragraphs survive only when their source point still has a surviving
    line. Words are not gated by the line stages. Paragraph clusters form by
    union-find over mask overlap, and lines and word groups inherit the
    cluster of their source point.
    """
    groups = _by_granularity(dets)
    candidates = [d for d in groups["line"] if d.score >= config.iou_filter]
    kept_lines = matrix_nms(candidates, config.nms_cutoff, config.nms_sigma, config.nms_kernel)
    surviving = {d.source_point_index for d in kept_lines}
    word_groups = [d for d in groups["word_group"] if d.source_point_index in surviving]
    paragraphs = [d for d in groups["paragraph"] if d.source_point_index in surviving]
    layout_cluster(paragraphs, config.cluster_iou)
    cluster_of = {d.source_point_index: d.cluster_id for d in paragraphs}
    for det in kept_lines + word_groups:
        det.cluster_id = cluster_of.get(det.source_point_index)
    return DetectionSet(
        {
            "word": groups["word"],
            "word_group": word_groups,
            "line": kept_lines,
            "paragraph": paragraphs,
        }
    )


def single_channel(dets: list[Detection], granularity: str, config: InferConfig) -> DetectionSet:
    """Filter and NMS one granularity; the others are discarded."""
    candidates = [
        d
        for d in dets
        if d.granularity == granularity and d.score >= config.iou_filter
    ]
    kept = matrix_nms(candidates, config.nms_cutoff, config.nms_sigma, config.nms_kernel)
    return DetectionSet({granularity: kept})


def _check_finite(model: EtsamModel) -> None:
    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise RuntimeError(f"model parameter {name} contains non-finite values")


def infer(
    model: EtsamModel,
    image: np.ndarray,
    task_id: int,
    point_threshold: float | None = None,
    config: InferConfig | None = None,
    image_id: str = "",
    return_heatmap: bool = False,
) -> DetectionSet | tuple[DetectionSet, Heatmap]:
    """Full pipeline on one image: peaks, prompt decoding, post-processing."""
    config = config or InferConfig()
    if point_threshold is not None:
        config = replace(config, point_threshold=point_threshold)
    _check_finite(model)
    with torch.no_grad():
        embedding = model.encode_image(image)
        decoded = model.point_decode(embedding, task_id)
        grid = decoded.heatmap.detach().cpu().numpy()
        peaks = extract_peaks(Heatmap(grid), config.point_threshold, cap=config.point_cap)
        dets = run_points(model, embedding, peaks, task_id, config.batch_size)
    if task_id == TASK_MULTI:
        result = cascade_task0(dets, config)
    elif task_id == TASK_WORD_ONLY:
        result = single_channel(dets, "word", config)
    elif task_id == TASK_LINE_ONLY:
        result = single_channel(dets, "line", config)
    else:
        raise ValueError(f"unknown task id {task_id}")
    result.image_id = image_id
    result.task_id = task_id
    if return_heatmap:
        return result, Heatmap(grid)
    return result


# ---------------------------------------------------------------------------
# Serialization


def rle_encode(mask: np.ndarray) -> dict:
    """Column-major run lengths, first run counting background pixels."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.flatten(order="F")
    if flat.size == 0:
        return {"size": [int(h), int(w)], "counts": []}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).astype(int).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": counts}


def rle_decode(obj: dict) -> np.ndarray:
    h, w = (int(v) for v in obj["size"])
    counts = obj["counts"]
    if sum(counts) != h * w:
        raise ValueError("run lengths do not cover the mask")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if run:
            flat[pos : pos + run] = value
            pos += run
        value = not value
    return flat.reshape((h, w), order="F")


def prediction_record(result: DetectionSet) -> dict:
    records = []
    for name in GRANULARITIES:
        for det in result[name]:
            records.append(
                {
                    "granularity": name,
                    "score": det.score,
                    "cluster": det.cluster_id,
                    "mask_rle": rle_encode(det.mask),
                }
            )
    return {"image_id": result.image_id, "task": result.task_id, "detections": records}


def write_predictions(results: list[DetectionSet] | DetectionSet, path: str | Path) -> None:
    if isinstance(results, DetectionSet):
        results = [results]
    payload = [prediction_record(r) for r in results]
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def read_predictions(path: str | Path) -> list[DetectionSet]:
    """Inverse of write_predictions. Source point indices are not stored, so
    every reloaded detection carries -1 there."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for rec in payload:
        dets: dict[str, list[Detection]] = {}
        for entry in rec["detections"]:
            det = Detection(
                mask=rle_decode(entry["mask_rle"]),
                score=float(entry["score"]),
                granularity=entry["granularity"],
                source_point_index=-1,
                cluster_id=entry["cluster"],
            )
            dets.setdefault(entry["granularity"], []).append(det)
        out.append(DetectionSet(dets, image_id=rec["image_id"], task_id=rec["task"]))
    return out
