"""Joint training over mixed annotation levels.

Builds the unified sample pool, composes one-per-category batches, samples
prompt points from target heatmaps, computes the weighted multi-part loss,
and runs the optimization loop. Images whose annotations lack some levels
only supervise the granularities they carry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .annotations import (
    TASK_LINE_ONLY,
    TASK_MULTI,
    TASK_WORD_ONLY,
    HierSample,
    LineAnn,
    ParagraphAnn,
    Polygon,
    WordAnn,
    paragraph_region_mask,
    rasterize,
    union_mask,
)
from .heatmaps import (
    STRIDE,
    Heatmap,
    centerline_heatmap,
    centerpoint_heatmap,
    local_maxima,
    refine_pseudo_heatmap,
)
from .model import EtsamModel, ModelConfig, granularity_index, save_checkpoint

MAX_INSTANCES = 10  # prompted instances per image
MAX_POINTS_PER_INSTANCE = 2
MAX_PROMPT_POINTS = MAX_INSTANCES * MAX_POINTS_PER_INSTANCE

POINT_LOSS_WEIGHT = 50.0
PARAGRAPH_LOSS_WEIGHT = 0.5
DICE_SMOOTH = 1.0

PEAK_CANDIDATE_MIN = 0.5  # heatmap floor for prompt-point candidates


# ---------------------------------------------------------------------------
# Pool and schedule


@dataclass
class DataPool:
    """Three per-category sample lists sharing one epoch clock.

    ``epoch_length`` follows the largest list; shorter lists repeat
    cyclically inside an epoch so every batch can draw one sample per
    non-empty category.
    """

    multi_set: list[HierSample]
    word_set: list[HierSample]
    line_set: list[HierSample]
    seed: int = 0

    @property
    def epoch_length(self) -> int:
        return max(len(self.multi_set), len(self.word_set), len(self.line_set))


@dataclass
class TrainBatch:
    index: int
    samples: dict[int, HierSample]  # task id -> sample; empty categories absent


def build_pool(
    multi: Sequence[HierSample],
    word: Sequence[HierSample],
    line: Sequence[HierSample],
    seed: int = 0,
    allow_partial: bool = False,
) -> DataPool:
    """Shuffle each category once and bind them into a pool.

    Without ``allow_partial`` every category must be non-empty; with it, any
    subset may be empty as long as at least one sample exists anywhere
    (batches then simply omit the missing categories).
    """
    sets = [list(multi), list(word), list(line)]
    if all(len(s) == 0 for s in sets):
        raise ValueError("cannot build a pool from three empty sample sets")
    if not allow_partial and any(len(s) == 0 for s in sets):
        raise ValueError("empty category; pass allow_partial=True to train without it")
    rng = np.random.default_rng(seed)
    for s in sets:
        rng.shuffle(s)
    return DataPool(multi_set=sets[0], word_set=sets[1], line_set=sets[2], seed=seed)


def epoch_schedule(pool: DataPool, epoch: int) -> list[TrainBatch]:
    """Batches for one epoch: a fresh per-category permutation, then batch i
    takes element ``i mod n`` of each non-empty category."""
    rng = np.random.default_rng(pool.seed + epoch)
    shuffled: dict[int, list[HierSample]] = {}
    for task, samples in (
        (TASK_MULTI, pool.multi_set),
        (TASK_WORD_ONLY, pool.word_set),
        (TASK_LINE_ONLY, pool.line_set),
    ):
        if samples:
            order = rng.permutation(len(samples))
            shuffled[task] = [samples[j] for j in order]
    batches = []
    for i in range(pool.epoch_length):
        picks = {task: lst[i % len(lst)] for task, lst in shuffled.items()}
        batches.append(TrainBatch(index=i, samples=picks))
    return batches


# ---------------------------------------------------------------------------
# Prompt-point sampling


@dataclass
class PromptSet:
    """Prompt rows for one image plus their supervision targets.

    ``coords`` holds (x, y) input-pixel points with zero-filled padding
    slots; ``gt_masks`` maps granularity name to a (K, G, G) bool stack on
    that granularity's native grid. Only supervised granularities appear.
    """

    coords: np.ndarray  # (K, N_p, 2) float64
    validity: np.ndarray  # (K, N_p) bool
    gt_masks: dict[str, np.ndarray]
    instance_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.coords.shape[0]


def _empty_prompts(n_slots: int) -> PromptSet:
    return PromptSet(
        coords=np.zeros((0, n_slots, 2), dtype=np.float64),
        validity=np.zeros((0, n_slots), dtype=bool),
        gt_masks={},
    )


def _candidate_cells(heatmap: Heatmap | np.ndarray, peak_min: float) -> np.ndarray:
    grid = heatmap.grid if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    return local_maxima(grid, peak_min, dedup=False)


def _cell_to_pixel(cell: np.ndarray, stride: int = STRIDE) -> tuple[float, float]:
    r, c = int(cell[0]), int(cell[1])
    return (c * stride + stride // 2, r * stride + stride // 2)


def _instance_points(
    polygon: Polygon,
    cells: np.ndarray,
    coarse_mask: np.ndarray,
    rng: np.random.Generator,
    input_size: int,
) -> list[tuple[float, float]]:
    """Up to two candidate cells inside the mask, else one in-region point.

    Cell centers map to input pixels at the heatmap stride, so membership on
    the coarse grid is exactly membership of the mapped pixel. The fallback
    is the polygon centroid when it lies inside both polygon and canvas,
    otherwise the mask cell nearest the centroid. A region that rasterizes
    to nothing yields no points and the caller drops the instance.
    """
    if len(cells) > 0:
        inside = coarse_mask[cells[:, 0], cells[:, 1]]
        hits = cells[inside]
        if len(hits) > 0:
            take = rng.choice(len(hits), size=min(MAX_POINTS_PER_INSTANCE, len(hits)), replace=False)
            return [_cell_to_pixel(hits[i]) for i in np.sort(take)]
    cx, cy = polygon.centroid
    if 0.0 <= cx < input_size and 0.0 <= cy < input_size:
        if bool(polygon.contains_points(np.array([[cx, cy]]))[0]):
            return [(float(cx), float(cy))]
    occupied = np.argwhere(coarse_mask)
    if len(occupied) == 0:
        return []
    centers = occupied[:, ::-1] * STRIDE + STRIDE // 2  # (x, y) per cell
    nearest = int(np.argmin(((centers - np.array([cx, cy])) ** 2).sum(axis=1)))
    return [(float(centers[nearest, 0]), float(centers[nearest, 1]))]


def sample_prompts(
    sample: HierSample,
    heatmap: Heatmap | np.ndarray,
    rng: np.random.Generator,
    config: ModelConfig,
    peak_min: float = PEAK_CANDIDATE_MIN,
) -> PromptSet:
    """Draw prompt points and per-granularity target masks for one image.

    Instances come from up to ``MAX_INSTANCES`` text-lines (one word per
    line's word group) on fully annotated images, or that many words / lines
    directly on single-level ones. Each instance contributes at most
    ``MAX_POINTS_PER_INSTANCE`` heatmap local maxima that fall inside the
    instance region, so the total never exceeds ``MAX_PROMPT_POINTS``.
    """
    n_slots = config.num_point_slots
    size = config.input_size
    q = config.heatmap_grid
    r = config.highres_grid
    cells = _candidate_cells(heatmap, peak_min)

    rows: list[list[tuple[float, float]]] = []
    ids: list[int] = []
    masks: dict[str, list[np.ndarray]] = {}

    def push(points, instance_id, gt: dict[str, np.ndarray]) -> None:
        rows.append(points)
        ids.append(instance_id)
        for name, m in gt.items():
            masks.setdefault(name, []).append(m)

    if sample.task_id == TASK_MULTI:
        para_of_line = sample.paragraph_of_line()
        paras = {p.id: p for p in sample.paragraphs}
        eligible = [ln for ln in sample.lines if ln.word_ids]
        chosen = _choose(eligible, rng)
        for line in chosen:
            group = sample.group_words(line.id)
            word = group[int(rng.integers(len(group)))]
            word_mask = rasterize(word.polygon, (q, q), 1.0 / STRIDE)
            points = _instance_points(word.polygon, cells, word_mask, rng, size)
            if not points:
                continue
            hi_scale = r / size
            para = paras.get(para_of_line.get(line.id, -1))
            if para is None:
                para = ParagraphAnn(id=-1, line_ids=[line.id])
            push(
                points,
                word.id,
                {
                    "word": rasterize(word.polygon, (r, r), hi_scale),
                    "word_group": union_mask([w.polygon for w in group], (r, r), hi_scale),
                    "line": rasterize(line.polygon, (q, q), 1.0 / STRIDE),
                    "paragraph": paragraph_region_mask(sample, para, (q, q), 1.0 / STRIDE),
                },
            )
    elif sample.task_id == TASK_WORD_ONLY:
        for word in _choose(sample.words, rng):
            word_mask = rasterize(word.polygon, (q, q), 1.0 / STRIDE)
            points = _instance_points(word.polygon, cells, word_mask, rng, size)
            if not points:
                continue
            push(points, word.id, {"word": rasterize(word.polygon, (r, r), r / size)})
    elif sample.task_id == TASK_LINE_ONLY:
        for line in _choose(sample.lines, rng):
            line_mask = rasterize(line.polygon, (q, q), 1.0 / STRIDE)
            points = _instance_points(line.polygon, cells, line_mask, rng, size)
            if not points:
                continue
            push(points, line.id, {"line": line_mask})
    else:
        raise ValueError(f"unknown task id {sample.task_id}")

    if not rows:
        return _empty_prompts(n_slots)
    k = len(rows)
    coords = np.zeros((k, n_slots, 2), dtype=np.float64)
    validity = np.zeros((k, n_slots), dtype=bool)
    for i, points in enumerate(rows):
        for j, (x, y) in enumerate(points[:n_slots]):
            coords[i, j] = (x, y)
            validity[i, j] = True
    gt = {name: np.stack(stack) for name, stack in masks.items()}
    return PromptSet(coords=coords, validity=validity, gt_masks=gt, instance_ids=ids)


def _choose(items: list, rng: np.random.Generator) -> list:
    """Up to MAX_INSTANCES items, order-preserving, uniform without replacement."""
    if len(items) <= MAX_INSTANCES:
        return list(items)
    take = rng.choice(len(items), size=MAX_INSTANCES, replace=False)
    return [items[i] for i in np.sort(take)]


# ---------------------------------------------------------------------------
# Losses


def loss_point(pred: Tensor, target: Heatmap | np.ndarray | Tensor) -> Tensor:
    """Mean squared error between predicted and target heatmap grids."""
    if isinstance(target, Heatmap):
        target = target.grid
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target))
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"heatmap shape {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(pred, target.to(pred.dtype).to(pred.device))


def binary_mask_iou(pred: Tensor, gt: Tensor) -> Tensor:
    """(K, H, W) bool pair -> (K,) IoU with IoU(empty, empty) = 1."""
    inter = (pred & gt).sum(dim=(1, 2)).double()
    union = (pred | gt).sum(dim=(1, 2)).double()
    return torch.where(union > 0, inter / union.clamp(min=1.0), torch.ones_like(inter))


def loss_mask(logits: Tensor, gt_mask: Tensor | np.ndarray, iou_pred: Tensor) -> Tensor:
    """Per-row BCE + smoothed Dice + squared IoU-calibration error, averaged.

    ``gt_mask`` must be binary. The realized IoU compares ``logits > 0``
    against the target and acts as a constant; only ``iou_pred`` is pulled
    toward it.
    """
    if isinstance(gt_mask, np.ndarray):
        gt_mask = torch.from_numpy(np.ascontiguousarray(gt_mask))
    gt_mask = gt_mask.to(logits.device)
    if tuple(logits.shape) != tuple(gt_mask.shape):
        raise ValueError(f"logits shape {tuple(logits.shape)} vs mask {tuple(gt_mask.shape)}")
    if gt_mask.dtype != torch.bool:
        if not bool(((gt_mask == 0) | (gt_mask == 1)).all()):
            raise ValueError("gt_mask must be binary")
        gt_mask = gt_mask > 0
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    gt = gt_mask.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none").mean(dim=(1, 2))
    prob = torch.sigmoid(logits)
    inter = (prob * gt).sum(dim=(1, 2))
    totals = prob.sum(dim=(1, 2)) + gt.sum(dim=(1, 2))
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (totals + DICE_SMOOTH)
    realized = binary_mask_iou(logits.detach() > 0, gt_mask).to(logits.dtype)
    calib = (iou_pred - realized) ** 2
    return (bce + dice + calib).mean()


@dataclass
class LossReport:
    point: float | Tensor
    word: float | Tensor
    word_group: float | Tensor
    line: float | Tensor
    para: float | Tensor
    total: float | Tensor

    def detached(self) -> "LossReport":
        """Graph-free copy with plain floats; what the loop logs and keeps."""

        def scalar(v):
            return float(v.detach()) if isinstance(v, Tensor) else float(v)

        return LossReport(
            point=scalar(self.point),
            word=scalar(self.word),
            word_group=scalar(self.word_group),
            line=scalar(self.line),
            para=scalar(self.para),
            total=scalar(self.total),
        )

    def to_record(self, step: int) -> dict:
        def scalar(v):
            return float(v.detach()) if isinstance(v, Tensor) else float(v)

        return {
            "step": int(step),
            "L_point": scalar(self.point),
            "L_word": scalar(self.word),
            "L_word_group": scalar(self.word_group),
            "L_line": scalar(self.line),
            "L_para": scalar(self.para),
            "L_total": scalar(self.total),
        }


def total_loss(
    point: float | Tensor | None = None,
    word: float | Tensor | None = None,
    word_group: float | Tensor | None = None,
    line: float | Tensor | None = None,
    para: float | Tensor | None = None,
) -> LossReport:
    """Weighted sum of the available parts; absent granularities add zero."""
    named = {"point": point, "word": word, "word_group": word_group, "line": line, "para": para}
    for name, value in named.items():
        if value is None:
            continue
        scalar = float(value.detach()) if isinstance(value, Tensor) else float(value)
        if scalar < 0:
            raise ValueError(f"negative {name} loss component")
    have = {name: (0.0 if v is None else v) for name, v in named.items()}
    total = (
        POINT_LOSS_WEIGHT * have["point"]
        + have["word"]
        + have["word_group"]
        + have["line"]
        + PARAGRAPH_LOSS_WEIGHT * have["para"]
    )
    return LossReport(total=total, **have)


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentParams:
    brightness: float = 0.0  # additive, applied after contrast
    contrast: float = 1.0  # slope about mid-gray
    saturation: float = 1.0  # 0 grayscale .. 1 unchanged
    angle: float = 0.0  # radians, about the image center
    scale: float = 1.0  # multiplies all coordinates about the origin

    @property
    def is_identity_color(self) -> bool:
        return self.brightness == 0.0 and self.contrast == 1.0 and self.saturation == 1.0

    @property
    def is_identity_geometry(self) -> bool:
        return self.angle == 0.0 and self.scale == 1.0


def draw_augment_params(
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.5, 2.0),
    max_angle: float = math.pi / 12,
) -> AugmentParams:
    return AugmentParams(
        brightness=float(rng.uniform(-0.2, 0.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        saturation=float(rng.uniform(0.6, 1.4)),
        angle=float(rng.uniform(-max_angle, max_angle)),
        scale=float(rng.uniform(*scale_range)),
    )


def _geometry_matrix(params: AugmentParams, height: int, width: int) -> np.ndarray:
    """2x3 pixel map: rotate about the canvas center, then scale coordinates."""
    cos, sin = math.cos(params.angle), math.sin(params.angle)
    cx, cy = width / 2.0, height / 2.0
    s = params.scale
    return np.array(
        [
            [s * cos, -s * sin, s * (cx - cos * cx + sin * cy)],
            [s * sin, s * cos, s * (cy - sin * cx - cos * cy)],
        ],
        dtype=np.float64,
    )


def _transform_sample_polygons(sample: HierSample, matrix: np.ndarray) -> HierSample:
    words = [WordAnn(w.id, w.polygon.transformed(matrix)) for w in sample.words]
    lines = [LineAnn(ln.id, ln.polygon.transformed(matrix), list(ln.word_ids)) for ln in sample.lines]
    paras = [
        ParagraphAnn(
            p.id,
            list(p.line_ids),
            None if p.polygon is None else p.polygon.transformed(matrix),
        )
        for p in sample.paragraphs
    ]
    return replace(sample, words=words, lines=lines, paragraphs=paras)


def apply_augment(
    sample: HierSample,
    params: AugmentParams,
    heatmap: Heatmap | None = None,
) -> tuple[HierSample, Heatmap | None]:
    """Color jitter on the image alone; one shared affine for everything else.

    The geometric part needs the image for its canvas. The optional heatmap
    rides along under the same affine expressed at its stride. Identity
    parameters return the inputs untouched.
    """
    out = sample
    if not params.is_identity_color:
        if sample.image is None:
            raise ValueError("color augmentation needs the sample image")
        img = sample.image.astype(np.float32)
        gray = img.mean(axis=2, keepdims=True)
        img = gray + params.saturation * (img - gray)
        img = (img - 0.5) * params.contrast + 0.5 + params.brightness
        out = replace(sample, image=np.clip(img, 0.0, 1.0))
    if params.is_identity_geometry:
        return out, heatmap
    if out.image is None:
        raise ValueError("geometric augmentation needs the sample image")
    h, w = out.image.shape[:2]
    matrix = _geometry_matrix(params, h, w)
    new_w = max(1, int(round(params.scale * w)))
    new_h = max(1, int(round(params.scale * h)))
    warped = cv2.warpAffine(
        out.image.astype(np.float32),
        matrix,
        (new_w, new_h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    out = _transform_sample_polygons(replace(out, image=warped), matrix)
    if heatmap is None:
        return out, None
    hm_matrix = matrix.copy()
    hm_matrix[:, 2] /= heatmap.stride
    hm_w = max(1, int(round(new_w / heatmap.stride)))
    hm_h = max(1, int(round(new_h / heatmap.stride)))
    hm_grid = cv2.warpAffine(
        heatmap.grid.astype(np.float32),
        hm_matrix,
        (hm_w, hm_h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    return out, Heatmap(hm_grid.astype(np.float64), heatmap.stride)


def augment(
    sample: HierSample,
    rng: np.random.Generator,
    heatmap: Heatmap | None = None,
) -> tuple[HierSample, Heatmap | None]:
    return apply_augment(sample, draw_augment_params(rng), heatmap)


def resize_sample(
    sample: HierSample,
    size: int,
    heatmap: Heatmap | None = None,
    stride: int = STRIDE,
) -> tuple[HierSample, Heatmap | None]:
    """Bring the image to size x size and every coordinate along with it."""
    if sample.image is None:
        raise ValueError("resizing needs the sample image")
    h, w = sample.image.shape[:2]
    out = sample
    if (h, w) != (size, size):
        sx, sy = size / w, size / h
        image = cv2.resize(sample.image.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)
        matrix = np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]], dtype=np.float64)
        out = _transform_sample_polygons(replace(sample, image=image), matrix)
    if heatmap is None:
        return out, None
    target = size // stride
    if heatmap.grid.shape != (target, target):
        grid = cv2.resize(
            heatmap.grid.astype(np.float32), (target, target), interpolation=cv2.INTER_LINEAR
        )
        heatmap = Heatmap(grid.astype(np.float64), stride)
    return out, heatmap


# ---------------------------------------------------------------------------
# Training loop


def target_heatmap(sample: HierSample, image_size: int, variant: str = "centerline") -> Heatmap:
    """Ground-truth point-supervision field from word polygons."""
    polys = [w.polygon for w in sample.words]
    shape = (image_size, image_size)
    if variant == "centerline":
        return centerline_heatmap(polys, shape)
    if variant == "centerpoint":
        return centerpoint_heatmap(polys, shape)
    raise ValueError(f"unknown heatmap variant {variant!r}")


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    lr_decay_step: int | None = None  # global step at which lr drops, once
    lr_decay_factor: float = 0.1
    seed: int = 0
    augment: bool = True
    heatmap_variant: str = "centerline"  # or "centerpoint"
    line_only_target: str = "pseudo"  # or "skip": no point loss on line-only samples
    peak_min: float = PEAK_CANDIDATE_MIN
    checkpoint_every: int | None = None
    log_every: int = 1

    def __post_init__(self) -> None:
        if self.heatmap_variant not in ("centerline", "centerpoint"):
            raise ValueError(f"unknown heatmap variant {self.heatmap_variant!r}")
        if self.line_only_target not in ("pseudo", "skip"):
            raise ValueError(f"unknown line-only target mode {self.line_only_target!r}")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be non-negative")


@dataclass
class TrainResult:
    steps_run: int
    reports: list[LossReport]
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


_PART_OF_GRANULARITY = {"word": "word", "word_group": "word_group", "line": "line", "paragraph": "para"}


def _sample_losses(
    model: EtsamModel,
    sample: HierSample,
    task: int,
    rng: np.random.Generator,
    config: TrainConfig,
) -> dict[str, Tensor]:
    """Forward one image and return its loss parts keyed by report field."""
    embed = model.encode_image(sample.image)
    decoded = model.point_decode(embed, task)
    parts: dict[str, Tensor] = {}
    if task == TASK_LINE_ONLY:
        pred_grid = decoded.heatmap.detach().cpu().numpy().astype(np.float64)
        target = refine_pseudo_heatmap(pred_grid, [ln.polygon for ln in sample.lines])
        if config.line_only_target == "pseudo":
            parts["point"] = loss_point(decoded.heatmap, target)
    else:
        target = target_heatmap(sample, model.config.input_size, config.heatmap_variant)
        parts["point"] = loss_point(decoded.heatmap, target)
    prompts = sample_prompts(sample, target, rng, model.config, peak_min=config.peak_min)
    if len(prompts) == 0:
        return parts
    tokens = model.encode_points(prompts.coords, prompts.validity)
    bundle = model.hm_decode(embed, tokens, task)
    for name, gt in prompts.gt_masks.items():
        gi = granularity_index(name)
        parts[_PART_OF_GRANULARITY[name]] = loss_mask(
            bundle.logits_for(name), gt, bundle.iou_pred[:, gi]
        )
    return parts


def train(
    pool: DataPool,
    model: EtsamModel,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    start_step: int = 0,
    optimizer_state: dict | None = None,
) -> TrainResult:
    """Optimize the trainable parameters over the pool's batch stream.

    Deterministic for a fixed seed: batch order, augmentation, and prompt
    draws all derive from it. Writes an append-only JSON-lines metrics log
    and periodic checkpoints when ``out_dir`` is given. To resume, rebuild
    the model from a checkpoint and pass its recorded step and optimizer
    state back in.
    """
    torch.manual_seed(config.seed)
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(),
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    metrics_path = checkpoint_path = None
    log_handle = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        checkpoint_path = out_dir / "checkpoint.pt"
        log_handle = open(metrics_path, "a", encoding="utf-8")

    reports: list[LossReport] = []
    cached_epoch = -1
    batches: list[TrainBatch] = []
    size = model.config.input_size
    try:
        for step in range(start_step, config.steps):
            epoch, index = divmod(step, pool.epoch_length)
            if epoch != cached_epoch:
                batches = epoch_schedule(pool, epoch)
                cached_epoch = epoch
            batch = batches[index]
            rng = np.random.default_rng((config.seed, step))

            lr = config.lr
            if config.lr_decay_step is not None and step >= config.lr_decay_step:
                lr *= config.lr_decay_factor
            for group in optimizer.param_groups:
                group["lr"] = lr

            collected: dict[str, list[Tensor]] = {}
            for task in sorted(batch.samples):
                sample = batch.samples[task]
                if sample.image is None:
                    raise ValueError(f"sample {sample.image_id!r} has no image loaded")
                work = sample
                if config.augment:
                    work, _ = augment(work, rng)
                work, _ = resize_sample(work, size)
                for name, value in _sample_losses(model, work, task, rng, config).items():
                    collected.setdefault(name, []).append(value)

            averaged = {name: sum(vals) / len(vals) for name, vals in collected.items()}
            report = total_loss(**averaged)
            if not collected:
                reports.append(report.detached())
                continue
            if not bool(torch.isfinite(report.total)):
                ids = {t: s.image_id for t, s in batch.samples.items()}
                raise RuntimeError(
                    f"non-finite loss at step {step} on batch {ids}: "
                    f"{report.to_record(step)}"
                )
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            optimizer.step()

            reports.append(report.detached())
            if log_handle is not None and step % config.log_every == 0:
                log_handle.write(json.dumps(report.to_record(step)) + "\n")
                log_handle.flush()
            if (
                checkpoint_path is not None
                and config.checkpoint_every is not None
                and (step + 1) % config.checkpoint_every == 0
            ):
                save_checkpoint(model, checkpoint_path, step=step + 1, optimizer=optimizer)
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path, step=config.steps, optimizer=optimizer)
    finally:
        if log_handle is not None:
            log_handle.close()
    return TrainResult(
        steps_run=config.steps - start_step,
        reports=reports,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
    )
