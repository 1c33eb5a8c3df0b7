"""Command-line surface: dataset generation, training, inference, evaluation.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Keys are the field names of the model, training, inference, and scene-spec
dataclasses plus a handful of top-level keys (data paths, output dir). CLI
flags override file keys, and the ``ETSAM_SEED`` environment variable
overrides every configured seed. All artifacts land under ``--out`` next to
a ``manifest.json`` naming them.
"""

from __future__ import annotations

import functools
import json
import os
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

import click
import numpy as np
import torch

import cv2

from .annotations import (
    HierSample,
    LineAnn,
    ParagraphAnn,
    Polygon,
    WordAnn,
    load_image,
    parse_hiertext_json,
    save_image,
    write_hiertext_json,
)
from .heatmaps import Heatmap, save_heatmap_png
from .inference import (
    DetectionSet,
    InferConfig,
    cascade_task0,
    extract_peaks,
    infer,
    read_predictions,
    run_points,
    single_channel,
    write_predictions,
)
from .evaluation import evaluate_dataset, write_report
from .model import GRANULARITIES, EtsamModel, ModelConfig, load_checkpoint
from .synthdata import SceneSpec, degrade, generate
from .training import TrainConfig, build_pool, resize_sample, train

CONFIG_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    infer: InferConfig
    scene: SceneSpec
    images: int = 8
    data_multi: str | None = None
    data_word: str | None = None
    data_line: str | None = None
    out: str | None = None
    version: int = CONFIG_VERSION


_TOP_LEVEL_KEYS = {
    "images": int,
    "data_multi": str,
    "data_word": str,
    "data_line": str,
    "out": str,
    "version": int,
}
_SECTIONS = (
    ("model", ModelConfig),
    ("train", TrainConfig),
    ("infer", InferConfig),
    ("scene", SceneSpec),
)


def read_config_file(path: str | Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def _convert(text: str, hint) -> object:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in {"none", ""}:
            return None
        return _convert(text, args[0])
    if origin is tuple:
        parts = [p.strip() for p in text.split(",")]
        args = list(typing.get_args(hint))
        if len(args) == 2 and args[1] is Ellipsis:
            args = [args[0]] * len(parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_convert(p, a) for p, a in zip(parts, args))
    if hint is bool:
        low = text.lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if hint in (int, float, str):
        return hint(text)
    raise ValueError(f"unsupported config value type {hint!r}")


def build_run_config(mapping: dict[str, str]) -> RunConfig:
    """Assemble a RunConfig from flat key/value text."""
    resolved = []
    for name, cls in _SECTIONS:
        hints = typing.get_type_hints(cls)
        names = {f.name for f in fields(cls)}
        resolved.append((name, cls, {k: hints[k] for k in names}))

    kwargs: dict[str, dict] = {name: {} for name, _, _ in resolved}
    top: dict[str, object] = {}
    for key, text in mapping.items():
        if key == "seed":
            value = _convert(text, int)
            kwargs["train"]["seed"] = value
            kwargs["scene"]["seed"] = value
            continue
        if key in _TOP_LEVEL_KEYS:
            top[key] = _convert(text, _TOP_LEVEL_KEYS[key])
            continue
        for name, _, hints in resolved:
            if key in hints:
                kwargs[name][key] = _convert(text, hints[key])
                break
        else:
            raise ValueError(f"unknown config key {key!r}")

    env_seed = os.environ.get("ETSAM_SEED")
    if env_seed is not None:
        kwargs["train"]["seed"] = int(env_seed)
        kwargs["scene"]["seed"] = int(env_seed)

    rc = RunConfig(
        model=ModelConfig(**kwargs["model"]),
        train=TrainConfig(**kwargs["train"]),
        infer=InferConfig(**kwargs["infer"]),
        scene=SceneSpec(**kwargs["scene"]),
        **top,
    )
    if rc.version != CONFIG_VERSION:
        raise ValueError(f"config version {rc.version} is not supported (expected {CONFIG_VERSION})")
    for label, value in (
        ("point_threshold", rc.infer.point_threshold),
        ("iou_filter", rc.infer.iou_filter),
        ("nms_cutoff", rc.infer.nms_cutoff),
        ("cluster_iou", rc.infer.cluster_iou),
    ):
        if not 0.0 < value < 1.0:
            raise ValueError(f"{label} must lie in (0, 1), got {value}")
    return rc


def _load_run_config(config: str | None, sets: tuple[str, ...]) -> RunConfig:
    mapping: dict[str, str] = {}
    if config:
        mapping.update(read_config_file(config))
    for item in sets:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    return build_run_config(mapping)


# ---------------------------------------------------------------------------
# Shared plumbing


def _stage(name: str):
    """Convert stray errors into exit-code-1 messages naming the stage."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except click.ClickException:
                raise
            except (ValueError, KeyError, OSError, RuntimeError) as exc:
                raise click.ClickException(f"{name}: {exc}") from exc

        return wrapper

    return decorate


def write_manifest(out: Path, command: str, artifacts: list[Path], extra: dict | None = None) -> Path:
    listing = sorted(str(Path(p).relative_to(out)) for p in artifacts)
    payload: dict = {"command": command, "artifacts": listing}
    if extra:
        payload.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _prepare_out(out: str | None, stage: str) -> Path:
    if not out:
        raise click.ClickException(f"{stage}: --out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_dataset(path: str, with_images: bool) -> list[HierSample]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset file {p} does not exist")
    root = p.parent / "images" if with_images else None
    return parse_hiertext_json(p, image_root=root)


def _scale_sample(sample: HierSample, factor: float) -> HierSample:
    if factor == 1.0:
        return sample

    def scaled(poly: Polygon | None) -> Polygon | None:
        return None if poly is None else Polygon(poly.points * factor)

    return HierSample(
        image_id=sample.image_id,
        task_id=sample.task_id,
        words=[WordAnn(id=w.id, polygon=scaled(w.polygon)) for w in sample.words],
        lines=[
            LineAnn(id=l.id, polygon=scaled(l.polygon), word_ids=list(l.word_ids))
            for l in sample.lines
        ],
        paragraphs=[
            ParagraphAnn(id=p.id, line_ids=list(p.line_ids), polygon=scaled(p.polygon))
            for p in sample.paragraphs
        ],
    )


GRANULARITY_COLORS = {
    "word": (0.85, 0.2, 0.2),
    "word_group": (0.2, 0.7, 0.25),
    "line": (0.2, 0.35, 0.85),
    "paragraph": (0.9, 0.78, 0.15),
}
CLUSTER_PALETTE = (
    (0.9, 0.3, 0.3),
    (0.3, 0.75, 0.35),
    (0.3, 0.45, 0.9),
    (0.9, 0.75, 0.2),
    (0.7, 0.3, 0.75),
    (0.2, 0.75, 0.75),
    (0.95, 0.55, 0.15),
    (0.55, 0.55, 0.9),
)


def render_overlay(image: np.ndarray, result: DetectionSet) -> np.ndarray:
    """Color-coded alpha blend of every detection mask over the image.

    Paragraphs take their layout-cluster color so merged blocks are visible;
    the other granularities use fixed channel colors.
    """
    out = image.astype(np.float32).copy()
    for granularity in GRANULARITIES:
        for det in result[granularity]:
            if granularity == "paragraph" and det.cluster_id is not None:
                color = CLUSTER_PALETTE[det.cluster_id % len(CLUSTER_PALETTE)]
            else:
                color = GRANULARITY_COLORS[granularity]
            region = det.mask
            out[region] = 0.6 * out[region] + 0.4 * np.asarray(color, dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def _print_metric_table(report: dict, channels: list[str]) -> None:
    header = f"{'channel':<12}" + "".join(f"{k:>9}" for k in ("P", "R", "F", "T", "PQ"))
    click.echo(header)
    for channel in channels:
        row = report[channel]
        cells = "".join(
            f"{row[k]:>9.2f}" for k in ("precision", "recall", "f_score", "tightness", "pq")
        )
        click.echo(f"{channel:<12}{cells}")


# ---------------------------------------------------------------------------
# Commands


@click.group()
def main() -> None:
    """Hierarchical scene-text detection pipeline."""


@main.command("make-data")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True, help="Override a config key, e.g. --set images=4.")
@click.option("--out", required=False, help="Output directory.")
@click.option("--images", "images_flag", type=int, default=None, help="Number of scenes.")
@click.option("--degrade/--no-degrade", "emit_degraded", default=False,
              help="Also write word-only and line-only annotation files.")
@_stage("make-data")
def cmd_make_data(config_path, sets, out, images_flag, emit_degraded):
    """Generate a synthetic dataset: PNG images plus annotation JSON."""
    rc = _load_run_config(config_path, sets)
    if out:
        rc.out = out
    out_dir = _prepare_out(rc.out, "make-data")
    count = images_flag if images_flag is not None else rc.images
    (out_dir / "images").mkdir(exist_ok=True)

    samples = []
    artifacts = []
    for i in range(count):
        spec = replace(rc.scene, seed=rc.scene.seed + i)
        sample = generate(spec)
        png = out_dir / "images" / f"{sample.image_id}.png"
        save_image(sample.image, png)
        artifacts.append(png)
        samples.append(sample)

    multi_path = out_dir / "annotations_multi.json"
    write_hiertext_json(samples, multi_path)
    artifacts.append(multi_path)
    if emit_degraded:
        for mode, filename in (("word_only", "annotations_word.json"),
                               ("line_only", "annotations_line.json")):
            path = out_dir / filename
            write_hiertext_json([degrade(s, mode) for s in samples], path)
            artifacts.append(path)

    write_manifest(out_dir, "make-data", artifacts,
                   {"images": count, "seed": rc.scene.seed})
    click.echo(f"wrote {count} scenes to {out_dir}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True)
@click.option("--out", required=False)
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False),
              help="Continue from a checkpoint.")
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@_stage("train")
def cmd_train(config_path, sets, out, resume_path, steps, seed):
    """Train on the configured data categories and write a checkpoint."""
    rc = _load_run_config(config_path, sets)
    if out:
        rc.out = out
    if steps is not None:
        rc.train = replace(rc.train, steps=steps)
    if seed is not None:
        rc.train = replace(rc.train, seed=seed)
    out_dir = _prepare_out(rc.out, "train")

    categories = {}
    for name, path in (("multi", rc.data_multi), ("word", rc.data_word), ("line", rc.data_line)):
        categories[name] = _load_dataset(path, with_images=True) if path else []
    if not any(categories.values()):
        raise click.ClickException("train: no data configured (set data_multi/data_word/data_line)")

    pool = build_pool(categories["multi"], categories["word"], categories["line"],
                      seed=rc.train.seed, allow_partial=True)

    start_step = 0
    optimizer_state = None
    if resume_path:
        model, payload = load_checkpoint(resume_path)
        start_step = int(payload["step"])
        optimizer_state = payload.get("optimizer")
    else:
        model = EtsamModel(rc.model)

    result = train(pool, model, rc.train, out_dir=out_dir,
                   start_step=start_step, optimizer_state=optimizer_state)

    artifacts = [p for p in (result.checkpoint_path, result.metrics_path) if p]
    write_manifest(out_dir, "train", [Path(p) for p in artifacts],
                   {"steps_run": result.steps_run, "seed": rc.train.seed})
    final = result.reports[-1].total if result.reports else float("nan")
    click.echo(f"trained {result.steps_run} steps, final loss {final:.4f}")


def _iter_infer_inputs(model, image_paths, data_path):
    size = model.config.input_size
    if data_path:
        for sample in _load_dataset(data_path, with_images=True):
            resized, _ = resize_sample(sample, size)
            yield resized.image_id, resized.image
    for path in image_paths:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing image {p}")
        image = load_image(p)
        if image.shape[:2] != (size, size):
            image = cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA)
        yield p.stem, image


@main.command("infer")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", "image_paths", multiple=True, help="Image file; repeatable.")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False),
              help="Dataset JSON whose images to run.")
@click.option("--task", type=int, default=0, show_default=True)
@click.option("--threshold", type=float, default=None, help="Point-prompt score cutoff.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True)
@click.option("--out", required=True)
@click.option("--save-heatmap", is_flag=True, help="Write the point heatmap per image.")
@click.option("--overlay", is_flag=True, help="Write color-coded mask overlays.")
@_stage("infer")
def cmd_infer(checkpoint, image_paths, data_path, task, threshold, config_path, sets, out,
              save_heatmap, overlay):
    """Run detection on images and write per-image prediction JSON."""
    if not image_paths and not data_path:
        raise click.ClickException("infer: give --image or --data")
    rc = _load_run_config(config_path, sets)
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    out_dir = _prepare_out(out, "infer")
    (out_dir / "predictions").mkdir(exist_ok=True)
    if save_heatmap:
        (out_dir / "heatmaps").mkdir(exist_ok=True)
    if overlay:
        (out_dir / "overlays").mkdir(exist_ok=True)

    artifacts = []
    results = []
    for image_id, image in _iter_infer_inputs(model, image_paths, data_path):
        result, heat = infer(model, image, task, point_threshold=threshold,
                             config=rc.infer, image_id=image_id, return_heatmap=True)
        results.append(result)
        pred_path = out_dir / "predictions" / f"{image_id}.json"
        write_predictions(result, pred_path)
        artifacts.append(pred_path)
        if save_heatmap:
            hm_path = out_dir / "heatmaps" / f"{image_id}.png"
            save_heatmap_png(heat, hm_path)
            artifacts.append(hm_path)
        if overlay:
            ov_path = out_dir / "overlays" / f"{image_id}.png"
            save_image(render_overlay(image, result), ov_path)
            artifacts.append(ov_path)

    combined = out_dir / "predictions.json"
    write_predictions(results, combined)
    artifacts.append(combined)
    write_manifest(out_dir, "infer", artifacts, {"task": task, "images": len(results)})
    total = sum(r.total for r in results)
    click.echo(f"ran {len(results)} images, {total} detections")


@main.command("eval")
@click.option("--predictions", "pred_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True)
@click.option("--granularities", default="word,line", show_default=True)
@click.option("--layout/--no-layout", default=True, show_default=True)
@click.option("--size", type=int, default=None, help="Evaluation grid size in pixels.")
@click.option("--gt-size", type=int, default=None,
              help="Source coordinate frame of the annotations, if it differs from the grid.")
@_stage("eval")
def cmd_eval(pred_path, data_path, out, granularities, layout, size, gt_size):
    """Score predictions against ground truth; table to stdout, JSON to --out."""
    out_dir = _prepare_out(out, "eval")
    preds = read_predictions(pred_path)
    gts = _load_dataset(data_path, with_images=False)

    if size is None:
        size = next(
            (d.mask.shape[0] for p in preds for dets in p.detections.values() for d in dets),
            gt_size,
        )
    if size is None:
        raise click.ClickException("eval: pass --size (no detections to take it from)")
    factor = size / gt_size if gt_size else 1.0

    by_id = {p.image_id: p for p in preds}
    unknown = set(by_id) - {g.image_id for g in gts}
    if unknown:
        raise click.ClickException(f"eval: predictions for unknown images {sorted(unknown)}")
    pairs = []
    for gt in gts:
        pred = by_id.get(gt.image_id, DetectionSet({}, image_id=gt.image_id))
        pairs.append((pred, _scale_sample(gt, factor)))

    channels = [g.strip() for g in granularities.split(",") if g.strip()]
    report = evaluate_dataset(pairs, channels, layout=layout, size=size)
    report_path = out_dir / "report.json"
    write_report(report, report_path)
    write_manifest(out_dir, "eval", [report_path], {"images": len(pairs)})
    _print_metric_table(report, channels + (["layout"] if layout else []))


@main.command("ablate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True)
@click.option("--thresholds", default="0.5,0.6,0.7,0.8", show_default=True)
@click.option("--task", type=int, default=0, show_default=True)
@click.option("--granularity", default="word", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "sets", multiple=True)
@_stage("ablate")
def cmd_ablate(checkpoint, data_path, out, thresholds, task, granularity, config_path, sets):
    """Sweep the point threshold, reporting point counts and metrics per value."""
    rc = _load_run_config(config_path, sets)
    values = [float(v) for v in thresholds.split(",") if v.strip()]
    for v in values:
        if not 0.0 < v < 1.0:
            raise click.ClickException(f"ablate: threshold {v} outside (0, 1)")
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    size = model.config.input_size
    out_dir = _prepare_out(out, "ablate")

    prepared = []  # (gt sample, embedding, heatmap) per image, computed once
    with torch.no_grad():
        for sample in _load_dataset(data_path, with_images=True):
            resized, _ = resize_sample(sample, size)
            embedding = model.encode_image(resized.image)
            decoded = model.point_decode(embedding, task)
            heat = Heatmap(decoded.heatmap.detach().cpu().numpy())
            prepared.append((resized, embedding, heat))

    rows = []
    for value in values:
        pairs = []
        per_image = {}
        with torch.no_grad():
            for gt, embedding, heat in prepared:
                peaks = extract_peaks(heat, value, cap=rc.infer.point_cap)
                per_image[gt.image_id] = int(len(peaks))
                dets = run_points(model, embedding, peaks, task, rc.infer.batch_size)
                if task == 0:
                    result = cascade_task0(dets, rc.infer)
                else:
                    result = single_channel(dets, granularity, rc.infer)
                result.image_id = gt.image_id
                pairs.append((result, gt))
        report = evaluate_dataset(pairs, (granularity,), layout=False, size=size)
        rows.append({
            "threshold": value,
            "total_points": sum(per_image.values()),
            "points_per_image": per_image,
            "metrics": report[granularity],
        })

    path = out_dir / "ablation.json"
    path.write_text(json.dumps(rows, indent=2) + "\n")
    write_manifest(out_dir, "ablate", [path],
                   {"thresholds": values, "granularity": granularity})
    click.echo(f"{'threshold':>9}{'points':>8}{'recall':>9}{'f_score':>9}")
    for row in rows:
        click.echo(
            f"{row['threshold']:>9.2f}{row['total_points']:>8}"
            f"{row['metrics']['recall']:>9.2f}{row['metrics']['f_score']:>9.2f}"
        )


if __name__ == "__main__":
    main()
