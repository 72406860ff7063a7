"""Evaluation of a model on manifests, transfer protocols and ablation sweeps."""

from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .codec import ConfigurationError, UnifiedVocabulary
from .metrics import Detection, GroundTruth, MetricReport, dice_score, mean_accuracy, mean_ap
from .model import UniMedModel
from .synth import DatasetManifest, ManifestEntry
from .tasks import InferenceResult, infer
from .trainer import JointTrainer, TrainConfig

METRIC_FOR_TASK = {"classification": "mAcc", "detection": "mAP", "segmentation": "Dice"}
LAMBDA_SWEEP = (1.0, 0.75, 0.5, 0.1, 0.0)
RATIO_SWEEP = ("0.5:1", "1:1", "1:2")
TASK_SWEEP = {
    "all": ("classification", "detection", "segmentation"),
    "-detection": ("classification", "segmentation"),
    "-classification": ("detection", "segmentation"),
    "single-segmentation": ("segmentation",),
}


def foreground(masks: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= m
    return out


def evaluate_task(
    model: UniMedModel,
    vocab: UnifiedVocabulary,
    entries: Sequence[ManifestEntry],
    task: str,
    dataset: str = "",
    predictions: dict | None = None,
) -> MetricReport:
    """Run general (non-referring) inference for ``task`` over ``entries`` and score it."""
    results: list[InferenceResult] = [infer(e.image, task, False, model, vocab) for e in entries]
    if predictions is not None:
        predictions[task] = results
    if task == "classification":
        pairs = [(_top_class(r), e.record.classes[0]) for r, e in zip(results, entries) if e.record.classes]
        if not pairs:
            raise ConfigurationError("no labeled images for classification")
        value, per = mean_accuracy([p for p, _ in pairs], [g for _, g in pairs])
        return MetricReport(task, dataset, "mAcc", value, per, len(pairs))
    if task == "detection":
        dets, gts = [], []
        for k, (r, e) in enumerate(zip(results, entries)):
            dets += [Detection(k, b, s, c) for b, s, c in zip(r.record.boxes, r.scores, r.record.classes)]
            gts += [GroundTruth(k, tuple(b), c) for b, c in zip(e.record.boxes, e.record.classes)]
        value, per = mean_ap(dets, gts)
        return MetricReport(task, dataset, "mAP", value, per, len(entries))
    if task == "segmentation":
        by_class: dict[str, list[float]] = defaultdict(list)
        for r, e in zip(results, entries):
            shape = e.image.shape[:2]
            d = dice_score(foreground(r.record.masks, shape), foreground(e.record.masks, shape))
            by_class[e.record.classes[0] if e.record.classes else "(none)"].append(d)
        scores = [v for vs in by_class.values() for v in vs]
        per = {c: float(np.mean(v)) for c, v in by_class.items()}
        return MetricReport(task, dataset, "Dice", float(np.mean(scores)), per, len(scores))
    raise ConfigurationError(f"unknown task {task!r}")


def _top_class(result: InferenceResult) -> str | None:
    if not result.record.classes:
        return None
    return result.record.classes[int(np.argmax(result.scores))]


def evaluate_manifest(model: UniMedModel, vocab: UnifiedVocabulary, manifest: DatasetManifest, tasks: Sequence[str] | None = None) -> list[MetricReport]:
    tasks = [t for t in (tasks or METRIC_FOR_TASK) if t in manifest.policy]
    return [evaluate_task(model, vocab, manifest.entries, t, f"{manifest.name}/{manifest.split}") for t in tasks]


# -- overlays -----------------------------------------------------------------


def overlay(image: np.ndarray, result: InferenceResult, scale: int = 4) -> Image.Image:
    img = image.astype(np.float64).copy()
    for m in result.record.masks:
        img[m] = 0.5 * img[m] + 0.5 * np.array([255, 0, 0])
    pil = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).resize((image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(pil)
    for k, name in enumerate(result.record.classes):
        label = f"{name} {result.scores[k]:.2f}"
        if result.record.boxes:
            x0, y0, x1, y1 = (v * scale for v in result.record.boxes[k])
            draw.rectangle([x0, y0, x1, y1], outline=(0, 255, 0))
            draw.text((x0 + 2, y0 + 2), label, fill=(255, 255, 0))
        else:
            draw.text((2, 2 + 10 * k), label, fill=(255, 255, 0))
    return pil


def write_overlays(entries: Sequence[ManifestEntry], predictions: dict, out_dir: str | Path, limit: int = 8) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for task, results in predictions.items():
        for e, r in list(zip(entries, results))[:limit]:
            p = out_dir / f"{e.record.image_id}_{task}.png"
            overlay(e.image, r).save(p)
            paths.append(p)
    return paths


# -- protocols ----------------------------------------------------------------


@dataclass
class ProtocolResult:
    protocol: str
    reports: list[MetricReport]
    overlays: list[Path]


def run_protocol(
    protocol: str,
    model: UniMedModel,
    vocab: UnifiedVocabulary,
    train: DatasetManifest | None,
    test: DatasetManifest,
    train_cfg: TrainConfig | None = None,
    k: int = 100,
    results_dir: str | Path | None = None,
) -> ProtocolResult:
    """finetune / zero_shot / few_shot on ``test``; the input model is never modified."""
    train_cfg = train_cfg or TrainConfig()
    if protocol not in ("finetune", "zero_shot", "few_shot"):
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    work = model
    if protocol == "few_shot":
        if train is None or k > len(train):
            raise ConfigurationError(f"few-shot k={k} exceeds the {0 if train is None else len(train)} available samples")
        if k > 0:
            rng = np.random.default_rng(train_cfg.seed)
            pick = sorted(rng.choice(len(train), size=k, replace=False).tolist())
            work = _finetune(model, vocab, [train.entries[i] for i in pick], train_cfg)
    elif protocol == "finetune":
        if train is None or not len(train):
            raise ConfigurationError("finetune needs a training manifest")
        work = _finetune(model, vocab, train.entries, train_cfg)
    reports, overlays = [], []
    for task in [t for t in METRIC_FOR_TASK if t in test.policy]:
        preds: dict = {}
        reports.append(evaluate_task(work, vocab, test.entries, task, f"{test.name}/{test.split}", preds))
        if results_dir is not None:
            overlays += write_overlays(test.entries, preds, Path(results_dir) / protocol)
    return ProtocolResult(protocol, reports, overlays)


def _finetune(model: UniMedModel, vocab: UnifiedVocabulary, entries: Sequence[ManifestEntry], cfg: TrainConfig) -> UniMedModel:
    work = copy.deepcopy(model)
    torch.manual_seed(cfg.seed)
    JointTrainer(work, vocab, replace(cfg, lam=0.0)).fit(entries, steps=cfg.steps)
    return work


# -- ablation sweeps ----------------------------------------------------------


def sweep_settings(kind: str) -> list[tuple[str, dict]]:
    """(row label, TrainConfig overrides), rows in reporting order."""
    if kind == "lambda":
        return [(f"lambda={v:g}", {"lam": v}) for v in LAMBDA_SWEEP]
    if kind == "tasks":
        return [(name, {"tasks": tasks}) for name, tasks in TASK_SWEEP.items()]
    if kind == "ratio":
        return [(f"ratio={r}", {"ratio": r}) for r in RATIO_SWEEP]
    raise ConfigurationError(f"unknown sweep {kind!r}; expected lambda, tasks or ratio")
