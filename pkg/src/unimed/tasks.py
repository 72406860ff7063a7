"""Task compositions as pure configuration over one model."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import (
    AnnotationRecord,
    ConfigurationError,
    ParsedObject,
    ParseReport,
    UnifiedVocabulary,
    decode_prediction,
    objects_to_record,
)
from .model import UniMedModel

TASKS = ("classification", "detection", "segmentation")


@dataclass(frozen=True)
class TaskSpec:
    task: str
    referring: bool
    inputs: frozenset[str]
    outputs: frozenset[str]


def compose(task: str, referring: bool = False) -> TaskSpec:
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
    inputs = {"visual", "general_queue"}
    if referring:
        inputs.add("text_queue")
    outputs = {"semantic", "pixel"} if task == "segmentation" else {"semantic"}
    return TaskSpec(task, bool(referring), frozenset(inputs), frozenset(outputs))


ALL_SPECS = tuple(compose(t, r) for t in TASKS for r in (False, True))


def parse_prompt(prompt: str, vocab: UnifiedVocabulary) -> list[str]:
    """Comma-separated class names; names outside the vocabulary are rejected."""
    names = [p.strip() for p in prompt.split(",") if p.strip()]
    unknown = [n for n in names if n not in vocab.class_names]
    if unknown:
        raise ConfigurationError(f"prompt names unknown classes: {unknown}")
    return list(dict.fromkeys(names))


def prompt_ids(names: Sequence[str], vocab: UnifiedVocabulary, n_max: int) -> tuple[list[int], bool]:
    """Subword ids of the prompt classes joined by SEP; truncated to n_max (flag set)."""
    ids: list[int] = []
    for i, name in enumerate(names):
        if i:
            ids.append(vocab.sep)
        ids.extend(vocab.class_ids(name))
    return ids[:n_max], len(ids) > n_max


def pad_prompts(batch: Sequence[Sequence[int]], vocab: UnifiedVocabulary) -> tuple[torch.Tensor, torch.Tensor]:
    n = max((len(p) for p in batch), default=0)
    ids = torch.full((len(batch), n), vocab.pad, dtype=torch.long)
    pad = torch.ones(len(batch), n, dtype=torch.bool)
    for i, p in enumerate(batch):
        ids[i, : len(p)] = torch.tensor(p, dtype=torch.long)
        pad[i, : len(p)] = False
    return ids, pad


@dataclass
class InferenceResult:
    record: AnnotationRecord
    scores: list[float]
    report: ParseReport
    query_index: list[int] = field(default_factory=list)
    truncated_prompt: bool = False


def sequence_score(tokens: Sequence[int], logits: torch.Tensor) -> float:
    """Geometric-mean probability of the emitted tokens."""
    logp = logits[: len(tokens)].log_softmax(-1)
    picked = logp[torch.arange(len(tokens)), torch.as_tensor(tokens)]
    return float(picked.mean().exp())


def upsample_masks(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(mask_logits[None], size=size, mode="bilinear", align_corners=False)[0]


@torch.no_grad()
def infer(
    image: np.ndarray,
    task: str,
    referring: bool,
    model: UniMedModel,
    vocab: UnifiedVocabulary,
    prompt: str | None = None,
    grid: int = 16,
) -> InferenceResult:
    """One image through the composed task; never raises on unparseable output."""
    if referring and not prompt:
        raise ConfigurationError("referring tasks require a prompt")
    spec = compose(task, referring)
    h, w = image.shape[:2]
    text = None
    keep: list[str] | None = None
    truncated = False
    if referring:
        keep = parse_prompt(prompt, vocab)
        ids, truncated = prompt_ids(keep, vocab, model.cfg.n_max)
        text = torch.tensor([ids], dtype=torch.long)
    model.eval()
    out = model(model.prepare_images(image), spec, text, vocab)
    n = out.n_text
    toks = out.semantic_tokens[0, n:]
    logits = out.semantic_logits[0, n:]
    masks = None
    if out.pixel is not None:
        masks = (upsample_masks(out.pixel[0], (h, w)).sigmoid() > 0.5).numpy()

    report = ParseReport()
    objects: list[ParsedObject] = []
    scores: list[float] = []
    index: list[int] = []
    for q in range(toks.shape[0]):
        seq = [vocab.bos, *toks[q].tolist()]
        rec, rep = decode_prediction([seq], vocab, (h, w), grid)
        for k in ("bos_seen", "objects", "masks", "no_object", "empty", "dropped"):
            setattr(report, k, getattr(report, k) + getattr(rep, k))
        if not rec.classes:
            continue
        name = rec.classes[0]
        if keep is not None and name not in keep:
            continue
        box = rec.boxes[0] if task == "detection" and rec.boxes else None
        if task == "detection" and box is None:
            continue
        emitted = toks[q].tolist()
        stop = next(i for i, t in enumerate(emitted + [vocab.eos]) if t in (vocab.eos, vocab.no_object))
        objects.append(ParsedObject(name, box, masks[q] if masks is not None else None))
        scores.append(sequence_score(emitted[: stop + 1], logits[q]))
        index.append(q)
    record = objects_to_record(objects)
    record.present_kinds = frozenset({task}) if objects else frozenset()
    if task != "detection":
        record.boxes = []
    if task != "segmentation":
        record.masks = []
    return InferenceResult(record, scores, report, index, truncated)


# -- task config files ------------------------------------------------------


def parse_task_config(text: str) -> dict[str, object]:
    """Flat ``key = value`` lines: task, referring, prompt."""
    out: dict[str, object] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    unknown = set(out) - {"task", "referring", "prompt"}
    if unknown:
        raise ConfigurationError(f"unknown task config keys {sorted(unknown)}")
    out["referring"] = str(out.get("referring", "false")).lower() in ("1", "true", "yes")
    out.setdefault("prompt", "")
    if out.get("task") not in TASKS:
        raise ConfigurationError(f"task config needs task in {TASKS}")
    if out["referring"] and not out["prompt"]:
        raise ConfigurationError("referring task config needs a prompt")
    return out


def load_task_config(path: str | Path) -> tuple[TaskSpec, str]:
    cfg = parse_task_config(Path(path).read_text(encoding="utf-8"))
    return compose(cfg["task"], cfg["referring"]), str(cfg["prompt"])
