"""Command-line entry point: synth-data, train, eval, infer, ablate."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .codec import CodecError, ConfigurationError, UnifiedVocabulary, build_vocabulary, record_to_line
from .config import COMMANDS, ConfigValidationError, RunConfig, resolve
from .evaluate import evaluate_manifest, overlay, run_protocol, sweep_settings
from .metrics import MetricReport
from .model import ModelConfig, ModelError, UniMedModel, load_checkpoint, save_checkpoint
from .synth import PALETTE, DatasetManifest, SceneSpec, generate_scene, make_datasets, read_manifest, write_manifest
from .tasks import infer, load_task_config
from .trainer import JointTrainer, TrainingError

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unimed", description="Unified multi-task toy model: data, training, evaluation, inference.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key = value file; CLI flags override it")
        for f in fields(RunConfig):
            if f.name == "command":
                continue
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                p.add_argument(flag, action=argparse.BooleanOptionalAction)
            else:
                p.add_argument(flag, metavar=f.name.upper())
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            raise UsageError(f"missing subcommand\n{parser.format_usage().strip()}")
    except UsageError as err:
        return _fail("usage", str(err), EXIT_USAGE)
    values = {k: v for k, v in vars(ns).items() if k != "config"}
    try:
        cfg = resolve(values, getattr(ns, "config", None))
    except ConfigValidationError as err:
        return _fail("invalid_config", str(err), EXIT_CONFIG, fields={k: why for k, why in err.problems})
    except OSError as err:
        return _fail("config_file", str(err), EXIT_CONFIG)
    torch.set_num_threads(1)
    try:
        COMMAND_TABLE[cfg.command](cfg)
    except ConfigValidationError as err:
        return _fail("invalid_config", str(err), EXIT_CONFIG, fields={k: why for k, why in err.problems})
    except (ConfigurationError, CodecError, ModelError, TrainingError, OSError) as err:
        return _fail(type(err).__name__, str(err), EXIT_RUNTIME)
    return 0


# -- shared plumbing ----------------------------------------------------------


def archive(cfg: RunConfig, where: Path | None = None) -> Path:
    """Write the resolved config (seed included) beside the run's outputs."""
    run_dir = where or cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.txt")
    return run_dir


def load_vocab(cfg: RunConfig) -> UnifiedVocabulary:
    path = Path(cfg.data_dir) / "vocab.txt"
    return UnifiedVocabulary.load(path) if path.exists() else build_vocabulary(PALETTE)


def model_config(cfg: RunConfig, vocab: UnifiedVocabulary) -> ModelConfig:
    return ModelConfig(
        vocab_size=len(vocab), image_size=cfg.image_size, d=cfg.d, levels=cfg.levels, encoder_depth=cfg.encoder_depth,
        heads=cfg.heads, ffn=cfg.ffn, decoder_layers=cfg.decoder_layers, num_queries=cfg.num_queries,
        n_max=cfg.n_max, sem_hidden=cfg.sem_hidden, max_seq_len=vocab.max_target_len(),
    )


def load_manifests(cfg: RunConfig, split: str) -> list[DatasetManifest]:
    paths = sorted(p for p in Path(cfg.data_dir).glob(f"*_{split}.jsonl") if not p.name.startswith("unlabeled_"))
    if not paths:
        raise ConfigurationError(f"no {split} manifests under {cfg.data_dir}; run synth-data first")
    return [read_manifest(p) for p in paths]


def load_unlabeled(cfg: RunConfig) -> DatasetManifest | None:
    path = Path(cfg.data_dir) / "unlabeled_train.jsonl"
    return read_manifest(path) if path.exists() else None


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else cfg.results_root() / "train" / "model.pt"


def save_snapshot(model: UniMedModel, vocab: UnifiedVocabulary, path: Path) -> None:
    """Readers only ever see complete checkpoints."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(model, vocab, tmp)
    os.replace(tmp, path)


def write_reports(reports: list[MetricReport], run_dir: Path, title: str = "") -> None:
    (run_dir / "reports.jsonl").write_text("".join(r.to_line() + "\n" for r in reports), encoding="utf-8")
    table = format_table(reports, title)
    (run_dir / "reports.txt").write_text(table, encoding="utf-8")
    print(table, end="")


def format_table(reports: list[MetricReport], title: str = "") -> str:
    rows = [(r.dataset, r.task, r.metric, f"{r.value:.4f}", str(r.count)) for r in reports]
    head = ("dataset", "task", "metric", "value", "n")
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [title] if title else []
    lines += [fmt.format(*head), fmt.format(*("-" * w for w in widths))] + [fmt.format(*r) for r in rows]
    return "\n".join(lines) + "\n"


def train_model(cfg: RunConfig, vocab: UnifiedVocabulary, run_dir: Path) -> UniMedModel:
    labeled = [e for m in load_manifests(cfg, "train") for e in m.entries]
    unl = load_unlabeled(cfg)
    torch.manual_seed(cfg.seed)
    model = UniMedModel(model_config(cfg, vocab))
    trainer = JointTrainer(model, vocab, cfg.train_config(), run_dir / "metrics.jsonl")

    def every(tr, report):
        if cfg.checkpoint_every and tr.step_index % cfg.checkpoint_every == 0:
            save_snapshot(model, vocab, run_dir / f"model_step{tr.step_index:06d}.pt")

    trainer.fit(labeled, unl.entries if unl else (), steps=cfg.steps, callback=every)
    return model


# -- subcommands ------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig) -> None:
    archive(cfg)
    spec = SceneSpec(size=cfg.image_size, min_objects=cfg.min_objects, max_objects=cfg.max_objects)
    policies = cfg.policy_list()
    sizes = cfg.size_list()
    sizes = sizes * len(policies) if len(sizes) == 1 else sizes
    fractions = (1.0 - cfg.val_fraction - cfg.test_fraction, cfg.val_fraction, cfg.test_fraction)
    manifests, unl = make_datasets(policies, sizes, spec, cfg.seed, cfg.unlabeled, fractions)
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m in manifests + ([unl] if unl else []):
        path = write_manifest(m, out)
        print(f"wrote {path} ({len(m)} images, policy={'+'.join(sorted(m.policy)) or 'none'})")
    build_vocabulary(PALETTE).save(out / "vocab.txt")
    cfg.save(out / "config.txt")


def cmd_train(cfg: RunConfig) -> None:
    run_dir = archive(cfg)
    vocab = load_vocab(cfg)
    model = train_model(cfg, vocab, run_dir)
    path = Path(cfg.checkpoint) if cfg.checkpoint else run_dir / "model.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_snapshot(model, vocab, path)
    print(f"checkpoint {path}")
    print(f"metrics log {run_dir / 'metrics.jsonl'}")


def cmd_eval(cfg: RunConfig) -> None:
    run_dir = archive(cfg)
    vocab = load_vocab(cfg)
    model = load_checkpoint(checkpoint_path(cfg), vocab)
    trains = {m.name: m for m in load_manifests(cfg, "train")}
    reports = []
    for test in load_manifests(cfg, "test"):
        res = run_protocol(cfg.protocol, model, vocab, trains.get(test.name), test, cfg.train_config(), cfg.k, run_dir / "overlays")
        reports += res.reports
    write_reports(reports, run_dir, f"protocol={cfg.protocol}")


def cmd_infer(cfg: RunConfig) -> None:
    run_dir = archive(cfg)
    task, referring, prompt = cfg.task, cfg.referring, cfg.prompt
    if cfg.task_config:
        spec, prompt = load_task_config(cfg.task_config)
        task, referring = spec.task, spec.referring
    vocab = load_vocab(cfg)
    model = load_checkpoint(checkpoint_path(cfg), vocab)
    if cfg.image:
        image = np.asarray(Image.open(cfg.image).convert("RGB"))
    else:
        image = generate_scene(SceneSpec(size=cfg.image_size), cfg.seed).image
    res = infer(image, task, referring, model, vocab, prompt or None)
    overlay(image, res).save(run_dir / "overlay.png")
    line = record_to_line(res.record, cfg.image or "<generated>", "")
    (run_dir / "record.jsonl").write_text(line + "\n", encoding="utf-8")
    summary = {
        "task": task,
        "referring": referring,
        "prompt": prompt,
        "classes": res.record.classes,
        "boxes": [list(b) for b in res.record.boxes],
        "scores": [round(s, 6) for s in res.scores],
        "queries": res.query_index,
        "mask_pixels": [int(m.sum()) for m in res.record.masks],
        "parse": {"objects": res.report.objects, "dropped": res.report.dropped, "no_object": res.report.no_object},
        "truncated_prompt": res.truncated_prompt,
        "overlay": str(run_dir / "overlay.png"),
    }
    print(json.dumps(summary, sort_keys=True))


def cmd_ablate(cfg: RunConfig) -> None:
    run_dir = archive(cfg)
    vocab = load_vocab(cfg)
    tests = load_manifests(cfg, "test")
    summary = []
    for label, overrides in sweep_settings(cfg.sweep):
        if "tasks" in overrides:
            overrides = {**overrides, "tasks": ",".join(overrides["tasks"])}
        per_seed = []
        for seed in cfg.seed_list():
            sub_cfg = replace(cfg, command="train", seed=seed, **overrides)
            sub_dir = archive(sub_cfg, run_dir / label / f"seed{seed}")
            model = train_model(sub_cfg, vocab, sub_dir)
            reports = [r for t in tests for r in evaluate_manifest(model, vocab, t)]
            write_reports(reports, sub_dir, f"{label} seed={seed}")
            per_seed.append(reports)
        for k, r in enumerate(per_seed[0]):
            mean = float(np.mean([rs[k].value for rs in per_seed]))
            summary.append(MetricReport(r.task, f"{label}|{r.dataset}", r.metric, mean, {}, len(per_seed)))
    write_reports(summary, run_dir, f"sweep={cfg.sweep} seeds={cfg.seeds}")


COMMAND_TABLE = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


if __name__ == "__main__":
    raise SystemExit(main())
