"""Run configuration: flat ``key = value`` files with CLI > file > defaults precedence."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .codec import ConfigurationError
from .trainer import TrainConfig, parse_ratio

RESULTS_ENV = "UNIMED_RESULTS_ROOT"
COMMANDS = ("synth-data", "train", "eval", "infer", "ablate")
KINDS = ("classification", "detection", "segmentation")


class ConfigValidationError(ConfigurationError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {why}" for k, why in problems))


@dataclass
class RunConfig:
    command: str = ""
    run_name: str = ""
    seed: int = 0
    # paths
    data_dir: str = "data"
    results_dir: str = "results"
    checkpoint: str = ""
    # synthetic data
    policies: str = "classification+detection+segmentation"
    sizes: str = "128"
    val_fraction: float = 0.0
    test_fraction: float = 0.5
    unlabeled: int = 256
    image_size: int = 64
    min_objects: int = 0
    max_objects: int = 3
    # model
    d: int = 64
    levels: int = 3
    encoder_depth: int = 1
    heads: int = 4
    ffn: int = 128
    decoder_layers: int = 3
    num_queries: int = 10
    n_max: int = 16
    sem_hidden: int = 128
    # training
    lr: float = 1e-4
    weight_decay: float = 0.05
    lam: float = 0.1
    ratio: str = "1:1"
    steps: int = 200
    batch_size: int = 8
    unlabeled_batch_size: int = 8
    temperature: float = 0.2
    queue_size: int = 256
    momentum: float = 0.99
    referring_prob: float = 0.25
    tasks: str = "classification,detection,segmentation"
    checkpoint_every: int = 0
    # evaluation
    protocol: str = "finetune"
    k: int = 100
    overlays: int = 8
    # inference
    task: str = "segmentation"
    referring: bool = False
    prompt: str = ""
    image: str = ""
    task_config: str = ""
    # ablation
    sweep: str = "lambda"
    seeds: str = "0"

    # -- derived views -----------------------------------------------------

    def policy_list(self) -> list[tuple[str, ...]]:
        return [tuple(k.strip() for k in p.split("+") if k.strip()) for p in self.policies.split(";") if p.strip()]

    def size_list(self) -> list[int]:
        return [int(s) for s in self.sizes.split(";") if s.strip()]

    def task_list(self) -> tuple[str, ...]:
        return tuple(t.strip() for t in self.tasks.split(",") if t.strip())

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, lam=self.lam, ratio=self.ratio, steps=self.steps,
            batch_size=self.batch_size, unlabeled_batch_size=self.unlabeled_batch_size, seed=self.seed,
            temperature=self.temperature, queue_size=self.queue_size, momentum=self.momentum,
            referring_prob=self.referring_prob, tasks=self.task_list(),
        )
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def results_root(self) -> Path:
        env = os.environ.get(RESULTS_ENV)
        return Path(env) if env else Path(self.results_dir)

    def run_dir(self) -> Path:
        return self.results_root() / (self.run_name or self.command or "run")

    # -- checks ----------------------------------------------------------------

    def problems(self) -> list[tuple[str, str]]:
        bad: list[tuple[str, str]] = []
        if self.command and self.command not in COMMANDS:
            bad.append(("command", f"must be one of {', '.join(COMMANDS)}"))
        for name in ("d", "levels", "encoder_depth", "heads", "ffn", "decoder_layers", "num_queries", "n_max",
                     "sem_hidden", "steps", "batch_size", "unlabeled_batch_size", "queue_size", "image_size"):
            if getattr(self, name) < 1:
                bad.append((name, "must be >= 1"))
        if self.heads >= 1 and self.d % self.heads:
            bad.append(("heads", "must divide d"))
        if self.image_size % (2 ** (self.levels + 1)):
            bad.append(("image_size", f"must be divisible by {2 ** (self.levels + 1)}"))
        for name in ("lr", "temperature"):
            if not getattr(self, name) > 0:
                bad.append((name, "must be > 0"))
        for name in ("weight_decay", "lam", "unlabeled", "checkpoint_every", "k", "overlays", "min_objects"):
            if getattr(self, name) < 0:
                bad.append((name, "must be >= 0"))
        for name in ("momentum", "referring_prob", "val_fraction", "test_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                bad.append((name, "must lie in [0, 1]"))
        if self.val_fraction + self.test_fraction >= 1:
            bad.append(("test_fraction", "val_fraction + test_fraction must be < 1"))
        if self.max_objects < self.min_objects:
            bad.append(("max_objects", "must be >= min_objects"))
        try:
            parse_ratio(self.ratio)
        except (ConfigurationError, ValueError, ZeroDivisionError):
            bad.append(("ratio", "must look like a:b with non-negative rationals"))
        try:
            pols = self.policy_list()
            if not pols or any(not p or set(p) - set(KINDS) for p in pols):
                bad.append(("policies", f"';'-separated datasets of '+'-joined kinds from {KINDS}"))
            elif len(self.size_list()) not in (1, len(pols)) or any(n < 1 for n in self.size_list()):
                bad.append(("sizes", "one positive size, or one per policy"))
        except ValueError:
            bad.append(("sizes", "must be integers"))
        if not self.task_list() or set(self.task_list()) - set(KINDS):
            bad.append(("tasks", f"comma-separated subset of {KINDS}"))
        if self.protocol not in ("finetune", "zero_shot", "few_shot"):
            bad.append(("protocol", "must be finetune, zero_shot or few_shot"))
        if self.task not in KINDS:
            bad.append(("task", f"must be one of {KINDS}"))
        if self.referring and not self.prompt and not self.task_config:
            bad.append(("prompt", "referring inference needs a prompt"))
        if self.sweep not in ("lambda", "tasks", "ratio"):
            bad.append(("sweep", "must be lambda, tasks or ratio"))
        try:
            if not self.seed_list():
                bad.append(("seeds", "needs at least one seed"))
        except ValueError:
            bad.append(("seeds", "comma-separated integers"))
        return bad

    def validate(self) -> "RunConfig":
        bad = self.problems()
        if bad:
            raise ConfigValidationError(bad)
        return self

    # -- serialization -------------------------------------------------------------

    def dumps(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_flat(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; surrounding quotes are dropped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigValidationError([(f"line {n}", f"expected key = value, got {raw.strip()!r}")])
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.strip().replace("-", "_")] = value
    return out


def coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    """Convert raw values to field types; every unknown key or bad value is reported."""
    out: dict[str, Any] = {}
    bad: list[tuple[str, str]] = []
    for key, raw in values.items():
        kind = FIELD_TYPES.get(key)
        if kind is None:
            bad.append((key, "unknown setting"))
            continue
        try:
            if kind == "bool":
                if isinstance(raw, bool):
                    out[key] = raw
                elif str(raw).lower() in ("1", "true", "yes", "on"):
                    out[key] = True
                elif str(raw).lower() in ("0", "false", "no", "off"):
                    out[key] = False
                else:
                    raise ValueError(raw)
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = str(raw)
        except ValueError:
            bad.append((key, f"cannot read {raw!r} as {kind}"))
    if bad:
        raise ConfigValidationError(bad)
    return out


def resolve(cli: Mapping[str, Any] | None = None, file: str | Path | None = None) -> RunConfig:
    """defaults, then the config file, then CLI values."""
    merged: dict[str, Any] = {}
    if file:
        merged.update(coerce(parse_flat(Path(file).read_text(encoding="utf-8"))))
    merged.update(coerce(cli or {}))
    return RunConfig(**merged).validate()


def load(path: str | Path) -> RunConfig:
    return resolve(file=path)
