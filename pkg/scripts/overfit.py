"""Memorize 16 synthetic scenes and report train metrics every --every steps.

    python3 scripts/overfit.py [--config configs/overfit.cfg] [--every 250] [--out results/overfit]
"""

import argparse
import json
import time
from pathlib import Path

import torch

from unimed.cli import model_config
from unimed.codec import build_vocabulary
from unimed.config import load
from unimed.evaluate import evaluate_manifest
from unimed.model import UniMedModel, save_checkpoint
from unimed.synth import PALETTE, SceneSpec, make_datasets
from unimed.trainer import JointTrainer

TARGETS = {"Dice": 0.95, "mAcc": 0.95, "mAP": 0.90}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/overfit.cfg")
    ap.add_argument("--every", type=int, default=250)
    ap.add_argument("--out", default="results/overfit")
    ap.add_argument("--run-to-end", action="store_true", help="keep training after the targets are met")
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = load(args.config)
    vocab = build_vocabulary(PALETTE)
    spec = SceneSpec(size=cfg.image_size, min_objects=cfg.min_objects, max_objects=cfg.max_objects)
    (ds,), _ = make_datasets(cfg.policy_list(), cfg.size_list(), spec, cfg.seed)
    torch.manual_seed(cfg.seed)
    model = UniMedModel(model_config(cfg, vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = JointTrainer(model, vocab, cfg.train_config(), out / "metrics.jsonl")
    rows, start = [], time.perf_counter()

    class Done(Exception):
        pass

    def every(tr, rep):
        if tr.step_index % args.every:
            return
        scores = {r.metric: r.value for r in evaluate_manifest(model, vocab, ds)}
        rows.append({"step": tr.step_index, "seconds": round(time.perf_counter() - start, 1), "L_total": rep.L_total, **scores})
        print(json.dumps(rows[-1]), flush=True)
        if not args.run_to_end and all(scores[k] >= v for k, v in TARGETS.items()):
            raise Done

    try:
        trainer.fit(ds.entries, steps=cfg.steps, callback=every)
    except Done:
        pass
    save_checkpoint(model, vocab, out / "model.pt")
    (out / "curve.json").write_text(json.dumps(rows, indent=1))
    met = rows and all(rows[-1][k] >= v for k, v in TARGETS.items())
    print(f"targets {'met' if met else 'NOT met'} at step {rows[-1]['step'] if rows else 0}")


if __name__ == "__main__":
    main()
