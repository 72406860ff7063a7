"""Test Dice with and without the unlabeled losses on a 64/64 split plus 256 unlabeled images.

    python3 scripts/lambda_trend.py [--lams 0,0.1] [--seeds 0,1,2] [--steps 300] [--lr 1e-3]
"""

import argparse
import json
import time

import numpy as np
import torch

from unimed.codec import build_vocabulary
from unimed.evaluate import evaluate_task
from unimed.model import ModelConfig, UniMedModel
from unimed.synth import PALETTE, make_datasets
from unimed.trainer import JointTrainer, TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lams", default="0,0.1")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--grad-clip", type=float, default=0.0)
    args = ap.parse_args()

    torch.set_num_threads(1)
    vocab = build_vocabulary(PALETTE)
    kinds = ("classification", "detection", "segmentation")
    (train, test), unl = make_datasets([kinds], [128], master_seed=args.data_seed, unlabeled=256, split_fractions=(0.5, 0.0, 0.5))
    lams = [float(x) for x in args.lams.split(",")]
    dice = {lam: [] for lam in lams}
    for seed in (int(s) for s in args.seeds.split(",")):
        for lam in lams:
            t = time.perf_counter()
            torch.manual_seed(seed)
            model = UniMedModel(ModelConfig(vocab_size=len(vocab), max_seq_len=vocab.max_target_len()))
            cfg = TrainConfig(lr=args.lr, steps=args.steps, lam=lam, seed=seed, grad_clip=args.grad_clip)
            JointTrainer(model, vocab, cfg).fit(train.entries, unl.entries, steps=args.steps)
            dice[lam].append(evaluate_task(model, vocab, test.entries, "segmentation").value)
            print(json.dumps({"seed": seed, "lambda": lam, "test_dice": dice[lam][-1], "seconds": round(time.perf_counter() - t)}), flush=True)
    for lam in lams:
        print(f"lambda={lam:g}  mean test Dice {np.mean(dice[lam]):.4f}  sd {np.std(dice[lam]):.4f}")


if __name__ == "__main__":
    main()
