"""Finite-difference check of every parameter gradient of L_total (float64 toy model).

    python3 scripts/gradcheck.py [--directions 2] [--coords 3] [--d 64]
"""

import argparse
import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from _gradcheck import build_problem, check  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--lam", type=float, default=0.1)
    ap.add_argument("--directions", type=int, default=2)
    ap.add_argument("--coords", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    start = time.perf_counter()
    params, objective = build_problem(d=args.d, lam=args.lam, seed=args.seed)
    count, bad = check(params, objective, args.directions, args.coords, seed=args.seed)
    print(f"{len(params)} tensors, {sum(p.numel() for _, p in params)} parameters, {count} comparisons, "
          f"{len(bad)} mismatches, {time.perf_counter() - start:.0f}s")
    for m in bad[:20]:
        print(f"  {m.name} {m.where}: analytic {m.analytic:.6e} numeric {m.numeric:.6e}")
    sys.exit(1 if bad else 0)


if __name__ == "__main__":
    main()
