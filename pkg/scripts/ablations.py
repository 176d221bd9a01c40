"""Desk-scale ablation suites (placement, patch size, divergence, alignment).

    python3 scripts/ablations.py --suite patch_size --seeds 1
    python3 scripts/ablations.py --suite grad_align --seeds 5

For grad_align the script also reports the mean -cos(g_vit, g_cnn) over the
last stage-2 epoch of each variant.
"""

import argparse

import numpy as np
import torch

from omnipatch.config import LossConfig, TrainSchedule
from omnipatch.desk import build_desk_stack
from omnipatch.evaluation import SUITES, run_ablations


def last_epoch_alignment(tlog):
    last = tlog.epochs[-1]["epoch"]
    vals = [r["align"] for r in tlog.steps if r["epoch"] == last and "align" in r]
    return float(np.mean(vals)) if vals else float("nan")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suite", choices=SUITES, required=True)
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--batches", type=int, default=10)
    ap.add_argument("--patch-sizes", type=int, nargs="+", default=[24, 32, 48])
    args = ap.parse_args()
    torch.set_num_threads(1)

    stack = build_desk_stack()
    for seed in range(args.seeds):
        schedule = TrainSchedule(stage1_epochs=3, stage2_epochs=3, batches_per_epoch=args.batches,
                                 batch_size=2, patch_size=32, seed=seed)
        table = run_ablations(args.suite, LossConfig(), schedule, stack.train, stack.eval, stack.vit,
                              stack.cnn, stack.targets, patch_sizes=args.patch_sizes)
        print(f"seed {seed}")
        print(table.to_text())
        if args.suite == "grad_align":
            for v, tlog in table.logs.items():
                print(f"  {v}: last stage-2 epoch mean -cos = {last_epoch_alignment(tlog):+.4f}")


if __name__ == "__main__":
    main()
