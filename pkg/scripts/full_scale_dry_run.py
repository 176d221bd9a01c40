"""Full-resolution recipe check with toy models.

Runs one batch of the first epoch of each stage at 1024 x 2048 with the
default hyperparameters (200 px patch, 10 + 10 epochs, ViT downscale 0.75),
then prints the resolved configuration values recorded in the log header.
"""

import json
import sys
import time

import torch

from omnipatch.cli import resolve_config, build_workspace
from omnipatch.trainer import train


def main(config="configs/full_scale.yaml"):
    torch.set_num_threads(1)
    cfg = resolve_config(config)
    ws = build_workspace(cfg, need=("train",))
    t0 = time.perf_counter()
    patch, tlog = train(cfg.loss, cfg.schedule, ws.train, ws.vit, ws.cnn, eot=cfg.eot,
                        placement=cfg.placement, dry_run=True, cache_size=cfg.cache_size)
    print(json.dumps(tlog.header, indent=2, sort_keys=True))
    print(f"{len(tlog.epochs)} batches, {patch.step_count} steps, {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main(*sys.argv[1:])
