"""Generation time of the mixture head against the iterative-head stub.

    python3 scripts/bench_speed.py --ckpt runs/synthetic/model.arnr --steps 1 10 50 100
"""
import argparse
import dataclasses
import json

import torch

from arinar.bench import speed_bench
from arinar.config import TrainConfig
from arinar.data import NormStats
from arinar.model import ModelConfig, init_params
from arinar.training import Checkpoint, load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", help="checkpoint to time (default: freshly initialized desk model)")
    ap.add_argument("--images", type=int, default=10)
    ap.add_argument("--steps", type=int, nargs="+", default=[1, 10, 50, 100])
    args = ap.parse_args()
    torch.set_num_threads(1)
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
    else:
        cfg = ModelConfig()
        ckpt = Checkpoint(cfg, TrainConfig(), init_params(cfg), NormStats.identity(cfg.D))
    print(f"{'steps':>6} {'s/img':>8} {'stub s/img':>11} {'ratio':>7} {'head us/feat':>13}")
    reports = []
    for k in args.steps:
        r = speed_bench(ckpt, args.images, k)
        reports.append(dataclasses.asdict(r))
        print(f"{k:6d} {r.seconds_per_image:8.3f} {r.stub_seconds_per_image:11.3f} {r.speedup_ratio:7.2f} "
              f"{r.inner_head_microseconds_per_feature:13.1f}", flush=True)
    print(json.dumps(reports[-1]["environment"]))


if __name__ == "__main__":
    main()
