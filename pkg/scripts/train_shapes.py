"""Train on the shapes dataset, sample every class and score with pixel templates.

    python3 scripts/train_shapes.py --config configs/shapes_desk.json --out runs/shapes --per-class 100
"""
import argparse
import json
import os
import time

import numpy as np
import torch

from arinar.bench import classify_templates, fit_templates
from arinar.config import SamplerConfig, load_run_config
from arinar.data import make_shapes_dataset
from arinar.generation import generate_images
from arinar.pipeline import run_training
from arinar.ppm import tile, write_ppm
from arinar.training import load_checkpoint, save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/shapes_desk.json")
    ap.add_argument("--out", default="runs/shapes")
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--cfg-scale", type=float, nargs="*", default=None,
                    help="guidance scales to evaluate (default: the config's sampler)")
    ap.add_argument("--ckpt", help="skip training and evaluate this checkpoint")
    args = ap.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)
    cfg = load_run_config(args.config)

    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
    else:
        start = time.perf_counter()
        ckpt = run_training(cfg, lambda e: e["event"] == "epoch" and print(
            f"epoch {e['epoch']:3d}  loss {e['loss']:.4f}", flush=True))
        print(f"trained in {time.perf_counter() - start:.0f}s")
        save_checkpoint(ckpt, os.path.join(args.out, "model.arnr"))

    images, labels = make_shapes_dataset(cfg.data.n, cfg.data.image_size, cfg.data.seed, cfg.data.num_classes)
    templates = fit_templates(images, labels, cfg.data.num_classes)
    results = {}
    for w in args.cfg_scale if args.cfg_scale is not None else [cfg.sampler.cfg_scale]:
        rows, hits = [], []
        for c in range(cfg.data.num_classes):
            s = SamplerConfig(temperature=cfg.sampler.temperature, cfg_scale=w, seed=cfg.sampler.seed,
                              class_label=c, num_images=args.per_class)
            out = np.stack(generate_images(ckpt, s))
            hits.append(float((classify_templates(out, templates) == c).mean()))
            rows.append(tile(list(out[:10]), cols=10))
        write_ppm(os.path.join(args.out, f"classes_w{w:g}.ppm"), np.concatenate(rows, axis=0))
        results[str(w)] = {"per_class_accuracy": hits, "accuracy": float(np.mean(hits))}
        print(f"w={w:g}: accuracy {np.mean(hits):.1%} per class {hits}", flush=True)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
