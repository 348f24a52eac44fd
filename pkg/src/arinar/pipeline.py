"""Glue between run configs, datasets and training."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from .config import ConfigError, DataConfig, RunConfig
from .data import (NormStats, TokenDataset, fit_norm_stats, images_to_tokens,
                   make_shapes_dataset, make_synthetic, normalize)
from .model import ModelConfig, init_params, perturb_params
from .training import Checkpoint, load_dataset, train


def build_dataset(data: DataConfig, model: ModelConfig, n: Optional[int] = None, seed: Optional[int] = None):
    """Raw f32 tokens plus metadata for the configured data source.

    ``n``/``seed`` override the config, e.g. to draw a held-out split.
    """
    n = data.n if n is None else n
    seed = data.seed if seed is None else seed
    if data.kind == "synthetic":
        spec = data.synthetic
        ds = make_synthetic(spec, model.L, model.D, n, seed)
        meta = {"kind": "synthetic"}
        num_classes = spec.num_classes
    else:
        images, labels = make_shapes_dataset(n, data.image_size, seed, data.num_classes)
        ds = TokenDataset(images_to_tokens(images, data.patch_size), labels, data.num_classes)
        meta = {"kind": "shapes",
                "image": {"H": data.image_size, "W": data.image_size, "C": 1, "P": data.patch_size}}
        num_classes = data.num_classes
    if num_classes != model.num_classes:
        raise ConfigError(f"data has {num_classes} classes but model.num_classes={model.num_classes}")
    if ds.tokens.shape[1:] != (model.L, model.D):
        raise ConfigError(f"data tokens {ds.tokens.shape[1:]} do not match model (L={model.L}, D={model.D})")
    return TokenDataset(ds.tokens.astype(np.float32), ds.labels, num_classes), meta


def norm_stats_for(dataset: TokenDataset, meta: dict) -> NormStats:
    """Images get per-dimension standardization; synthetic tokens are already in model units."""
    if meta.get("kind") == "shapes":
        return fit_norm_stats(dataset)
    return NormStats.identity(dataset.tokens.shape[-1])


def run_training(cfg: RunConfig, log: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    if cfg.paths.data:
        dataset, meta = load_dataset(cfg.paths.data)
    else:
        dataset, meta = build_dataset(cfg.data, cfg.model)
    stats = norm_stats_for(dataset, meta)
    return train(cfg.train, cfg.model, dataset, stats, log=log, meta=meta)


GRADCHECK_PERTURBATION = 0.05


def gradcheck_problem(cfg: RunConfig, n_sequences: int = 2):
    """Double-precision parameters and a small batch for a gradient check.

    Parameters are the documented initialization plus N(0, 0.05^2) noise so
    that no tensor sits at a symmetric point (zero AdaLN weights would leave
    the outer layer with exactly zero gradient).
    """
    dataset, meta = build_dataset(cfg.data, cfg.model, n=n_sequences)
    tokens = normalize(dataset.tokens.astype(np.float64), norm_stats_for(dataset, meta))
    params = perturb_params(init_params(cfg.model, cfg.train.seed, torch.float64),
                            GRADCHECK_PERTURBATION, cfg.train.seed)
    return params, tokens, dataset.labels
