"""Held-out likelihood, generation-speed benchmark and KS testing.

The speed benchmark compares the real sampler against an "iterative head"
stub: identical outer and inner transformer passes, but each per-feature
mixture draw is replaced by ``stub_steps`` passes of a width-matched residual
MLP, the way a diffusion head spends many network evaluations per draw.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import SamplerConfig
from .data import TokenDataset, normalize
from .model import ModelConfig, cast_params, inner_hidden, outer_forward
from .generation import generate_sequence, generate_token
from .rng import SAMPLE, make_rng
from .training import Checkpoint, load_checkpoint, nll_loss

KS_ALPHA = 0.01
KS_MIN_SAMPLES = 1000


@dataclass
class BenchReport:
    seconds_per_image: float
    inner_head_microseconds_per_feature: float
    stub_seconds_per_image: float
    speedup_ratio: float
    n_images: int
    stub_steps: int
    environment: dict = field(default_factory=dict)


def eval_nll(ckpt, dataset: TokenDataset, batch_size: int = 256) -> float:
    """Teacher-forced NLL (nats per feature) in double precision, no label dropout."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    params = cast_params(ckpt.params, torch.float64)
    tokens = normalize(np.asarray(dataset.tokens, dtype=np.float64), ckpt.norm_stats)
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = slice(start, start + batch_size)
            n = tokens[chunk].shape[0]
            total += nll_loss(params, ckpt.model_cfg, tokens[chunk], dataset.labels[chunk]).item() * n
    return total / len(dataset)


# -- iterative head stub ---------------------------------------------------

class IterativeHeadStub:
    """Width-matched residual MLP applied ``steps`` times per feature draw."""

    def __init__(self, width: int, seed: int = 0, dtype=torch.float32):
        rng = make_rng(seed, SAMPLE, 2**31)
        def w(*shape):
            return torch.tensor(rng.normal(0.0, 0.02, size=shape), dtype=dtype)
        self.fc1_w, self.fc1_b = w(width, width), torch.zeros(width, dtype=dtype)
        self.fc2_w, self.fc2_b = w(width, width), torch.zeros(width, dtype=dtype)
        self.readout = w(width)

    def __call__(self, h, steps: int, rng: np.random.Generator) -> float:
        x = h + torch.as_tensor(rng.standard_normal(h.shape[-1]), dtype=h.dtype)
        for _ in range(steps):
            x = x + F.gelu(x @ self.fc1_w.T + self.fc1_b + h) @ self.fc2_w.T + self.fc2_b
        return float(x @ self.readout)


@torch.no_grad()
def generate_sequence_stub(params: dict, cfg: ModelConfig, sampler: SamplerConfig,
                           rng: np.random.Generator, stub: IterativeHeadStub, steps: int) -> np.ndarray:
    dtype = next(iter(params.values())).dtype
    guided = sampler.cfg_scale > 0
    tokens = np.zeros((cfg.L, cfg.D))
    cond = torch.tensor([sampler.class_label])
    null = torch.tensor([cfg.null_class])
    for t in range(cfg.L):
        prefix = torch.as_tensor(tokens[None, :t], dtype=dtype)
        z = outer_forward(params, cfg, prefix, cond)[0, -1]
        if guided:
            outer_forward(params, cfg, prefix, null)
        for i in range(cfg.D):
            feats = torch.as_tensor(tokens[t, :i], dtype=dtype).reshape(1, -1)
            h = inner_hidden(params, cfg, z.reshape(1, -1), feats)[0, -1]
            tokens[t, i] = stub(h, steps, rng)
    return tokens


@torch.no_grad()
def _inner_head_seconds(params: dict, cfg: ModelConfig, sampler: SamplerConfig, n: int) -> float:
    """Time spent inside per-token feature sampling, fastest of ``n`` generations."""
    dtype = next(iter(params.values())).dtype
    guided = sampler.cfg_scale > 0
    cond = torch.tensor([sampler.class_label])
    null = torch.tensor([cfg.null_class])
    per_image = []
    for j in range(n):
        rng = make_rng(sampler.seed, SAMPLE, j)
        spent = 0.0
        tokens = np.zeros((cfg.L, cfg.D))
        for t in range(cfg.L):
            prefix = torch.as_tensor(tokens[None, :t], dtype=dtype)
            z_cond = outer_forward(params, cfg, prefix, cond)[0, -1]
            z_uncond = outer_forward(params, cfg, prefix, null)[0, -1] if guided else None
            start = time.perf_counter()
            tokens[t] = generate_token(params, cfg, z_cond, z_uncond, sampler, rng)
            spent += time.perf_counter() - start
        per_image.append(spent)
    return min(per_image)


def _timed(fn) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def speed_bench(ckpt, n_images: int = 10, stub_steps: int = 100,
                sampler: Optional[SamplerConfig] = None) -> BenchReport:
    """Time one-by-one generation with the mixture head and with the stub head.

    Reported times are the fastest of ``n_images`` generations per path: interference from
    other processes only ever adds time, so the minimum is the stable estimate of the cost.
    """
    if n_images < 10:
        raise ValueError("speed_bench needs n_images >= 10")
    if stub_steps < 1:
        raise ValueError("stub_steps must be >= 1")
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg, params = ckpt.model_cfg, ckpt.params
    sampler = sampler or SamplerConfig()
    dtype = next(iter(params.values())).dtype
    stub = IterativeHeadStub(cfg.width, sampler.seed, dtype)

    # warm up allocator and kernels before timing either path
    generate_sequence(params, cfg, sampler, make_rng(sampler.seed, SAMPLE, 0))
    generate_sequence_stub(params, cfg, sampler, make_rng(sampler.seed, SAMPLE, 0), stub, stub_steps)

    # interleave the two paths image by image so slow drift in machine speed hits both equally
    real_times, stub_times = [], []
    for j in range(n_images):
        real_times.append(_timed(lambda: generate_sequence(params, cfg, sampler, make_rng(sampler.seed, SAMPLE, j))))
        stub_times.append(_timed(lambda: generate_sequence_stub(
            params, cfg, sampler, make_rng(sampler.seed, SAMPLE, j), stub, stub_steps)))
    actual, stubbed = min(real_times), min(stub_times)
    inner = _inner_head_seconds(params, cfg, sampler, n_images)
    return BenchReport(
        seconds_per_image=actual,
        inner_head_microseconds_per_feature=inner / (cfg.L * cfg.D) * 1e6,
        stub_seconds_per_image=stubbed,
        speedup_ratio=stubbed / actual,
        n_images=n_images,
        stub_steps=stub_steps,
        environment={"threads": torch.get_num_threads(), "precision": str(dtype).replace("torch.", "")},
    )


# -- statistics ------------------------------------------------------------

def ks_critical_value(n: int, alpha: float = KS_ALPHA) -> float:
    """Asymptotic two-sided Kolmogorov critical value for ``n`` samples."""
    return math.sqrt(-0.5 * math.log(alpha / 2.0)) / math.sqrt(n)


def ks_test(samples, cdf: Callable, alpha: float = KS_ALPHA):
    """One-sample two-sided KS test. Returns ``(statistic, rejected)``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n < KS_MIN_SAMPLES:
        raise ValueError(f"ks_test needs at least {KS_MIN_SAMPLES} samples, got {n}")
    F_x = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    stat = float(max(np.max(i / n - F_x), np.max(F_x - (i - 1) / n)))
    return stat, stat > ks_critical_value(n, alpha)


# -- class-conditioning check ----------------------------------------------

def fit_templates(images, labels, num_classes: int) -> np.ndarray:
    """Per-class mean image, ``[C, ...]``."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    if missing:
        raise ValueError(f"no training images for classes {missing}")
    return np.stack([images[labels == c].mean(axis=0) for c in range(num_classes)])


def classify_templates(images, templates: np.ndarray) -> np.ndarray:
    """Nearest template in squared pixel distance."""
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    flat = templates.reshape(len(templates), -1)
    d = ((images[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)
