"""Bi-level ancestral sampling.

For each token the outer layer is run on the tokens generated so far (once
with the class label and, when guidance is on, once with the null class).
The inner layer then produces the token one feature at a time: each step
predicts a mixture for the next feature, which is tempered, optionally
guided against the unconditional mixture, sampled, and appended to the
prefix.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from typing import Optional

import numpy as np
import torch

from .config import SamplerConfig, to_dict
from .data import denormalize, unpatchify
from .gmm import Gmm1D, GuidanceSpec, RawGmmOutput, cfg_guided_sample, gmm_from_raw
from .model import ModelConfig, inner_forward, outer_forward
from .ppm import tile, write_ppm
from .rng import SAMPLE, make_rng
from .training import Checkpoint, checkpoint_bytes, load_checkpoint


def _check_sampler(cfg: ModelConfig, sampler: SamplerConfig):
    if not 0 <= sampler.class_label < cfg.num_classes:
        raise ValueError(f"class_label must lie in [0, {cfg.num_classes}), got {sampler.class_label}")


def next_feature_gmm(params: dict, cfg: ModelConfig, z, prefix) -> Gmm1D:
    """Mixture for feature ``len(prefix)`` of a token conditioned on ``z``."""
    dtype = z.dtype
    feats = torch.as_tensor(np.asarray(prefix, dtype=np.float64), dtype=dtype).reshape(1, -1)
    raw = inner_forward(params, cfg, z.reshape(1, -1), feats)[0, -1]
    return gmm_from_raw(RawGmmOutput.from_vector(raw.double().numpy()))


@torch.no_grad()
def generate_token(params: dict, cfg: ModelConfig, z_cond, z_uncond, sampler: SamplerConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """Sample one token (``D`` features) given its condition vector(s)."""
    spec = GuidanceSpec(sampler.cfg_scale, sampler.temperature)
    guided = spec.scale > 0
    if guided and z_uncond is None:
        raise ValueError("cfg_scale > 0 needs an unconditional condition vector")
    token = np.zeros(cfg.D)
    for i in range(cfg.D):
        g_cond = next_feature_gmm(params, cfg, z_cond, token[:i])
        g_uncond = next_feature_gmm(params, cfg, z_uncond, token[:i]) if guided else g_cond
        token[i] = cfg_guided_sample(g_cond, g_uncond, spec, rng)
    return token


@torch.no_grad()
def generate_sequence(params: dict, cfg: ModelConfig, sampler: SamplerConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Sample a full ``[L, D]`` token sequence (model units) for ``sampler.class_label``."""
    _check_sampler(cfg, sampler)
    dtype = next(iter(params.values())).dtype
    guided = sampler.cfg_scale > 0
    tokens = np.zeros((cfg.L, cfg.D))
    cond = torch.tensor([sampler.class_label])
    null = torch.tensor([cfg.null_class])
    for t in range(cfg.L):
        prefix = torch.as_tensor(tokens[None, :t], dtype=dtype)
        z_cond = outer_forward(params, cfg, prefix, cond)[0, -1]
        z_uncond = outer_forward(params, cfg, prefix, null)[0, -1] if guided else None
        tokens[t] = generate_token(params, cfg, z_cond, z_uncond, sampler, rng)
    return tokens


def image_geometry(ckpt: Checkpoint) -> tuple:
    """``(H, W, C, P)`` from checkpoint metadata, else square grayscale patches."""
    geo = ckpt.meta.get("image")
    if geo:
        return int(geo["H"]), int(geo["W"]), int(geo["C"]), int(geo["P"])
    cfg = ckpt.model_cfg
    P, side = math.isqrt(cfg.D), math.isqrt(cfg.L)
    if P * P != cfg.D or side * side != cfg.L:
        raise ValueError("checkpoint has no image geometry and tokens are not square grayscale patches")
    return side * P, side * P, 1, P


def tokens_to_image(tokens: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    H, W, C, P = image_geometry(ckpt)
    pixels = unpatchify(denormalize(tokens, ckpt.norm_stats), H, W, C, P)
    return np.clip(pixels, 0.0, 1.0)


def generate_images(ckpt, sampler: SamplerConfig, out_dir: Optional[str] = None) -> list:
    """Generate ``sampler.num_images`` images of ``sampler.class_label``.

    Image ``j`` uses stream ``(seed, SAMPLE, j)``. With ``out_dir`` set, writes
    ``sample_{class}_{j}.ppm`` per image, a tiled ``grid.ppm`` and a
    ``run.json`` sidecar recording the sampler config and checkpoint hash.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = ckpt.model_cfg
    _check_sampler(cfg, sampler)
    images = []
    for j in range(sampler.num_images):
        tokens = generate_sequence(ckpt.params, cfg, sampler, make_rng(sampler.seed, SAMPLE, j))
        images.append(tokens_to_image(tokens, ckpt))
    if out_dir is not None and images:
        os.makedirs(out_dir, exist_ok=True)
        files = []
        for j, im in enumerate(images):
            name = f"sample_{sampler.class_label}_{j}.ppm"
            write_ppm(os.path.join(out_dir, name), im)
            files.append(name)
        write_ppm(os.path.join(out_dir, "grid.ppm"), tile(images))
        files.append("grid.ppm")
        sidecar = {
            "sampler": to_dict(sampler),
            "checkpoint_sha256": hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest(),
            "files": files,
        }
        with open(os.path.join(out_dir, "run.json"), "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
    return images
