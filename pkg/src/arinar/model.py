"""Bi-level autoregressive transformer.

The outer layer is a causal transformer over tokens. Its input at position
``i`` is the class embedding (``i == 0``) or the embedding of token ``i-1``,
so output ``z_i`` only sees the class and tokens ``< i``. The inner layer is a
causal transformer over the scalar features of one token. Its input at
position ``j`` is a learned begin-of-token vector (``j == 0``) or the
embedding of feature ``j-1``; every block is conditioned on ``z`` through
AdaLN, and a linear head maps each position to ``3K`` mixture parameters.

Parameters live in a flat ``dict[str, Tensor]`` whose keys and shapes are
given by :func:`param_manifest`; that ordering is the checkpoint layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .rng import INIT, make_rng

LN_EPS = 1e-6
INIT_STD = 0.02
MLP_RATIO = 4


@dataclass
class ModelConfig:
    outer_blocks: int = 4
    inner_blocks: int = 1
    width: int = 64
    num_heads: int = 4
    K: int = 4
    L: int = 16
    D: int = 16
    num_classes: int = 2

    def __post_init__(self):
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} is not divisible by num_heads {self.num_heads}")
        for name in ("outer_blocks", "inner_blocks", "K", "L", "D", "num_classes", "width", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def paper(cls) -> "ModelConfig":
        """ImageNet-scale sizes: 24 outer blocks, 1 inner block, width 768, 256x16 tokens."""
        return cls(outer_blocks=24, inner_blocks=1, width=768, num_heads=12, K=4, L=256, D=16, num_classes=1000)

    @property
    def null_class(self) -> int:
        return self.num_classes


# -- parameter manifest ----------------------------------------------------

def _block_manifest(prefix: str, W: int, adaln: bool) -> list:
    H = MLP_RATIO * W
    entries = []
    if adaln:
        entries += [(f"{prefix}.adaln.weight", (4 * W, W)), (f"{prefix}.adaln.bias", (4 * W,))]
    else:
        entries += [(f"{prefix}.norm1.weight", (W,)), (f"{prefix}.norm1.bias", (W,))]
    entries += [
        (f"{prefix}.attn.qkv.weight", (3 * W, W)), (f"{prefix}.attn.qkv.bias", (3 * W,)),
        (f"{prefix}.attn.proj.weight", (W, W)), (f"{prefix}.attn.proj.bias", (W,)),
    ]
    if not adaln:
        entries += [(f"{prefix}.norm2.weight", (W,)), (f"{prefix}.norm2.bias", (W,))]
    entries += [
        (f"{prefix}.mlp.fc1.weight", (H, W)), (f"{prefix}.mlp.fc1.bias", (H,)),
        (f"{prefix}.mlp.fc2.weight", (W, H)), (f"{prefix}.mlp.fc2.bias", (W,)),
    ]
    return entries


def param_manifest(cfg: ModelConfig) -> list:
    """Ordered ``(name, shape)`` list of every learnable tensor."""
    W = cfg.width
    m = [
        ("outer.class_embed", (cfg.num_classes + 1, W)),
        ("outer.token_embed.weight", (W, cfg.D)),
        ("outer.token_embed.bias", (W,)),
        ("outer.pos_embed", (cfg.L, W)),
    ]
    for b in range(cfg.outer_blocks):
        m += _block_manifest(f"outer.blocks.{b}", W, adaln=False)
    m += [("outer.norm.weight", (W,)), ("outer.norm.bias", (W,))]
    m += [
        ("inner.bot", (W,)),
        ("inner.feature_embed.weight", (W,)),
        ("inner.feature_embed.bias", (W,)),
        ("inner.pos_embed", (cfg.D, W)),
    ]
    for b in range(cfg.inner_blocks):
        m += _block_manifest(f"inner.blocks.{b}", W, adaln=True)
    m += [
        ("inner.final_adaln.weight", (2 * W, W)),
        ("inner.final_adaln.bias", (2 * W,)),
        ("inner.head.weight", (3 * cfg.K, W)),
        ("inner.head.bias", (3 * cfg.K,)),
    ]
    return m


def _init_kind(name: str) -> str:
    if ".adaln." in name or name.startswith("inner.final_adaln."):
        return "zeros"
    if name.endswith(".bias"):
        return "zeros"
    if name.startswith("outer.norm") or ".norm1." in name or ".norm2." in name:
        return "ones"
    return "trunc_normal"


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict:
    """Documented initialization, drawn in manifest order from stream ``(seed, INIT)``."""
    rng = make_rng(seed, INIT)
    params = {}
    for name, shape in param_manifest(cfg):
        kind = _init_kind(name)
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = _trunc_normal(rng, shape, INIT_STD)
        params[name] = torch.tensor(arr, dtype=dtype)
    return params


def perturb_params(params: dict, scale: float, seed: int) -> dict:
    """Copy of ``params`` with i.i.d. N(0, scale^2) noise added to every entry.

    Moves the model off its symmetric initialization (zero AdaLN weights cut
    the gradient path into the outer layer) for gradient checks and tests.
    """
    rng = make_rng(seed, INIT, 1)
    return {k: v + torch.tensor(rng.normal(0.0, scale, size=tuple(v.shape)), dtype=v.dtype) for k, v in params.items()}


def count_parameters(params: dict) -> int:
    return int(sum(v.numel() for v in params.values()))


def check_params(params: dict, cfg: ModelConfig) -> None:
    manifest = param_manifest(cfg)
    names = [n for n, _ in manifest]
    if set(params) != set(names) or len(params) != len(names):
        missing = sorted(set(names) - set(params))
        extra = sorted(set(params) - set(names))
        raise KeyError(f"parameter set does not match manifest (missing={missing}, extra={extra})")
    for name, shape in manifest:
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")
        if not torch.isfinite(params[name]).all():
            raise ValueError(f"{name} contains non-finite values")


def cast_params(params: dict, dtype) -> dict:
    return {k: v.to(dtype) for k, v in params.items()}


# -- building blocks -------------------------------------------------------

def attention(q, k, v, num_heads: int, causal: bool = True):
    """Multi-head scaled dot-product attention over ``[..., seq, width]``."""
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[-1] % num_heads:
        raise ValueError(f"incompatible attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    *lead, S, W = q.shape
    T = k.shape[-2]
    dh = W // num_heads

    def heads(x, n):
        return x.reshape(*lead, n, num_heads, dh).transpose(-3, -2)

    scores = heads(q, S) @ heads(k, T).transpose(-2, -1) / math.sqrt(dh)
    if causal:
        mask = torch.ones(S, T, dtype=torch.bool).triu(1 + T - S)
        scores = scores.masked_fill(mask, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ heads(v, T)
    return out.transpose(-3, -2).reshape(*lead, S, W)


def layer_norm(h, weight=None, bias=None):
    return F.layer_norm(h, (h.shape[-1],), weight, bias, eps=LN_EPS)


def adaln_modulate(h, z, weight, bias):
    """``LN(h) * (1 + gamma(z)) + beta(z)`` with ``[beta; gamma] = weight @ z + bias``.

    ``h`` is ``[..., seq, W]`` and ``z`` is ``[..., W]``; the modulation is
    broadcast over positions.
    """
    beta, gamma = (z @ weight.T + bias).unsqueeze(-2).chunk(2, dim=-1)
    return layer_norm(h) * (1 + gamma) + beta


def _self_attention(p, prefix, x, num_heads):
    q, k, v = (x @ p[f"{prefix}.attn.qkv.weight"].T + p[f"{prefix}.attn.qkv.bias"]).chunk(3, dim=-1)
    out = attention(q, k, v, num_heads)
    return out @ p[f"{prefix}.attn.proj.weight"].T + p[f"{prefix}.attn.proj.bias"]


def _mlp(p, prefix, x):
    x = F.gelu(x @ p[f"{prefix}.mlp.fc1.weight"].T + p[f"{prefix}.mlp.fc1.bias"])
    return x @ p[f"{prefix}.mlp.fc2.weight"].T + p[f"{prefix}.mlp.fc2.bias"]


def _outer_block(p, prefix, h, num_heads):
    h = h + _self_attention(p, prefix, layer_norm(h, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"]), num_heads)
    h = h + _mlp(p, prefix, layer_norm(h, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"]))
    return h


def _inner_block(p, prefix, h, z, num_heads):
    W = h.shape[-1]
    mod_w, mod_b = p[f"{prefix}.adaln.weight"], p[f"{prefix}.adaln.bias"]
    h = h + _self_attention(p, prefix, adaln_modulate(h, z, mod_w[: 2 * W], mod_b[: 2 * W]), num_heads)
    h = h + _mlp(p, prefix, adaln_modulate(h, z, mod_w[2 * W:], mod_b[2 * W:]))
    return h


# -- forward passes --------------------------------------------------------

def outer_forward(params: dict, cfg: ModelConfig, tokens, labels):
    """Condition vectors for a batch of (prefix) token sequences.

    ``tokens`` is ``[B, m, D]`` with ``0 <= m <= L`` and ``labels`` is ``[B]``
    (the null class is ``cfg.num_classes``). Returns ``z`` of shape
    ``[B, min(m + 1, L), width]``; ``z[:, i]`` conditions token ``i``.
    """
    tokens = torch.as_tensor(tokens)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.D or tokens.shape[1] > cfg.L:
        raise ValueError(f"tokens must be [B, m<= {cfg.L}, {cfg.D}], got {tuple(tokens.shape)}")
    if labels.shape != tokens.shape[:1]:
        raise ValueError(f"labels must be [B], got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() > cfg.num_classes):
        raise ValueError(f"labels must lie in [0, {cfg.num_classes}]")
    p = params
    n = min(tokens.shape[1] + 1, cfg.L)
    cls = p["outer.class_embed"][labels].unsqueeze(1)
    prev = tokens[:, : n - 1].to(cls.dtype) @ p["outer.token_embed.weight"].T + p["outer.token_embed.bias"]
    h = torch.cat([cls, prev], dim=1) + p["outer.pos_embed"][:n]
    for b in range(cfg.outer_blocks):
        h = _outer_block(p, f"outer.blocks.{b}", h, cfg.num_heads)
    return layer_norm(h, p["outer.norm.weight"], p["outer.norm.bias"])


def inner_hidden(params: dict, cfg: ModelConfig, z, features):
    """Final (pre-head) inner hidden states, ``[N, min(m + 1, D), width]``."""
    p = params
    z = torch.as_tensor(z)
    features = torch.as_tensor(features)
    if z.ndim != 2 or z.shape[-1] != cfg.width:
        raise ValueError(f"z must be [N, {cfg.width}], got {tuple(z.shape)}")
    if features.ndim != 2 or features.shape[0] != z.shape[0] or features.shape[1] > cfg.D:
        raise ValueError(f"features must be [N, m<={cfg.D}], got {tuple(features.shape)}")
    n = min(features.shape[1] + 1, cfg.D)
    N = z.shape[0]
    bot = p["inner.bot"].expand(N, 1, cfg.width)
    emb = features[:, : n - 1].to(z.dtype).unsqueeze(-1) * p["inner.feature_embed.weight"] + p["inner.feature_embed.bias"]
    h = torch.cat([bot, emb], dim=1) + p["inner.pos_embed"][:n]
    for b in range(cfg.inner_blocks):
        h = _inner_block(p, f"inner.blocks.{b}", h, z, cfg.num_heads)
    return adaln_modulate(h, z, p["inner.final_adaln.weight"], p["inner.final_adaln.bias"])


def inner_forward(params: dict, cfg: ModelConfig, z, features):
    """Raw mixture parameters per feature position.

    ``z`` is ``[N, width]``, ``features`` is ``[N, m]`` (teacher-forced
    ``m = D`` or a sampling prefix ``m < D``). Returns ``[N, min(m + 1, D), 3K]``
    laid out as ``[logits | means | log_stds]``; position ``i`` parameterizes
    feature ``i``.
    """
    h = inner_hidden(params, cfg, z, features)
    return h @ params["inner.head.weight"].T + params["inner.head.bias"]


def split_raw(raw, K: int):
    """``[..., 3K]`` head output to ``(logits, means, log_stds)``."""
    return raw[..., :K], raw[..., K:2 * K], raw[..., 2 * K:]


def forward_teacher_forced(params: dict, cfg: ModelConfig, tokens, labels):
    """Raw head outputs ``[B, L, D, 3K]`` for full sequences."""
    tokens = torch.as_tensor(tokens)
    B = tokens.shape[0]
    z = outer_forward(params, cfg, tokens, labels)
    raw = inner_forward(params, cfg, z.reshape(B * cfg.L, cfg.width), tokens.reshape(B * cfg.L, cfg.D))
    return raw.reshape(B, cfg.L, cfg.D, 3 * cfg.K)
