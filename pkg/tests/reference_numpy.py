"""Straight-line numpy forward pass and NLL, written without the package's code.

Reads weights by manifest name only; everything else (layer norm, GELU,
attention, AdaLN, mixture likelihood) is re-derived here with explicit loops
over heads and positions.
"""
import math

import numpy as np
from scipy.special import erf


def ln(x, w=None, b=None):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + 1e-6)
    if w is not None:
        y = y * w + b
    return y


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def causal_attention(x, P, prefix, heads):
    S, W = x.shape
    qkv = x @ P[f"{prefix}.attn.qkv.weight"].T + P[f"{prefix}.attn.qkv.bias"]
    q, k, v = qkv[:, :W], qkv[:, W:2 * W], qkv[:, 2 * W:]
    dh = W // heads
    out = np.zeros((S, W))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(S):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(i + 1)])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i, sl] = sum(a[j] * v[j, sl] for j in range(i + 1))
    return out @ P[f"{prefix}.attn.proj.weight"].T + P[f"{prefix}.attn.proj.bias"]


def mlp(x, P, prefix):
    hid = gelu(x @ P[f"{prefix}.mlp.fc1.weight"].T + P[f"{prefix}.mlp.fc1.bias"])
    return hid @ P[f"{prefix}.mlp.fc2.weight"].T + P[f"{prefix}.mlp.fc2.bias"]


def modulate(x, z, w, b):
    W = x.shape[-1]
    m = w @ z + b
    shift, scale = m[:W], m[W:]
    return ln(x) * (1.0 + scale) + shift


def sequence_nll(P, cfg, tokens, label):
    """Sum of per-feature NLL over one ``[L, D]`` sequence."""
    L, D, W, K = cfg.L, cfg.D, cfg.width, cfg.K
    rows = [P["outer.class_embed"][label]]
    for t in range(L - 1):
        rows.append(P["outer.token_embed.weight"] @ tokens[t] + P["outer.token_embed.bias"])
    h = np.array(rows) + P["outer.pos_embed"]
    for b in range(cfg.outer_blocks):
        pre = f"outer.blocks.{b}"
        h = h + causal_attention(ln(h, P[f"{pre}.norm1.weight"], P[f"{pre}.norm1.bias"]), P, pre, cfg.num_heads)
        h = h + mlp(ln(h, P[f"{pre}.norm2.weight"], P[f"{pre}.norm2.bias"]), P, pre)
    zs = ln(h, P["outer.norm.weight"], P["outer.norm.bias"])

    total = 0.0
    for t in range(L):
        z = zs[t]
        rows = [P["inner.bot"]]
        for i in range(D - 1):
            rows.append(tokens[t, i] * P["inner.feature_embed.weight"] + P["inner.feature_embed.bias"])
        g = np.array(rows) + P["inner.pos_embed"]
        for b in range(cfg.inner_blocks):
            pre = f"inner.blocks.{b}"
            mw, mb = P[f"{pre}.adaln.weight"], P[f"{pre}.adaln.bias"]
            g = g + causal_attention(modulate(g, z, mw[:2 * W], mb[:2 * W]), P, pre, cfg.num_heads)
            g = g + mlp(modulate(g, z, mw[2 * W:], mb[2 * W:]), P, pre)
        g = modulate(g, z, P["inner.final_adaln.weight"], P["inner.final_adaln.bias"])
        out = g @ P["inner.head.weight"].T + P["inner.head.bias"]
        for i in range(D):
            logits, means, log_stds = out[i, :K], out[i, K:2 * K], np.clip(out[i, 2 * K:], -7.0, 2.0)
            logw = logits - logits.max()
            logw = logw - math.log(np.exp(logw).sum())
            stds = np.exp(log_stds)
            comps = logw - 0.5 * ((tokens[t, i] - means) / stds) ** 2 - log_stds - 0.5 * math.log(2 * math.pi)
            top = comps.max()
            total -= top + math.log(np.exp(comps - top).sum())
    return total


def batch_nll(P, cfg, tokens, labels):
    P = {k: v.detach().double().numpy() for k, v in P.items()}
    tokens = np.asarray(tokens, dtype=np.float64)
    total = sum(sequence_nll(P, cfg, tokens[b], int(labels[b])) for b in range(len(tokens)))
    return total / (tokens.shape[0] * cfg.L * cfg.D)
