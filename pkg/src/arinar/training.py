"""NLL training of the bi-level model.

The loss is the mean negative log-likelihood (nats per feature) of every
feature of every token under the mixture the inner layer predicts for it,
teacher-forced at both levels. Gradients come from torch autograd and reach
the outer layer only through the condition vectors ``z``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import container
from .config import ConfigError, TrainConfig, from_dict, to_dict
from .data import NormStats, TokenDataset, normalize
from .gmm import LOG_STD_MAX, LOG_STD_MIN
from .model import (ModelConfig, check_params, count_parameters, forward_teacher_forced,
                    init_params, param_manifest, split_raw)
from .rng import DROPOUT, GENERATOR_NAME, GRADCHECK, SHUFFLE, make_rng

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    pass


# -- loss ------------------------------------------------------------------

def mixture_log_prob(raw, x, K: int):
    """Log-density of ``x`` (``[...]``) under head output ``raw`` (``[..., 3K]``)."""
    logits, means, log_stds = split_raw(raw, K)
    log_stds = log_stds.clamp(LOG_STD_MIN, LOG_STD_MAX)
    z = (x.unsqueeze(-1) - means) * torch.exp(-log_stds)
    comp = torch.log_softmax(logits, dim=-1) - 0.5 * z * z - log_stds - _HALF_LOG_2PI
    return torch.logsumexp(comp, dim=-1)


def drop_labels(labels, prob: float, null_class: int, rng: Optional[np.random.Generator]):
    """Replace each label by the null class independently with probability ``prob``."""
    labels = np.array(labels, dtype=np.int64)
    if prob > 0:
        if rng is None:
            raise ValueError("label dropout needs a random stream")
        labels[rng.random(labels.shape[0]) < prob] = null_class
    return labels


def nll_loss(params: dict, cfg: ModelConfig, tokens, labels, dropout_prob: float = 0.0,
             rng: Optional[np.random.Generator] = None):
    """Mean NLL in nats per feature over ``[B, L, D]`` tokens (a 0-d tensor)."""
    dtype = next(iter(params.values())).dtype
    tokens = torch.as_tensor(np.asarray(tokens), dtype=dtype)
    if tokens.ndim != 3 or tokens.shape[0] == 0:
        raise ValueError(f"need a non-empty [B, L, D] batch, got {tuple(tokens.shape)}")
    labels = drop_labels(labels, dropout_prob, cfg.null_class, rng)
    raw = forward_teacher_forced(params, cfg, tokens, torch.from_numpy(labels))
    loss = -mixture_log_prob(raw, tokens, cfg.K).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss {loss.item()} (raw head range [{raw.min().item():.3g}, {raw.max().item():.3g}])"
        )
    return loss


def compute_gradients(params: dict, cfg: ModelConfig, tokens, labels, dropout_prob: float = 0.0,
                      rng: Optional[np.random.Generator] = None):
    """``(loss, {name: d loss / d param})`` by reverse-mode autodiff."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = nll_loss(leaves, cfg, tokens, labels, dropout_prob, rng)
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        g = torch.zeros_like(leaves[name]) if g is None else g
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        out[name] = g.detach()
    return loss.detach(), out


def zero_gradient_tensors(grads: dict) -> list:
    """Names whose gradient is identically zero; empty means full coverage."""
    return [k for k, g in grads.items() if not torch.any(g != 0)]


def gradcheck(params: dict, cfg: ModelConfig, tokens, labels, epsilon: float = 1e-5,
              n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    Runs in double precision on a random subset of at least ``n_coords``
    coordinates containing at least one entry of every tensor. The error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-5, 1e-3], got {epsilon}")
    p64 = {k: v.detach().to(torch.float64).clone() for k, v in params.items()}
    tokens = np.asarray(tokens, dtype=np.float64)
    _, analytic = compute_gradients(p64, cfg, tokens, labels)

    rng = make_rng(seed, GRADCHECK)
    names = list(p64)
    coords = [(name, int(rng.integers(p64[name].numel()))) for name in names]
    sizes = np.array([p64[n].numel() for n in names], dtype=np.float64)
    while len(coords) < n_coords:
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        coords.append((name, int(rng.integers(p64[name].numel()))))

    worst = 0.0
    with torch.no_grad():
        for name, idx in coords:
            flat = p64[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + epsilon
            up = nll_loss(p64, cfg, tokens, labels).item()
            flat[idx] = orig - epsilon
            down = nll_loss(p64, cfg, tokens, labels).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic[name].view(-1)[idx].item()
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst


# -- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: torch.zeros_like(v) for k, v in params.items()},
                   {k: torch.zeros_like(v) for k, v in params.items()}, 0)


def adamw_update(state: OptimizerState, params: dict, grads: dict, cfg: TrainConfig,
                 lr: Optional[float] = None):
    """One bias-corrected AdamW step with decoupled weight decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    Updates ``state`` and ``params`` in place and returns both.
    """
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.adam_betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.adam_eps) + cfg.weight_decay * p
            p.sub_(lr * update)
    return state, params


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_epochs``, then constant."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.learning_rate * epoch / cfg.warmup_epochs
    return cfg.learning_rate


def clip_gradients(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict
    norm_stats: NormStats
    opt_state: Optional[OptimizerState] = None
    rng: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def checkpoint_entries(ckpt: Checkpoint) -> dict:
    entries = {
        "config.model": _json(to_dict(ckpt.model_cfg)),
        "config.train": _json(to_dict(ckpt.train_cfg)),
        "rng": _json(ckpt.rng),
        "meta": _json(ckpt.meta),
        "norm.mean": np.asarray(ckpt.norm_stats.mean, dtype=np.float64),
        "norm.std": np.asarray(ckpt.norm_stats.std, dtype=np.float64),
    }
    for name, _ in param_manifest(ckpt.model_cfg):
        entries[f"param.{name}"] = ckpt.params[name].detach().numpy()
    if ckpt.opt_state is not None:
        entries["opt.step"] = np.array(ckpt.opt_state.step, dtype=np.int32)
        for name, _ in param_manifest(ckpt.model_cfg):
            entries[f"opt.m.{name}"] = ckpt.opt_state.m[name].detach().numpy()
            entries[f"opt.v.{name}"] = ckpt.opt_state.v[name].detach().numpy()
    return entries


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return container.dumps(checkpoint_entries(ckpt))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    container.save(path, checkpoint_entries(ckpt))


def _entry(entries, name):
    if name not in entries:
        raise container.FormatError(f"missing entry {name!r}")
    return entries[name]


def _json_entry(entries, name):
    raw = _entry(entries, name)
    if not isinstance(raw, bytes):
        raise container.FormatError(f"entry {name!r} must be a bytes blob")
    try:
        value = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise container.FormatError(f"entry {name!r} is not valid JSON") from e
    if not isinstance(value, dict):
        raise container.FormatError(f"entry {name!r} must hold a JSON object")
    return value


def _tensor_entry(entries, name, shape):
    arr = _entry(entries, name)
    if not isinstance(arr, np.ndarray) or tuple(arr.shape) != tuple(shape):
        got = getattr(arr, "shape", type(arr).__name__)
        raise container.FormatError(f"entry {name!r}: expected shape {tuple(shape)}, got {got}")
    if arr.dtype not in (np.float32, np.float64):
        raise container.FormatError(f"entry {name!r}: expected a float tensor, got {arr.dtype}")
    return torch.from_numpy(arr)


def _step_entry(entries):
    arr = _entry(entries, "opt.step")
    if not isinstance(arr, np.ndarray) or arr.dtype != np.int32 or arr.shape != () or arr < 0:
        raise container.FormatError("entry 'opt.step' must be a non-negative i32 scalar")
    return int(arr)


def checkpoint_from_entries(entries: dict) -> Checkpoint:
    try:
        model_cfg = from_dict(ModelConfig, _json_entry(entries, "config.model"))
        train_cfg = from_dict(TrainConfig, _json_entry(entries, "config.train"))
    except ConfigError as e:
        raise container.FormatError(f"invalid embedded config: {e}") from e
    manifest = param_manifest(model_cfg)
    params = {name: _tensor_entry(entries, f"param.{name}", shape) for name, shape in manifest}
    try:
        norm = NormStats(_entry(entries, "norm.mean"), _entry(entries, "norm.std"))
    except ValueError as e:
        raise container.FormatError(f"invalid norm stats: {e}") from e
    opt = None
    if "opt.step" in entries:
        opt = OptimizerState(
            {name: _tensor_entry(entries, f"opt.m.{name}", shape) for name, shape in manifest},
            {name: _tensor_entry(entries, f"opt.v.{name}", shape) for name, shape in manifest},
            _step_entry(entries),
        )
    return Checkpoint(model_cfg, train_cfg, params, norm, opt,
                      _json_entry(entries, "rng"), _json_entry(entries, "meta"))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_entries(container.load(path))


def save_dataset(path, dataset: TokenDataset, meta: Optional[dict] = None) -> None:
    container.save(path, {
        "tokens": np.asarray(dataset.tokens, dtype=np.float32),
        "labels": np.asarray(dataset.labels, dtype=np.int32),
        "meta": _json({"num_classes": dataset.num_classes, **(meta or {})}),
    })


def load_dataset(path):
    """``(TokenDataset, meta)`` from a dataset container."""
    entries = container.load(path)
    meta = _json_entry(entries, "meta")
    tokens = _entry(entries, "tokens")
    labels = _entry(entries, "labels")
    if not isinstance(tokens, np.ndarray) or tokens.dtype != np.float32 or tokens.ndim != 3:
        raise container.FormatError("entry 'tokens' must be a rank-3 f32 array")
    if not isinstance(labels, np.ndarray) or labels.dtype != np.int32 or labels.ndim != 1:
        raise container.FormatError("entry 'labels' must be a rank-1 i32 array")
    try:
        return TokenDataset(tokens, labels, int(meta["num_classes"])), meta
    except (KeyError, ValueError) as e:
        raise container.FormatError(f"invalid dataset: {e}") from e


# -- training loop ---------------------------------------------------------

def train(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset: TokenDataset,
          norm_stats: Optional[NormStats] = None, log: Optional[Callable[[dict], None]] = None,
          meta: Optional[dict] = None) -> Checkpoint:
    """Train from the documented initialization and return the final checkpoint.

    ``dataset`` is in raw feature units; ``norm_stats`` (identity when
    omitted) maps it to model units and is stored in the checkpoint. All
    randomness is keyed on ``train_cfg.seed``: init, per-epoch shuffling and
    per-epoch label dropout each have their own stream.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if train_cfg.K != model_cfg.K:
        raise ConfigError(f"train K={train_cfg.K} disagrees with model K={model_cfg.K}")
    if dataset.tokens.shape[1:] != (model_cfg.L, model_cfg.D):
        raise ValueError(f"dataset tokens {dataset.tokens.shape[1:]} do not match model (L={model_cfg.L}, D={model_cfg.D})")
    norm_stats = norm_stats or NormStats.identity(model_cfg.D)
    dtype = getattr(torch, train_cfg.dtype)
    np_dtype = np.float32 if dtype == torch.float32 else np.float64
    tokens = np.asarray(normalize(dataset.tokens, norm_stats), dtype=np_dtype)
    labels = dataset.labels

    params = init_params(model_cfg, train_cfg.seed, dtype)
    state = OptimizerState.zeros_like(params)
    n = len(dataset)
    bs = train_cfg.batch_size
    batches = math.ceil(n / bs)
    step = 0
    for epoch in range(train_cfg.epochs):
        order = make_rng(train_cfg.seed, SHUFFLE, epoch).permutation(n)
        drop_rng = make_rng(train_cfg.seed, DROPOUT, epoch)
        running = 0.0
        for b in range(batches):
            idx = order[b * bs:(b + 1) * bs]
            lr = lr_at(epoch + b / batches, train_cfg)
            loss, grads = compute_gradients(params, model_cfg, tokens[idx], labels[idx],
                                            train_cfg.label_dropout_prob, drop_rng)
            if train_cfg.grad_clip is not None:
                clip_gradients(grads, train_cfg.grad_clip)
            adamw_update(state, params, grads, train_cfg, lr)
            step += 1
            running += loss.item()
            if log is not None and train_cfg.log_every and step % train_cfg.log_every == 0:
                log({"event": "step", "epoch": epoch, "step": step, "loss": loss.item(), "lr": lr})
        if log is not None:
            log({"event": "epoch", "epoch": epoch, "step": step, "loss": running / batches,
                 "lr": lr_at(epoch + 1, train_cfg)})
    check_params(params, model_cfg)
    rng_desc = {"generator": GENERATOR_NAME, "seed": train_cfg.seed,
                "streams": {"shuffle": SHUFFLE, "dropout": DROPOUT}, "epochs_done": train_cfg.epochs}
    full_meta = {"num_parameters": count_parameters(params), **(meta or {})}
    return Checkpoint(model_cfg, train_cfg, params, norm_stats, state, rng_desc, full_meta)
