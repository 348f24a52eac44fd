"""Tokenization and datasets.

Images become continuous token sequences by cutting them into non-overlapping
``P x P`` patches (raster order) and flattening each patch, so a 16x16
grayscale image with ``P=4`` gives 16 tokens of 16 features. Tokens are then
standardized per feature dimension. The synthetic autoregressive process has a
closed-form conditional entropy, which makes it the likelihood oracle for
training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import DATA, make_rng

MIN_NORM_STD = 1e-6


class ShapeError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass
class TokenDataset:
    """``tokens`` is ``[n, L, D]``; ``labels`` is ``[n]`` with ``num_classes`` the null class."""

    tokens: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.tokens.ndim != 3:
            raise ShapeError(f"tokens must be [n, L, D], got {self.tokens.shape}")
        if self.labels.shape != (self.tokens.shape[0],):
            raise ShapeError(f"labels must be [n], got {self.labels.shape} for {self.tokens.shape[0]} sequences")
        if not np.all(np.isfinite(self.tokens)):
            raise ShapeError("tokens must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ShapeError(f"labels must lie in [0, {self.num_classes}]")

    def __len__(self):
        return self.tokens.shape[0]

    def subset(self, idx) -> "TokenDataset":
        return TokenDataset(self.tokens[idx], self.labels[idx], self.num_classes)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("norm stats mean/std must be vectors of equal length")
        if np.any(self.std < MIN_NORM_STD):
            raise ShapeError(f"norm std entries must be >= {MIN_NORM_STD}")

    @classmethod
    def identity(cls, D: int) -> "NormStats":
        return cls(np.zeros(D), np.ones(D))


@dataclass
class SyntheticProcessSpec:
    num_classes: int = 2
    within_coef: list = field(default_factory=lambda: [0.5, -0.5])
    across_coef: list = field(default_factory=lambda: [0.3, 0.3])
    base_mean: list = field(default_factory=lambda: [1.0, -1.0])
    noise_std: float = 0.5

    def __post_init__(self):
        for name in ("within_coef", "across_coef", "base_mean"):
            if len(getattr(self, name)) != self.num_classes:
                raise ValueError(f"{name} needs one entry per class ({self.num_classes})")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if any(abs(a) >= 1 for a in self.within_coef) or any(abs(b) >= 1 for b in self.across_coef):
            raise ValueError("|within_coef| and |across_coef| must be < 1")


# -- patches ---------------------------------------------------------------

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[H, W, C]`` image to ``[L, P*P*C]`` tokens; patches in raster order."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise ShapeError(f"image must be [H, W, C], got {image.shape}")
    H, W, C = image.shape
    P = int(patch_size)
    if P <= 0 or H % P or W % P:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {P}")
    x = image.reshape(H // P, P, W // P, P, C).transpose(0, 2, 1, 3, 4)
    return x.reshape((H // P) * (W // P), P * P * C)


def unpatchify(tokens: np.ndarray, H: int, W: int, C: int, P: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or H % P or W % P or tokens.shape != ((H // P) * (W // P), P * P * C):
        raise ShapeError(f"tokens of shape {tokens.shape} do not tile a {H}x{W}x{C} image with P={P}")
    x = tokens.reshape(H // P, W // P, P, P, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H, W, C)


# -- normalization ---------------------------------------------------------

def fit_norm_stats(tokens) -> NormStats:
    """Per-dimension mean and (population) std over every token of the dataset."""
    tokens = np.asarray(tokens.tokens if isinstance(tokens, TokenDataset) else tokens, dtype=np.float64)
    if tokens.size == 0:
        raise EmptyInputError("cannot fit normalization stats on an empty dataset")
    flat = tokens.reshape(-1, tokens.shape[-1])
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    return NormStats(mean, np.maximum(std, MIN_NORM_STD))


def _check_dim(tokens, stats):
    if tokens.shape[-1] != stats.mean.shape[0]:
        raise ShapeError(f"token dim {tokens.shape[-1]} does not match stats dim {stats.mean.shape[0]}")


def normalize(tokens, stats: NormStats):
    tokens = np.asarray(tokens)
    _check_dim(tokens, stats)
    return (tokens - stats.mean) / stats.std


def denormalize(tokens, stats: NormStats):
    tokens = np.asarray(tokens)
    _check_dim(tokens, stats)
    return tokens * stats.std + stats.mean


# -- synthetic AR process --------------------------------------------------

def make_synthetic(spec: SyntheticProcessSpec, L: int, D: int, n: int, seed: int) -> TokenDataset:
    """Draw ``n`` sequences of the class-conditional linear-Gaussian process.

    Feature ``(t, i)`` is ``a_c * prev + b_c * f[t-1, i] + noise`` (plus
    ``mu_c`` at the very first feature), where ``prev`` is the previous
    feature in raster order across tokens. Sequence ``j`` uses its own stream
    ``(seed, DATA, j)``: one class draw, then ``L*D`` normals.
    """
    labels = np.empty(n, dtype=np.int32)
    eps = np.empty((n, L, D))
    for j in range(n):
        rng = make_rng(seed, DATA, j)
        labels[j] = rng.integers(spec.num_classes)
        eps[j] = rng.normal(0.0, spec.noise_std, size=(L, D))
    a = np.asarray(spec.within_coef, dtype=np.float64)[labels]
    b = np.asarray(spec.across_coef, dtype=np.float64)[labels]
    mu = np.asarray(spec.base_mean, dtype=np.float64)[labels]
    f = np.zeros((n, L, D))
    prev = np.zeros(n)
    for t in range(L):
        for i in range(D):
            above = f[:, t - 1, i] if t > 0 else 0.0
            start = mu if (t == 0 and i == 0) else 0.0
            f[:, t, i] = start + a * prev + b * above + eps[:, t, i]
            prev = f[:, t, i]
    return TokenDataset(f, labels, spec.num_classes)


def true_nll(spec: SyntheticProcessSpec) -> float:
    """Per-feature conditional entropy in nats: every conditional is N(., sigma^2)."""
    return 0.5 * math.log(2.0 * math.pi * math.e * spec.noise_std**2)


# -- shapes ----------------------------------------------------------------

SHAPE_CLASSES = ("disk", "square", "cross")
SHAPE_BACKGROUND = 0.15
SHAPE_FOREGROUND = 0.85
SHAPE_NOISE = 0.05


def _render(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        mask = dy * dy + dx * dx <= r * r
    elif kind == 1:
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif kind == 2:
        arm = max(r / 3.0, 1.0)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    else:
        raise ValueError(f"unknown shape class {kind}")
    return np.where(mask, SHAPE_FOREGROUND, SHAPE_BACKGROUND)


def make_shapes_dataset(num_images: int, image_size: int = 16, seed: int = 0, num_classes: int = 3):
    """Noisy grayscale disks, squares and crosses with random center and size.

    Returns ``(images [n, S, S, 1] in [0, 1], labels [n])``.
    """
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_CLASSES)}]")
    S = int(image_size)
    images = np.empty((num_images, S, S, 1))
    labels = np.empty(num_images, dtype=np.int32)
    for j in range(num_images):
        rng = make_rng(seed, DATA, j)
        c = int(rng.integers(num_classes))
        r = rng.uniform(0.32, 0.36) * S
        cy, cx = S / 2 + rng.uniform(-0.05, 0.05, size=2) * S
        img = _render(c, S, cy, cx, r) + rng.normal(0.0, SHAPE_NOISE, size=(S, S))
        images[j, :, :, 0] = np.clip(img, 0.0, 1.0)
        labels[j] = c
    return images, labels


def images_to_tokens(images: np.ndarray, patch_size: int) -> np.ndarray:
    return np.stack([patchify(im, patch_size) for im in images]) if len(images) else np.zeros((0, 0, 0))
