"""One-dimensional Gaussian mixtures: the per-feature output distribution.

The inner transformer emits ``3K`` numbers per feature, laid out as
``[weight_logits (K), means (K), log_stds (K)]``. :func:`gmm_from_raw` turns
them into a :class:`Gmm1D`; the rest of the module evaluates, tempers and
samples those mixtures, including classifier-free guided sampling on a grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0
MIN_STD = 1e-6

GRID_POINTS = 4096
GRID_HALF_WIDTH = 8.0  # in units of the largest std
LOG_DENSITY_CLAMP = 30.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ParameterError(ValueError):
    """Mixture parameters are non-finite or violate the Gmm1D invariants."""


class TemperatureError(ValueError):
    pass


class DegenerateGuidanceError(RuntimeError):
    """Guided density vanished (or blew up) over the whole sampling grid."""


@dataclass(frozen=True)
class RawGmmOutput:
    weight_logits: np.ndarray
    means: np.ndarray
    log_stds: np.ndarray

    @classmethod
    def from_vector(cls, raw) -> "RawGmmOutput":
        """Split a flat head output of length ``3K``."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 1 or raw.size % 3 != 0 or raw.size == 0:
            raise ParameterError(f"head output must be a vector of length 3K, got shape {raw.shape}")
        k = raw.size // 3
        return cls(raw[:k], raw[k:2 * k], raw[2 * k:])


@dataclass(frozen=True)
class Gmm1D:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if not (w.ndim == m.ndim == s.ndim == 1) or not (w.size == m.size == s.size) or w.size == 0:
            raise ParameterError(
                f"weights/means/stds must be 1-D with equal length K >= 1, got {w.shape}, {m.shape}, {s.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise ParameterError("mixture parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError(f"weights must be a probability vector, got {w}")
        if np.any(s < MIN_STD):
            raise ParameterError(f"stds must be >= {MIN_STD}, got {s}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @classmethod
    def _trusted(cls, weights: np.ndarray, means: np.ndarray, stds: np.ndarray) -> "Gmm1D":
        # float64 arrays that already satisfy the invariants; skips the checks on the sampling hot path
        g = object.__new__(cls)
        object.__setattr__(g, "weights", weights)
        object.__setattr__(g, "means", means)
        object.__setattr__(g, "stds", stds)
        return g

    @property
    def K(self) -> int:
        return self.weights.size

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def variance(self) -> float:
        mu = self.mean()
        return float(np.dot(self.weights, self.stds**2 + self.means**2) - mu * mu)


@dataclass(frozen=True)
class GuidanceSpec:
    scale: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ParameterError(f"guidance scale must be >= 0, got {self.scale}")
        if not math.isfinite(self.temperature) or self.temperature <= 0:
            raise TemperatureError(f"temperature must be > 0, got {self.temperature}")


def gmm_from_raw(raw: RawGmmOutput) -> Gmm1D:
    logits = np.asarray(raw.weight_logits, dtype=np.float64)
    means = np.asarray(raw.means, dtype=np.float64)
    log_stds = np.asarray(raw.log_stds, dtype=np.float64)
    if not (logits.shape == means.shape == log_stds.shape) or logits.ndim != 1:
        raise ParameterError("raw head outputs must be three vectors of equal length")
    if not np.isfinite(logits.sum() + means.sum() + log_stds.sum()):
        raise ParameterError("raw head outputs contain non-finite values")
    shifted = np.exp(logits - logits.max())
    weights = shifted / shifted.sum()
    stds = np.maximum(np.exp(np.clip(log_stds, LOG_STD_MIN, LOG_STD_MAX)), MIN_STD)
    return Gmm1D._trusted(weights, means.copy(), stds)


def gmm_log_density(g: Gmm1D, x):
    """``log sum_k w_k N(x; mu_k, sigma_k^2)``, elementwise over ``x``."""
    x = np.asarray(x, dtype=np.float64)
    z = (x[..., None] - g.means) / g.stds
    with np.errstate(divide="ignore"):
        log_terms = np.log(g.weights) - 0.5 * z * z - np.log(g.stds) - _HALF_LOG_2PI
    top = np.max(log_terms, axis=-1, keepdims=True)
    out = top[..., 0] + np.log(np.sum(np.exp(log_terms - top), axis=-1))
    return out if out.ndim else float(out)


def apply_temperature(g: Gmm1D, t: float) -> Gmm1D:
    """Divide every component std by ``t`` (t > 1 sharpens, t < 1 flattens)."""
    if not math.isfinite(t) or t <= 0:
        raise TemperatureError(f"temperature must be > 0, got {t}")
    if t == 1.0:
        return g
    return Gmm1D(g.weights, g.means, np.maximum(g.stds / t, MIN_STD))


def sample_gmm(g: Gmm1D, rng: np.random.Generator, size=None):
    """Ancestral draw: component from the weights, then a normal draw.

    One uniform is consumed for the component and one standard normal for the
    value, per sample, in that order.
    """
    n = 1 if size is None else int(size)
    u = rng.random(n)
    cdf = np.cumsum(g.weights)
    k = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), g.K - 1)
    x = g.means[k] + g.stds[k] * rng.standard_normal(n)
    return float(x[0]) if size is None else x


def guidance_grid(g_cond: Gmm1D, g_uncond: Gmm1D) -> np.ndarray:
    lo = min(g_cond.means.min(), g_uncond.means.min())
    hi = max(g_cond.means.max(), g_uncond.means.max())
    spread = GRID_HALF_WIDTH * max(g_cond.stds.max(), g_uncond.stds.max())
    return np.linspace(lo - spread, hi + spread, GRID_POINTS)


def guided_density(g_cond: Gmm1D, g_uncond: Gmm1D, spec: GuidanceSpec):
    """Grid and normalized density of ``p_c^(1+w) p_u^(-w)`` after tempering both.

    Returns ``(grid, pdf, cdf)``; ``pdf`` integrates to one under the
    trapezoidal rule and ``cdf`` is its running trapezoidal integral.
    """
    gc = apply_temperature(g_cond, spec.temperature)
    gu = apply_temperature(g_uncond, spec.temperature)
    grid = guidance_grid(gc, gu)
    w = spec.scale
    log_p = (1.0 + w) * gmm_log_density(gc, grid) - w * gmm_log_density(gu, grid)
    if not np.any(np.isfinite(log_p)):
        raise DegenerateGuidanceError("guided log-density is non-finite over the whole grid")
    log_p = np.clip(log_p - np.max(log_p), -LOG_DENSITY_CLAMP, LOG_DENSITY_CLAMP)
    pdf = np.exp(log_p)
    dx = np.diff(grid)
    pieces = 0.5 * (pdf[1:] + pdf[:-1]) * dx
    total = pieces.sum()
    if not math.isfinite(total) or total <= 0:
        raise DegenerateGuidanceError(f"guided density integrates to {total}")
    running = np.cumsum(pieces)
    cdf = np.concatenate([[0.0], running / running[-1]])
    return grid, pdf / total, cdf


def cfg_guided_sample(g_cond: Gmm1D, g_uncond: Gmm1D, spec: GuidanceSpec,
                      rng: np.random.Generator, size=None):
    """Sample from the tempered, guided density ``p_c^(1+w) p_u^(-w)``.

    With ``w == 0`` this is exactly :func:`sample_gmm` on the tempered
    conditional. Otherwise the density is gridded and inverted: the CDF is
    piecewise linear in the trapezoid sense, and we interpolate linearly.
    """
    if spec.scale == 0.0:
        return sample_gmm(apply_temperature(g_cond, spec.temperature), rng, size)
    grid, _, cdf = guided_density(g_cond, g_uncond, spec)
    n = 1 if size is None else int(size)
    x = np.interp(rng.random(n), cdf, grid)
    return float(x[0]) if size is None else x
