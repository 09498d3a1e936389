"""Wrapped-normal diffusion of fractional coordinates on the flat 3-torus."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .crystal import wrap

LOSS_NORMS = ("unit", "inverse-expected-square")


@dataclass(frozen=True)
class WrappedScoreConfig:
    truncation_k: int = 5
    loss_norm: str = "inverse-expected-square"

    def __post_init__(self):
        if self.truncation_k < 1:
            raise ValueError("truncation_k must be >= 1")
        if self.loss_norm not in LOSS_NORMS:
            raise ValueError(f"loss_norm must be one of {LOSS_NORMS}")


def signed_wrapped_diff(x, y):
    """x - y folded into (-0.5, 0.5]; an exact half period maps to +0.5."""
    return 0.5 - wrap(0.5 - (np.asarray(x, float) - np.asarray(y, float)))


def _series(d, sigma, K):
    d = np.asarray(d, float)
    sigma = np.asarray(sigma, float)
    shifts = np.arange(-K, K + 1, dtype=float)
    z = d[..., None] + shifts
    s2 = (sigma**2)[..., None] if sigma.ndim else sigma**2
    logw = -(z * z) / (2.0 * s2)
    return z, s2, logw


def wn_log_density(d, sigma, K=5):
    """log of the truncated wrapped-normal density at offset ``d``."""
    _, _, logw = _series(d, sigma, K)
    m = logw.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logw - m).sum(axis=-1))
    return lse - np.log(np.sqrt(2.0 * np.pi) * np.asarray(sigma, float))


def wn_score(d, sigma, K=5):
    """d/dx log WN(x | 0, sigma^2) evaluated at wrapped offset ``d``."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    z, s2, logw = _series(d, sigma, K)
    w = np.exp(logw - logw.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return np.sum(w * (-z / s2), axis=-1)


def wn_forward_sample(F0, sigma_t, rng, noise=None):
    F0 = np.asarray(F0, dtype=float)
    if noise is None:
        noise = rng.standard_normal(F0.shape)
    return wrap(F0 + np.asarray(sigma_t, float) * noise)


def wn_conditional_score(F_t, F0, sigma_t, cfg=None):
    """Score of q(F_t | F0) with respect to F_t, entry by entry."""
    cfg = cfg or WrappedScoreConfig()
    sigma_t = np.asarray(sigma_t, float)
    if np.any(sigma_t <= 0):
        raise ValueError("sigma_t must be positive")
    d = signed_wrapped_diff(F_t, F0)
    return wn_score(d, np.broadcast_to(sigma_t, d.shape), cfg.truncation_k)


@lru_cache(maxsize=4096)
def _expected_sq_score(sigma, K, n_nodes):
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    d = 0.5 - wrap(0.5 - sigma * x)
    return float(np.sum(w * wn_score(d, sigma, K) ** 2))


def expected_sq_score(sigma, K=5, n_nodes=200):
    """E[score^2] per coordinate under WN(0, sigma^2), by Gauss-Hermite quadrature."""
    sigma = np.asarray(sigma, float)
    flat = [_expected_sq_score(float(s), int(K), int(n_nodes)) for s in sigma.ravel()]
    return np.reshape(flat, sigma.shape)


def loss_weight(sigma, cfg=None):
    cfg = cfg or WrappedScoreConfig()
    if cfg.loss_norm == "unit":
        return np.ones(np.shape(sigma))
    return 1.0 / expected_sq_score(sigma, cfg.truncation_k)


def _row_weights(mask, shape):
    mask = np.asarray(mask)
    if mask.dtype == bool and mask.shape == shape:
        return mask.astype(float)
    out = np.zeros(shape)
    if len(shape) != 1:
        raise ValueError("index-set masks are only accepted for a single crystal")
    out[mask.astype(int)] = 1.0
    return out


def masked_coord_loss(pred_score, target_score, mask, lambda_t=1.0):
    """lambda_t * sum over masked rows of the squared score error.

    ``mask`` is either an index set (single crystal) or a boolean array
    matching the leading dimensions. Works on arrays and autograd tensors;
    a batch (B, N, 3) yields shape (B,).
    """
    rows = tuple(np.shape(target_score)[:-1])
    weights = _row_weights(mask, rows)
    diff = pred_score - target_score
    per_row = (diff * diff).sum(axis=-1)
    return (per_row * weights).sum(axis=-1) * np.asarray(lambda_t, float)


def coord_backward_step(F_t, pred_score, t, schedule, rng, noise=None):
    """F_{t-1} = wrap(F_t + (s_t^2 - s_{t-1}^2) score + sqrt(s_{t-1}^2 (s_t^2 - s_{t-1}^2) / s_t^2) eps)."""
    F_t = np.asarray(F_t, dtype=float)
    s_t = schedule.sigma_at(t)
    s_prev = schedule.sigma_at(np.asarray(t) - 1)
    return coord_update(F_t, pred_score, s_t, s_prev, rng, noise)


def coord_update(F_t, pred_score, sigma_t, sigma_prev, rng, noise=None):
    sigma_t = np.asarray(sigma_t, float)
    sigma_prev = np.asarray(sigma_prev, float)
    if sigma_t.ndim:
        sigma_t = sigma_t.reshape(sigma_t.shape + (1, 1))
        sigma_prev = sigma_prev.reshape(sigma_prev.shape + (1, 1))
    gap = sigma_t**2 - sigma_prev**2
    b = gap
    c = np.sqrt(np.maximum(sigma_prev**2 * gap / sigma_t**2, 0.0))
    if noise is None:
        noise = rng.standard_normal(np.shape(F_t))
    return wrap(F_t + b * np.asarray(pred_score, float) + c * noise)
