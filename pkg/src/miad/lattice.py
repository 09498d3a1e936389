"""Gaussian DDPM over the 3x3 lattice matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatticePosterior:
    mean: np.ndarray
    variance: float | np.ndarray


def lattice_forward_sample(L0, t, schedule, rng, noise=None):
    """Draw L_t ~ N(sqrt(abar_t) L0, (1 - abar_t) I).

    ``t`` may be an array of steps when ``L0`` is batched as (B, 3, 3).
    """
    L0 = np.asarray(L0, dtype=float)
    abar = schedule.alpha_bar_at(t)
    if np.any(np.asarray(t) < 1):
        raise ValueError("lattice_forward_sample needs t >= 1")
    abar = np.reshape(abar, np.shape(abar) + (1, 1))
    if noise is None:
        noise = rng.standard_normal(L0.shape)
    return np.sqrt(abar) * L0 + np.sqrt(1.0 - abar) * noise


def posterior_coefficients(t, schedule):
    """(coef on L0, coef on L_t, variance) of q(L_{t-1} | L_t, L0)."""
    t = np.asarray(t)
    if np.any(t < 2):
        raise ValueError("the lattice posterior is defined for t >= 2")
    beta = schedule.beta_at(t)
    abar = schedule.alpha_bar_at(t)
    abar_prev = schedule.alpha_bar_at(t - 1)
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = np.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar)
    var = beta * (1.0 - abar_prev) / (1.0 - abar)
    return c0, ct, var


def lattice_posterior(L_t, L0, t, schedule):
    c0, ct, var = posterior_coefficients(t, schedule)
    shape = np.shape(c0) + (1, 1)
    mean = np.reshape(c0, shape) * np.asarray(L0, float) + np.reshape(ct, shape) * np.asarray(L_t, float)
    return LatticePosterior(mean=mean, variance=var)


def lattice_loss(pred_mean, posterior, gamma=1.0):
    """KL between equal-variance Gaussians; works on arrays and autograd tensors.

    For a batch (B, 3, 3) the result has shape (B,).
    """
    diff = pred_mean - posterior.mean
    sq = (diff * diff).sum(axis=(-2, -1))
    return sq * (np.asarray(gamma, float) / (2.0 * np.asarray(posterior.variance, float)))


def backward_std(t, schedule):
    """Std of p(L_{t-1} | M_t); zero at the final step."""
    t = np.asarray(t)
    out = np.zeros(t.shape)
    later = t >= 2
    if np.any(later):
        out[later] = np.sqrt(posterior_coefficients(t[later], schedule)[2])
    return out


def lattice_backward_step(L_t, pred_mean, t, schedule, rng, noise=None):
    """Ancestral step L_{t-1} = pred_mean + sigma_t * eps (deterministic at t = 1).

    ``L_t`` is carried for signature symmetry with the other components; the
    model's mean already depends on it.
    """
    pred_mean = np.asarray(pred_mean, dtype=float)
    std = backward_std(np.asarray(t), schedule)
    if np.all(std == 0.0):
        return pred_mean.copy()
    if noise is None:
        noise = rng.standard_normal(pred_mean.shape)
    return pred_mean + np.reshape(std, np.shape(std) + (1, 1)) * noise
