"""D3PM over atom types, with class 0 reserved for mirage atoms.

All transition matrices are uniform-mixing, Q_t = (1 - b_t) I + b_t 11^T / K, so
every product of them stays in the family and is described by one "keep"
probability. Functions accept plain arrays and (for the loss) autograd tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .autograd import Tensor


class UnderflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TypeDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, float)
        if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("type probabilities must be non-negative and sum to 1")


def keep_prob(t, schedule):
    """Probability mass Q-bar_t leaves on the starting class (t = 0 gives 1)."""
    t = np.asarray(t)
    cum = np.concatenate([[1.0], np.cumprod(1.0 - schedule.q_beta)])
    return cum[t]


def onehot(a, K):
    a = np.asarray(a)
    if np.any(a < 0) or np.any(a >= K):
        raise IndexError(f"type index out of range for {K} classes")
    return np.eye(K)[a]


def sample_categorical(probs, rng=None, uniform=None):
    """Inverse-CDF draw along the last axis."""
    probs = np.asarray(probs, float)
    if uniform is None:
        uniform = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= (np.asarray(uniform) * cdf[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def forward_probs(a0, t, schedule, K):
    """Rows of Cat(Q-bar_t onehot(a0)); ``t`` broadcasts against ``a0``."""
    keep = np.asarray(keep_prob(t, schedule), float)
    keep = np.broadcast_to(keep, np.shape(a0))[..., None]
    return keep * onehot(a0, K) + (1.0 - keep) / K


def type_forward_sample(a0, t, schedule, rng, K, uniform=None):
    return sample_categorical(forward_probs(a0, t, schedule, K), rng, uniform)


def _posterior_factors(a_t, t, schedule, K):
    qb = np.broadcast_to(np.asarray(schedule.q_beta_at(t), float), np.shape(a_t))[..., None]
    keep_prev = np.broadcast_to(np.asarray(keep_prob(np.asarray(t) - 1, schedule), float), np.shape(a_t))[
        ..., None
    ]
    # Q_t^T onehot(a_t): likelihood of a_t given each x_{t-1}
    like = (1.0 - qb) * onehot(a_t, K) + qb / K
    return like, keep_prev


def type_posterior(a_t, a0_probs, t, schedule, K=None):
    """q(a_{t-1} | a_t, a0) for a hard or soft ``a0_probs`` (rows sum to 1)."""
    if np.any(np.asarray(t) < 2):
        raise ValueError("type_posterior is defined for t >= 2")
    a0_probs = np.asarray(a0_probs, float)
    K = K or a0_probs.shape[-1]
    like, keep_prev = _posterior_factors(a_t, t, schedule, K)
    prior = keep_prev * a0_probs + (1.0 - keep_prev) / K
    unnorm = like * prior
    z = unnorm.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise UnderflowError("posterior normalizer underflowed to zero")
    return unnorm / z


def _log_softmax(z):
    if isinstance(z, Tensor):
        return z.log_softmax(axis=-1)
    return log_softmax(np.asarray(z, float), axis=-1)


def _safe_log(x, support):
    # log(x) on the support, 0 elsewhere (where it is multiplied by a zero weight)
    if isinstance(x, Tensor):
        return (x * support + (1.0 - support)).log()
    return np.log(np.where(support > 0, x, 1.0))


def type_loss(pred_logits, a_t, a0, t, schedule, K=None):
    """Per-atom KL to the true posterior (t >= 2) or reconstruction CE (t = 1), summed over atoms.

    ``pred_logits`` has shape (..., N, K); ``t`` has the leading shape (...).
    Returns shape (...) (a scalar for a single crystal).
    """
    K = K or np.shape(pred_logits)[-1]
    a_t = np.asarray(a_t)
    a0 = np.asarray(a0)
    t_atoms = np.broadcast_to(np.asarray(t)[..., None], a_t.shape) if np.ndim(t) else np.full(a_t.shape, t)
    is_final = (t_atoms == 1).astype(float)
    t_safe = np.maximum(t_atoms, 2)

    logp0 = _log_softmax(pred_logits)
    target = onehot(a0, K)
    ce = -(logp0 * target).sum(axis=-1)

    q = type_posterior(a_t, target, t_safe, schedule, K)
    # at the final step the KL branch is discarded, but keep it finite: Q-bar_0 = I
    like, keep_prev = _posterior_factors(a_t, t_safe, schedule, K)
    keep_prev = np.where(is_final[..., None] > 0, 1.0, keep_prev)
    p0 = logp0.exp() if isinstance(logp0, Tensor) else np.exp(logp0)
    unnorm = p0 * (like * keep_prev) + like * (1.0 - keep_prev) / K
    support = (q > 0).astype(float)
    log_norm = unnorm.sum(axis=-1, keepdims=True).log() if isinstance(unnorm, Tensor) else np.log(
        unnorm.sum(axis=-1, keepdims=True)
    )
    logq = np.log(np.where(q > 0, q, 1.0))
    kl = (q * (logq - _safe_log(unnorm, support) + log_norm)).sum(axis=-1)

    per_atom = ce * is_final + kl * (1.0 - is_final)
    return per_atom.sum(axis=-1)


def type_backward_step(a_t, pred_logits, t, schedule, rng, K=None, uniform=None):
    """Sample a_{t-1} from the posterior under softmax(pred_logits); at t = 1 sample the prediction."""
    pred_logits = np.asarray(pred_logits, float)
    K = K or pred_logits.shape[-1]
    p0 = softmax(pred_logits, axis=-1)
    if np.all(np.asarray(t) == 1):
        probs = p0
    else:
        probs = type_posterior(a_t, p0, t, schedule, K)
    return sample_categorical(probs, rng, uniform)


def prior_kl(a0, schedule, K):
    """KL(q(a_T | a0) || uniform)."""
    p = forward_probs(a0, schedule.T, schedule, K)
    return np.sum(p * np.log(p * K), axis=-1)


def type_elbo_loss(a0, logits_fn, schedule, K):
    """Negative ELBO of a single type chain, by exact expectation over each a_t.

    ``logits_fn(a_t, t)`` returns the model's clean-type logits.
    """
    total = float(prior_kl(a0, schedule, K))
    for t in range(1, schedule.T + 1):
        marg = forward_probs(a0, t, schedule, K)
        for a_t in range(K):
            if marg[a_t] == 0:
                continue
            total += marg[a_t] * float(type_loss(logits_fn(a_t, t)[None, :], [a_t], [a0], t, schedule, K))
    return total
