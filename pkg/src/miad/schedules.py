"""Per-step noise tables for the lattice, coordinate and atom-type diffusions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    # cosine alpha-bar for the lattice
    cosine_offset: float = 0.008
    max_beta: float = 0.999
    # geometric sigma for coordinates: sigma_t = sigma_min * (sigma_max / sigma_min) ** (t / T)
    sigma_min: float = 0.005
    sigma_max: float = 0.6
    # linear mixing rates for atom types, expressed per unit of T
    q_beta_start: float = 0.1
    q_beta_end: float = 20.0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step ``t`` in ``1..T`` (use :meth:`index`)."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    q_beta: np.ndarray
    sigma_0: float
    config: ScheduleConfig = field(default_factory=ScheduleConfig)

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step t must lie in [1, {self.T}], got {t}")
        return t

    def beta_at(self, t):
        return self.beta[self._check_t(t) - 1]

    def alpha_bar_at(self, t):
        """Cumulative alpha-bar; ``t = 0`` gives 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"step t must lie in [0, {self.T}], got {t}")
        table = np.concatenate([[1.0], self.alpha_bar])
        return table[t]

    def sigma_at(self, t):
        """Coordinate noise scale; ``t = 0`` gives sigma_min."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"step t must lie in [0, {self.T}], got {t}")
        table = np.concatenate([[self.sigma_0], self.sigma])
        return table[t]

    def q_beta_at(self, t):
        return self.q_beta[self._check_t(t) - 1]

    def transition(self, t, n_classes):
        return d3pm_transition(float(self.q_beta_at(t)), n_classes)

    def cumulative_transition(self, t, n_classes):
        """Q-bar_t = Q_t ... Q_1; ``t = 0`` gives the identity."""
        if t < 0 or t > self.T:
            raise ValueError(f"step t must lie in [0, {self.T}], got {t}")
        keep = np.prod(1.0 - self.q_beta[:t])
        return d3pm_transition(1.0 - keep, n_classes)

    def coord_prior_tv(self, n_terms=50):
        """Total-variation distance of WN(0, sigma_T^2) on [0, 1) to uniform (Fourier series)."""
        s = self.sigma[-1]
        x = (np.arange(4096) + 0.5) / 4096
        k = np.arange(1, n_terms + 1)[:, None]
        dens = 1.0 + 2.0 * np.sum(np.exp(-2 * np.pi**2 * k**2 * s**2) * np.cos(2 * np.pi * k * x), axis=0)
        return 0.5 * float(np.mean(np.abs(dens - 1.0)))

    def type_prior_gap(self, n_classes):
        """Max-entry distance between Q-bar_T and the uniform matrix."""
        qbar = self.cumulative_transition(self.T, n_classes)
        return float(np.max(np.abs(qbar - 1.0 / n_classes)))


def cosine_alpha_bar(T, offset=0.008, max_beta=0.999):
    steps = np.arange(T + 1) / T
    f = np.cos((steps + offset) / (1 + offset) * np.pi / 2) ** 2
    beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    beta = np.maximum(beta, 1e-12)
    return beta, np.cumprod(1.0 - beta)


def make_schedule(T, config=None):
    """Tabulate beta / alpha-bar, sigma and the type mixing rates for ``T`` steps."""
    config = config or ScheduleConfig()
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    T = int(T)
    if not 0.0 <= config.cosine_offset < 1.0:
        raise ConfigError("cosine_offset must lie in [0, 1)")
    if not 0.0 < config.max_beta < 1.0:
        raise ConfigError("max_beta must lie in (0, 1)")
    if not 0.0 < config.sigma_min < config.sigma_max:
        raise ConfigError("need 0 < sigma_min < sigma_max")
    if not 0.0 < config.q_beta_start <= config.q_beta_end:
        raise ConfigError("need 0 < q_beta_start <= q_beta_end")

    beta, alpha_bar = cosine_alpha_bar(T, config.cosine_offset, config.max_beta)
    t = np.arange(1, T + 1)
    sigma = config.sigma_min * (config.sigma_max / config.sigma_min) ** (t / T)
    q_beta = np.minimum(np.linspace(config.q_beta_start / T, config.q_beta_end / T, T), 1.0)

    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha_bar=alpha_bar,
        sigma=sigma,
        q_beta=q_beta,
        sigma_0=config.sigma_min,
        config=config,
    )


def d3pm_transition(q_beta_t, K):
    """Uniform-mixing transition matrix; column j is the distribution of x_t given x_{t-1} = j."""
    if not 0.0 <= q_beta_t <= 1.0:
        raise ConfigError(f"q_beta_t must lie in [0, 1], got {q_beta_t}")
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    return (1.0 - q_beta_t) * np.eye(K) + q_beta_t * np.full((K, K), 1.0 / K)
