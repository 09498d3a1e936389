"""scikit-learn style front end for the mirage atom diffusion model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import engine
from .crystal import Crystal, check_crystals
from .metrics import evaluation_report
from .network import ModelConfig
from .schedules import ScheduleConfig


def check_crystal_list(X):
    """Validate ``X`` as a non-empty sequence of :class:`Crystal`."""
    if isinstance(X, Crystal):
        X = [X]
    return check_crystals(X)


class MirageAtomDiffusion(BaseEstimator):
    """Joint lattice / coordinate / type diffusion with mirage infusion.

    ``fit`` trains on a list of :class:`~miad.crystal.Crystal`; ``sample``
    draws new crystals whose atom count is decided during generation.

    Parameters
    ----------
    n_m : int or None
        Size of the expanded domain. ``None`` uses the largest training crystal + 5.
    n_types : int
        Number of real species; type 0 is added for mirage atoms.
    T : int
        Number of diffusion steps.
    kappa_lattice, kappa_coords, kappa_types : float
        Loss-component weights.
    mirage_init : {"uniform", "center"}
        Where mirage atoms are placed when a training crystal is infused.
    mask_mirage : bool
        Exclude mirage atoms from the coordinate loss.
    schedule : dict or ScheduleConfig or None
        Noise-schedule overrides.
    """

    def __init__(
        self,
        n_m=None,
        n_types=100,
        T=100,
        kappa_lattice=1.0,
        kappa_coords=1.0,
        kappa_types=1.0,
        hidden_dim=64,
        n_layers=3,
        n_freqs=16,
        batch_size=32,
        epochs=10,
        max_steps=None,
        learning_rate=1e-3,
        mirage_init="uniform",
        mask_mirage=True,
        loss_norm="inverse-expected-square",
        truncation_k=5,
        schedule=None,
        random_state=0,
    ):
        self.n_m = n_m
        self.n_types = n_types
        self.T = T
        self.kappa_lattice = kappa_lattice
        self.kappa_coords = kappa_coords
        self.kappa_types = kappa_types
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.n_freqs = n_freqs
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.mirage_init = mirage_init
        self.mask_mirage = mask_mirage
        self.loss_norm = loss_norm
        self.truncation_k = truncation_k
        self.schedule = schedule
        self.random_state = random_state

    # configuration -------------------------------------------------------------

    def _resolve_n_m(self, X):
        if self.n_m is not None:
            return int(self.n_m)
        return max(c.n_atoms for c in X) + 5

    def _configs(self, n_m):
        schedule = self.schedule
        if schedule is None:
            schedule = ScheduleConfig()
        elif isinstance(schedule, dict):
            schedule = ScheduleConfig(**schedule)
        seed = 0 if self.random_state is None else int(self.random_state)
        train = engine.TrainConfig(
            n_m=n_m,
            n_types=self.n_types,
            kappas=(self.kappa_lattice, self.kappa_coords, self.kappa_types),
            T=self.T,
            batch_size=self.batch_size,
            epochs=self.epochs,
            max_steps=self.max_steps,
            lr=self.learning_rate,
            seed=seed,
            mirage_init=self.mirage_init,
            mask_mirage=self.mask_mirage,
            loss_norm=self.loss_norm,
            truncation_k=self.truncation_k,
            schedule=schedule,
        )
        model = ModelConfig(
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            n_freqs=self.n_freqs,
            max_atoms=max(n_m, 1),
            init_seed=seed,
        )
        return train, model

    @classmethod
    def from_config(cls, run_config):
        """Build an estimator from a :class:`miad.io.RunConfig`."""
        return cls(**_kwargs(run_config.train, run_config.model, run_config.schedule))

    @classmethod
    def from_checkpoint(cls, model, state):
        """Wrap a (Model, TrainState) pair, e.g. from :func:`miad.io.load_checkpoint`."""
        t = model.config
        est = cls(**_kwargs(t, model.model_config, t.schedule))
        est.model_ = model
        est.state_ = state
        est.n_m_ = t.n_m
        est.history_ = []
        return est

    # fitting --------------------------------------------------------------------

    def _init_model(self, X):
        n_m = self._resolve_n_m(X)
        train, model = self._configs(n_m)
        self.model_ = engine.Model(train, model)
        self.state_ = self.model_.init_state()
        self.n_m_ = n_m
        self.history_ = []

    def fit(self, X, y=None, callback=None):
        """Train from scratch on the crystals in ``X``."""
        X = check_crystal_list(X)
        self._init_model(X)
        check_crystals(X, self.n_m_)
        self.state_, self.history_ = engine.train(X, self.model_, self.state_, callback=callback)
        return self

    def continue_fit(self, X, epochs=None, max_steps=None, callback=None):
        """Resume training from the current state (same data order and random streams)."""
        check_is_fitted(self, "state_")
        X = check_crystals(check_crystal_list(X), self.n_m_)
        self.state_, hist = engine.train(X, self.model_, self.state_, epochs, max_steps, callback)
        self.history_ = self.history_ + hist
        return self

    def partial_fit(self, X, y=None):
        """One optimizer step on the batch ``X``."""
        X = check_crystal_list(X)
        if not hasattr(self, "state_"):
            self._init_model(X)
        rng = engine.step_rng(self.model_.config.seed, self.state_.step)
        self.state_, bd = engine.train_step(self.state_, X, self.model_, rng)
        self.history_.append([bd])
        return self

    # inference ------------------------------------------------------------------

    @property
    def params_(self):
        check_is_fitted(self, "state_")
        return self.state_.params

    def loss_breakdown(self, X, random_state=0):
        """Loss components of ``X`` under a fixed corruption draw (no update)."""
        check_is_fitted(self, "state_")
        X = check_crystals(check_crystal_list(X), self.n_m_)
        return engine.evaluate_loss(self.state_.params, X, self.model_, np.random.default_rng(random_state))

    def score(self, X, y=None):
        """Negative total loss on ``X`` (higher is better)."""
        return -self.loss_breakdown(X).total

    def loss_balance(self):
        """Percentage shares (L, F, A) over the last logged epoch."""
        check_is_fitted(self, "state_")
        return engine.loss_balance_report(self.history_).shares

    def sample(self, n_samples=1, random_state=None):
        """Generate crystals. Returns ``(crystals, n_discarded)``."""
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before sample")
        seed = self.random_state if random_state is None else random_state
        return engine.sample(self.state_.params, int(n_samples), self.model_, int(seed or 0))

    def evaluate(self, n_samples, reference=None, random_state=None, **kw):
        """Sample and return the U&N report dictionary."""
        crystals, discards = self.sample(n_samples, random_state)
        return evaluation_report(crystals, reference, discards, **kw)


def _kwargs(t, m, schedule):
    return dict(
        n_m=t.n_m,
        n_types=t.n_types,
        T=t.T,
        kappa_lattice=t.kappas[0],
        kappa_coords=t.kappas[1],
        kappa_types=t.kappas[2],
        hidden_dim=m.hidden_dim,
        n_layers=m.n_layers,
        n_freqs=m.n_freqs,
        batch_size=t.batch_size,
        epochs=t.epochs,
        max_steps=t.max_steps,
        learning_rate=t.lr,
        mirage_init=t.mirage_init,
        mask_mirage=t.mask_mirage,
        loss_norm=t.loss_norm,
        truncation_k=t.truncation_k,
        schedule=schedule,
        random_state=t.seed,
    )
