"""Training (mirage infusion + joint corruption + weighted loss) and sampling."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import categorical as cat
from .crystal import MIRAGE, CrystalError, EmptyCrystalError, ExpandedCrystal, check_crystals, infuse, reduce
from .lattice import backward_std, lattice_forward_sample, lattice_loss, lattice_posterior
from .network import ModelConfig, ScoreNetwork
from .schedules import ScheduleConfig, make_schedule
from .torus import WrappedScoreConfig, coord_update, expected_sq_score, loss_weight, masked_coord_loss
from .torus import wn_conditional_score, wn_forward_sample

log = logging.getLogger(__name__)

MIRAGE_INITS = ("uniform", "center")


@dataclass
class TrainConfig:
    n_m: int = 25
    n_types: int = 100
    kappas: tuple = (1.0, 1.0, 1.0)
    T: int = 100
    batch_size: int = 32
    epochs: int = 10
    max_steps: int | None = None
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    mirage_init: str = "uniform"
    mask_mirage: bool = True
    loss_norm: str = "inverse-expected-square"
    truncation_k: int = 5
    report_interval: int = 1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        self.kappas = tuple(float(k) for k in self.kappas)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.kappas) != 3 or any(k < 0 for k in self.kappas):
            raise ValueError("kappas must be three non-negative weights")
        if self.mirage_init not in MIRAGE_INITS:
            raise ValueError(f"mirage_init must be one of {MIRAGE_INITS}")
        if self.n_m < 1 or self.n_types < 1:
            raise ValueError("n_m and n_types must be positive")
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)

    @property
    def n_classes(self):
        return self.n_types + 1

    @property
    def score_config(self):
        return WrappedScoreConfig(self.truncation_k, self.loss_norm)

    def to_dict(self):
        d = asdict(self)
        d["kappas"] = list(self.kappas)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass(frozen=True)
class LossBreakdown:
    """kappa-weighted loss components, averaged over a batch (or an epoch)."""

    lattice: float
    coords: float
    types: float

    @property
    def total(self):
        return self.lattice + self.coords + self.types

    @property
    def shares(self):
        total = self.total
        if total == 0:
            return (0.0, 0.0, 0.0)
        return tuple(100.0 * x / total for x in (self.lattice, self.coords, self.types))

    def to_dict(self):
        return {
            "lattice": self.lattice,
            "coords": self.coords,
            "types": self.types,
            "total": self.total,
            "shares": list(self.shares),
        }


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params):
    return AdamState({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_update(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1**step)
        vhat = v[k] / (1 - b2**step)
        new_params[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return new_params, AdamState(m, v, step)


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    step: int = 0
    epoch: int = 0


class Model:
    """Schedule, network and coordinate-loss tables derived from a config."""

    def __init__(self, config, model_config=None):
        self.config = config
        self.model_config = model_config or ModelConfig(max_atoms=max(config.n_m, 1))
        self.schedule = make_schedule(config.T, config.schedule)
        sig = self.schedule.sigma_at(np.arange(config.T + 1))
        self.lambdas = loss_weight(sig, config.score_config)
        self.score_scale = np.sqrt(expected_sq_score(sig, config.truncation_k))
        self.network = ScoreNetwork(self.model_config, config.n_classes, self.score_scale)

    def init_state(self):
        params = self.network.init_params(np.random.default_rng(self.model_config.init_seed))
        return TrainState(params, adam_init(params))


def step_rng(seed, step):
    return np.random.default_rng([int(seed), 1, int(step)])


def epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), 2, int(epoch)])


@dataclass
class CorruptedBatch:
    t: np.ndarray
    L0: np.ndarray
    L_t: np.ndarray
    F0: np.ndarray
    F_t: np.ndarray
    A0: np.ndarray
    A_t: np.ndarray
    coord_target: np.ndarray
    coord_mask: np.ndarray


def corrupt_batch(batch, model, rng):
    """Infuse mirage atoms and noise all three components (one step t per crystal)."""
    cfg, sched = model.config, model.schedule
    B = len(batch)
    t = rng.integers(1, cfg.T + 1, size=B)
    expanded = [infuse(c, cfg.n_m, rng, cfg.mirage_init) for c in batch]
    L0 = np.stack([e.lattice for e in expanded])
    F0 = np.stack([e.frac_coords for e in expanded])
    A0 = np.stack([e.atom_types for e in expanded])

    L_t = lattice_forward_sample(L0, t, sched, rng)
    sigma = sched.sigma_at(t)[:, None, None]
    F_t = wn_forward_sample(F0, sigma, rng)
    A_t = cat.type_forward_sample(A0, t[:, None], sched, rng, cfg.n_classes)
    target = wn_conditional_score(F_t, F0, sigma, cfg.score_config)
    mask = A0 != MIRAGE if cfg.mask_mirage else np.ones(A0.shape, dtype=bool)
    return CorruptedBatch(t, L0, L_t, F0, F_t, A0, A_t, target, mask)


def batch_losses(out, cb, model):
    """Per-crystal kappa-weighted components; ``out`` may hold arrays or tensors."""
    cfg, sched = model.config, model.schedule
    k1, k2, k3 = cfg.kappas
    t = cb.t

    later = (t >= 2).astype(float)
    t2 = np.maximum(t, 2)
    post = lattice_posterior(cb.L_t, cb.L0, t2, sched)
    l_lat = lattice_loss(out.lattice_mean, post) * later
    l_coord = masked_coord_loss(out.coord_scores, cb.coord_target, cb.coord_mask, model.lambdas[t])
    l_type = cat.type_loss(out.type_logits, cb.A_t, cb.A0, t, sched, cfg.n_classes)
    return l_lat * k1, l_coord * k2, l_type * k3


def _mean(x):
    return x.mean() if hasattr(x, "mean") else np.mean(x)


def _scalar(x):
    return float(np.asarray(getattr(x, "data", x)))


def train_step(state, batch, model, rng):
    """One Adam update on the joint loss. Returns (new state, LossBreakdown)."""
    cfg = model.config
    for i, c in enumerate(batch):
        if c.n_atoms > cfg.n_m:
            raise ValueError(f"crystal {i} in batch has {c.n_atoms} atoms > n_m={cfg.n_m}")
    cb = corrupt_batch(batch, model, rng)
    out = model.network.forward_tensors(state.params, cb.L_t, cb.F_t, cb.A_t, cb.t)
    lat, coord, typ = (_mean(x) for x in batch_losses(out, cb, model))
    total = lat + coord + typ
    grads = model.network.backward(total)
    params, adam = adam_update(state.params, grads, state.adam, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    breakdown = LossBreakdown(_scalar(lat), _scalar(coord), _scalar(typ))
    return TrainState(params, adam, state.step + 1, state.epoch), breakdown


def evaluate_loss(params, batch, model, rng):
    """Loss breakdown of ``batch`` without updating (fresh corruption from ``rng``)."""
    cb = corrupt_batch(batch, model, rng)
    out = model.network.forward(params, cb.L_t, cb.F_t, cb.A_t, cb.t)
    lat, coord, typ = (float(np.mean(x)) for x in batch_losses(out, cb, model))
    return LossBreakdown(lat, coord, typ)


def train(crystals, model, state=None, epochs=None, max_steps=None, callback=None):
    """Run epochs of shuffled minibatch training; returns (state, history).

    ``history`` is a list of per-epoch lists of LossBreakdown. Every random
    draw is derived from (seed, step) or (seed, epoch), so training resumed
    from a checkpoint continues exactly as an uninterrupted run would.
    """
    cfg = model.config
    crystals = check_crystals(crystals, cfg.n_m)
    state = state or model.init_state()
    epochs = cfg.epochs if epochs is None else epochs
    max_steps = cfg.max_steps if max_steps is None else max_steps
    history = []
    n_batches = int(np.ceil(len(crystals) / cfg.batch_size))
    while state.epoch < epochs:
        order = epoch_rng(cfg.seed, state.epoch).permutation(len(crystals))
        epoch_log = []
        # resume mid-epoch: skip batches already consumed
        start = state.step - state.epoch * n_batches if state.step > state.epoch * n_batches else 0
        for b in range(start, n_batches):
            if max_steps is not None and state.step >= max_steps:
                history.append(epoch_log)
                return state, history
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            state, bd = train_step(state, [crystals[i] for i in idx], model, step_rng(cfg.seed, state.step))
            epoch_log.append(bd)
            if callback is not None:
                callback(state, bd)
        history.append(epoch_log)
        if cfg.report_interval and (state.epoch + 1) % cfg.report_interval == 0:
            rep = loss_balance_report(history)
            log.info(
                "epoch %d step %d loss %.4f shares L-F-A %.1f-%.1f-%.1f",
                state.epoch + 1,
                state.step,
                rep.total,
                *rep.shares,
            )
        state.epoch += 1
    return state, history


def loss_balance_report(history):
    """Average LossBreakdown over the last logged epoch."""
    if history and isinstance(history[0], LossBreakdown):
        history = [history]
    epochs = [e for e in history if e]
    if not epochs:
        raise ValueError("loss history is empty")
    last = epochs[-1]
    return LossBreakdown(
        float(np.mean([b.lattice for b in last])),
        float(np.mean([b.coords for b in last])),
        float(np.mean([b.types for b in last])),
    )


# sampling -------------------------------------------------------------------


def sample_prior(count, n_m, n_classes, rng):
    """Initial expanded states: L ~ N(0, I), F ~ U[0,1)^3, A ~ Cat(1 / n_classes)."""
    L = rng.standard_normal((count, 3, 3))
    F = rng.random((count, n_m, 3))
    A = rng.integers(0, n_classes, size=(count, n_m))
    return L, F, A


def trajectory_seeds(seed, count):
    return np.random.SeedSequence([int(seed), 3]).spawn(count)


def _draw_trajectory_noise(seq, T, n_m, n_classes):
    rng = np.random.default_rng(seq)
    L = rng.standard_normal((3, 3))
    F = rng.random((n_m, 3))
    A = cat.sample_categorical(np.full((n_m, n_classes), 1.0 / n_classes), uniform=rng.random(n_m))
    noise_L = rng.standard_normal((T, 3, 3))
    noise_F = rng.standard_normal((T, n_m, 3))
    unif_A = rng.random((T, n_m))
    return L, F, A, noise_L, noise_F, unif_A


def sample_expanded(params, count, model, seed, chunk=128, return_trajectory=False):
    """Run the reverse process from the N_m-atom prior; returns expanded end states.

    Each trajectory owns a random stream spawned from ``seed``, so the result
    does not depend on how trajectories are grouped into chunks. A trajectory
    whose state stops being finite is returned as ``None``.
    """
    cfg, sched, net = model.config, model.schedule, model.network
    T, n_m, K = cfg.T, cfg.n_m, cfg.n_classes
    seqs = trajectory_seeds(seed, count)
    results = []
    traj_counts = []
    for lo in range(0, count, chunk):
        draws = [_draw_trajectory_noise(s, T, n_m, K) for s in seqs[lo : lo + chunk]]
        L = np.stack([d[0] for d in draws])
        F = np.stack([d[1] for d in draws])
        A = np.stack([d[2] for d in draws])
        nL = np.stack([d[3] for d in draws])
        nF = np.stack([d[4] for d in draws])
        uA = np.stack([d[5] for d in draws])
        diverged = np.zeros(L.shape[0], dtype=bool)
        counts = [(A != MIRAGE).sum(axis=1)]
        for t in range(T, 0, -1):
            with np.errstate(all="ignore"):
                out = net.forward(params, L, F, A, t)
            i = T - t
            std = backward_std(np.array([t]), sched)[0]
            L = out.lattice_mean + std * nL[:, i] if std > 0 else out.lattice_mean
            scores, logits = out.coord_scores, out.type_logits
            diverged |= ~(
                np.isfinite(L).all(axis=(1, 2)) & np.isfinite(scores).all(axis=(1, 2)) & np.isfinite(logits).all(axis=(1, 2))
            )
            if diverged.any():
                # keep the batch computable; these trajectories are dropped at the end
                L[diverged] = np.eye(3)
                scores = np.where(diverged[:, None, None], 0.0, scores)
                logits = np.where(diverged[:, None, None], 0.0, logits)
            F = coord_update(F, scores, sched.sigma_at(t), sched.sigma_at(t - 1), None, nF[:, i])
            A = cat.type_backward_step(A, logits, t, sched, None, K, uA[:, i])
            counts.append((A != MIRAGE).sum(axis=1))
        for b in range(L.shape[0]):
            results.append(None if diverged[b] else _expanded_or_none(L[b], F[b], A[b]))
        traj_counts.append(np.stack(counts, axis=1))
    if return_trajectory:
        return results, np.concatenate(traj_counts)
    return results


def _expanded_or_none(L, F, A):
    try:
        return ExpandedCrystal(L, F, A)
    except CrystalError as err:
        log.debug("discarding sample: %s", err)
        return None


def sample(params, count, model, seed, chunk=128):
    """Generate ``count`` crystals; all-mirage, diverged or degenerate outcomes are discarded and counted."""
    crystals, discards = [], 0
    for e in sample_expanded(params, count, model, seed, chunk):
        if e is None:
            discards += 1
            continue
        try:
            crystals.append(reduce(e))
        except EmptyCrystalError:
            discards += 1
        except ValueError as err:
            log.debug("discarding sample: %s", err)
            discards += 1
    return crystals, discards
