"""Self-checks: symmetry, oracle and gradient properties of a fresh build.

Each check returns a :class:`CheckResult`; ``run_all`` drives the
``miad verify`` command and the acceptance tests.
"""

from __future__ import annotations

import dataclasses
import itertools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax
from scipy.stats import ortho_group

from . import categorical as cat
from .crystal import Crystal, infuse, reduce, wrap
from .engine import Model, TrainConfig, batch_losses, corrupt_batch, sample_prior, step_rng, train, train_step
from .network import ModelConfig
from .schedules import d3pm_transition, make_schedule
from .torus import coord_backward_step, signed_wrapped_diff, wn_log_density, wn_score
from .toy import make_toy_dataset


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (limit {self.threshold:g}, {self.seconds:.1f}s)"


def _result(name, value, threshold, start, below=True):
    ok = value <= threshold if below else value >= threshold
    return CheckResult(name, bool(ok), float(value), threshold, time.perf_counter() - start)


def _toy_network(n_types=3, n_m=12, T=50, seed=0):
    model = Model(
        TrainConfig(n_m=n_m, n_types=n_types, T=T, seed=seed),
        ModelConfig(hidden_dim=32, n_layers=2, n_freqs=8, init_seed=seed),
    )
    params = model.network.init_params(np.random.default_rng(seed))
    # perturb the biases so no output is trivially symmetric
    rng = np.random.default_rng(seed + 1)
    for k, v in params.items():
        if v.ndim == 1:
            params[k] = v + 0.1 * rng.standard_normal(v.shape)
    return model, params


def _random_state(rng, n, n_classes):
    L = 4.0 * np.eye(3) + rng.standard_normal((3, 3))
    return L, rng.random((n, 3)), rng.integers(0, n_classes, n), int(rng.integers(1, 51))


# symmetry -------------------------------------------------------------------


def check_permutation(n_trials=100, seed=0):
    start = time.perf_counter()
    model, P = _toy_network()
    net, rng = model.network, np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        n = int(rng.integers(2, 13))
        L, F, A, t = _random_state(rng, n, net.n_classes)
        perm = rng.permutation(n)
        a, b = net.forward(P, L, F, A, t), net.forward(P, L, F[perm], A[perm], t)
        worst = max(
            worst,
            np.abs(b.coord_scores - a.coord_scores[perm]).max(),
            np.abs(b.type_logits - a.type_logits[perm]).max(),
            np.abs(b.lattice_mean - a.lattice_mean).max(),
        )
    return _result("permutation equivariance", worst, 1e-10, start)


def check_orthogonal(n_trials=100, seed=0):
    """Rows of L are basis vectors, so Q acts as L -> L Q^T."""
    start = time.perf_counter()
    model, P = _toy_network()
    net, rng = model.network, np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        L, F, A, t = _random_state(rng, int(rng.integers(2, 13)), net.n_classes)
        Q = ortho_group.rvs(3, random_state=rng)
        a, b = net.forward(P, L, F, A, t), net.forward(P, L @ Q.T, F, A, t)
        worst = max(
            worst,
            np.abs(b.lattice_mean - a.lattice_mean @ Q.T).max(),
            np.abs(b.coord_scores - a.coord_scores).max(),
            np.abs(b.type_logits - a.type_logits).max(),
        )
    return _result("O(3) lattice equivariance / invariance", worst, 1e-6, start)


def check_translation(n_trials=100, seed=0):
    start = time.perf_counter()
    model, P = _toy_network()
    net, rng = model.network, np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        L, F, A, t = _random_state(rng, int(rng.integers(2, 13)), net.n_classes)
        tau = rng.uniform(-2, 2, 3)
        a, b = net.forward(P, L, F, A, t), net.forward(P, L, wrap(F + tau), A, t)
        for x, y in zip((a.lattice_mean, a.coord_scores, a.type_logits), (b.lattice_mean, b.coord_scores, b.type_logits)):
            worst = max(worst, np.abs(x - y).max())
    return _result("periodic translation invariance", worst, 1e-10, start)


def check_kernel_translation(n_trials=100, seed=0):
    start = time.perf_counter()
    sched = make_schedule(100)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        n = int(rng.integers(1, 13))
        F, tau = rng.random((n, 3)), rng.uniform(-2, 2, 3)
        s, eps = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        t = int(rng.integers(1, 101))
        a = coord_backward_step(F, s, t, sched, None, noise=eps)
        b = coord_backward_step(wrap(F + tau), s, t, sched, None, noise=eps)
        worst = max(worst, np.abs(signed_wrapped_diff(b, a + tau)).max())
    return _result("backward kernel translation equivariance", worst, 1e-10, start)


# wrapped normal ----------------------------------------------------------------


def _series_score(d, sigma, K=100):
    z = d[..., None] + np.arange(-K, K + 1)
    w = np.exp(-(z**2) / (2 * sigma**2) - np.max(-(z**2) / (2 * sigma**2), axis=-1, keepdims=True))
    return np.sum(w * (-z / sigma**2), axis=-1) / np.sum(w, axis=-1)


def check_wrapped_score():
    start = time.perf_counter()
    d = np.linspace(-0.49, 0.49, 99)
    worst = 0.0
    for sigma in np.geomspace(0.01, 1.0, 30):
        got = wn_score(d, sigma)
        h = 1e-6
        fd = (wn_log_density(d + h, sigma, K=100) - wn_log_density(d - h, sigma, K=100)) / (2 * h)
        worst = max(worst, np.abs(got - _series_score(d, sigma)).max(), np.abs(got - fd).max())
    return _result("wrapped-normal score vs series and finite differences", worst, 1e-5, start)


# D3PM ------------------------------------------------------------------------------


def _chain_joint(a_t, a0, t, q_beta, K):
    Qs = [d3pm_transition(q_beta[i], K) for i in range(t)]
    out = np.zeros(K)
    for path in itertools.product(range(K), repeat=t - 1):
        s = (a0,) + path + (a_t,)
        out[s[t - 1]] += np.prod([Qs[i][s[i + 1], s[i]] for i in range(t)])
    return out


def _chain_elbo(a0, logits_fn, q_beta, K):
    T = len(q_beta)
    Qs = [d3pm_transition(q, K) for q in q_beta]
    total = 0.0
    for path in itertools.product(range(K), repeat=T):
        s = (a0,) + path
        steps = [Qs[i][s[i + 1], s[i]] for i in range(T)]
        q = np.prod(steps)
        if q == 0:
            continue
        log_p = -np.log(K)
        for t in range(T, 1, -1):
            p0 = softmax(logits_fn(s[t], t))
            joint = sum(p0[x] * _chain_joint(s[t], x, t, q_beta, K) for x in range(K))
            log_p += np.log(joint[s[t - 1]] / joint.sum())
        log_p += np.log(softmax(logits_fn(s[1], 1))[a0])
        total += q * (np.sum(np.log(steps)) - log_p)
    return total


def check_d3pm(seed=0):
    start = time.perf_counter()
    q_beta = np.array([0.2, 0.45, 0.7])
    sched = dataclasses.replace(make_schedule(3), q_beta=q_beta)
    worst = 0.0
    for K in (2, 3, 4):
        table = np.random.default_rng(seed + K).standard_normal((K, 4, K))
        for a0 in range(K):
            for a_t in range(K):
                for t in (2, 3):
                    j = _chain_joint(a_t, a0, t, q_beta, K)
                    got = cat.type_posterior(a_t, np.eye(K)[a0], t, sched, K)
                    worst = max(worst, np.abs(got - j / j.sum()).max())
            got = cat.type_elbo_loss(a0, lambda a, t: table[a, t], sched, K)
            worst = max(worst, abs(got - _chain_elbo(a0, lambda a, t: table[a, t], q_beta, K)))
    return _result("D3PM posterior and ELBO vs chain enumeration", worst, 1e-10, start)


# gradients ----------------------------------------------------------------------------


def check_gradients(n_params=200, seed=0):
    start = time.perf_counter()
    model = Model(TrainConfig(n_m=10, n_types=3, T=20, seed=seed), ModelConfig(hidden_dim=16, n_layers=2, n_freqs=8))
    cb = corrupt_batch(make_toy_dataset(4, seed=seed + 1), model, np.random.default_rng(seed + 2))
    params = model.init_state().params

    def loss_of(p):
        out = model.network.forward(p, cb.L_t, cb.F_t, cb.A_t, cb.t)
        return sum(float(np.mean(x)) for x in batch_losses(out, cb, model))

    out = model.network.forward_tensors(params, cb.L_t, cb.F_t, cb.A_t, cb.t)
    grads = model.network.backward(sum((x.mean() for x in batch_losses(out, cb, model)), 0.0))
    rng = np.random.default_rng(seed)
    names = sorted(params)
    worst = 0.0
    h = 1e-5
    for _ in range(n_params):
        k = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        up = loss_of(params)
        params[k][idx] = old - h
        down = loss_of(params)
        params[k][idx] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grads[k][idx] - fd) / max(abs(fd), abs(grads[k][idx]), 1e-6))
    return _result(f"reverse-mode gradients vs finite differences ({n_params} params)", worst, 1e-4, start)


# mirage mechanics ----------------------------------------------------------------------


def check_round_trip(n_trials=200, seed=0):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(n_trials):
        n = int(rng.integers(1, 20))
        c = Crystal(np.eye(3) * 5 + rng.standard_normal((3, 3)), rng.random((n, 3)), rng.integers(1, 101, n))
        init = "center" if rng.random() < 0.5 else "uniform"
        failures += reduce(infuse(c, n + int(rng.integers(0, 10)), rng, init)) != c
    return _result("reduce(infuse(c)) == c", failures, 0, start)


def check_mask_invariance(seed=0):
    start = time.perf_counter()
    model, params = _toy_network()
    cb = corrupt_batch(make_toy_dataset(16, seed=seed), model, np.random.default_rng(seed))
    out = model.network.forward(params, cb.L_t, cb.F_t, cb.A_t, cb.t)
    base = [np.asarray(x) for x in batch_losses(out, cb, model)]
    target = cb.coord_target.copy()
    mirage = cb.A0 == 0
    target[mirage] += 1e3 * np.random.default_rng(seed).standard_normal(target[mirage].shape)
    moved = [np.asarray(x) for x in batch_losses(out, dataclasses.replace(cb, coord_target=target), model)]
    changed = sum(int(not np.array_equal(a, b)) for a, b in zip(base, moved))
    return _result("mirage targets do not change the loss (bitwise)", changed, 0, start)


def check_prior_statistics(n_draws=100_000, seed=0):
    start = time.perf_counter()
    n_types, n_m = 100, 25
    _, _, A = sample_prior(n_draws, n_m, n_types + 1, np.random.default_rng(seed))
    mirage = (A == 0).sum(axis=1)
    p = n_types / (n_types + 1)
    err = max(abs(np.mean(mirage == 0) - p**n_m), abs(np.mean(mirage == 1) - 0.19))
    return _result("prior all-real / one-mirage fractions", err, 0.02, start)


# checkpoints -------------------------------------------------------------------------


def check_resume(seed=0):
    from .io import load_checkpoint, save_checkpoint

    start = time.perf_counter()
    model = Model(
        TrainConfig(n_m=10, n_types=3, T=20, batch_size=8, seed=seed), ModelConfig(hidden_dim=16, n_layers=2, n_freqs=8)
    )
    data = make_toy_dataset(16, seed=seed)
    state, _ = train(data, model, max_steps=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.json"
        save_checkpoint(model, state, path)
        model2, state2 = load_checkpoint(path)
    a_state, a = train_step(state, data[:8], model, step_rng(seed, state.step))
    b_state, b = train_step(state2, data[:8], model2, step_rng(seed, state2.step))
    mismatches = int(a != b) + sum(int(not np.array_equal(a_state.params[k], b_state.params[k])) for k in a_state.params)
    return _result("checkpoint resume is bitwise transparent", mismatches, 0, start)


CHECKS = (
    check_permutation,
    check_orthogonal,
    check_translation,
    check_kernel_translation,
    check_wrapped_score,
    check_d3pm,
    check_gradients,
    check_round_trip,
    check_mask_invariance,
    check_prior_statistics,
    check_resume,
)


def run_all(echo=print):
    results = []
    for check in CHECKS:
        res = check()
        if echo:
            echo(res.line())
        results.append(res)
    return results
