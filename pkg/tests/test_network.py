import numpy as np
import pytest
from scipy.stats import ortho_group

from miad.autograd import GradientError
from miad.crystal import wrap
from miad.engine import Model, TrainConfig, batch_losses, corrupt_batch
from miad.network import ModelConfig, NetworkConfigError, ScoreNetwork, fourier_pairwise
from miad.toy import make_toy_dataset

K = 5


@pytest.fixture(scope="module")
def net():
    n = ScoreNetwork(ModelConfig(hidden_dim=16, n_layers=2, n_freqs=8, max_atoms=12), K, np.linspace(1, 3, 11))
    return n, n.init_params(np.random.default_rng(0))


def random_input(n_atoms, seed=0):
    rng = np.random.default_rng(seed)
    L = np.eye(3) * 4 + rng.standard_normal((3, 3))
    return L, rng.random((n_atoms, 3)), rng.integers(0, K, n_atoms), int(rng.integers(1, 11))


def test_fourier_examples():
    f = fourier_pairwise(np.full(3, 0.3), np.full(3, 0.3), 8).reshape(3, 8)
    np.testing.assert_array_equal(f[:, :4], 0.0)
    np.testing.assert_array_equal(f[:, 4:], 1.0)
    g = fourier_pairwise(np.zeros(3), np.array([0.25, 0, 0]), 2)
    assert g[0] == pytest.approx(1.0) and abs(g[1]) < 1e-15
    with pytest.raises(NetworkConfigError):
        fourier_pairwise(np.zeros(3), np.zeros(3), 3)


def test_fourier_translation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        fi, fj, tau = rng.random(3), rng.random(3), rng.uniform(-3, 3, 3)
        a = fourier_pairwise(fi, fj, 16)
        b = fourier_pairwise(wrap(fi + tau), wrap(fj + tau), 16)
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("n_atoms", [2, 5, 12])
def test_permutation_equivariance(net, n_atoms):
    n, P = net
    L, F, A, t = random_input(n_atoms, n_atoms)
    perm = np.random.default_rng(n_atoms).permutation(n_atoms)
    a = n.forward(P, L, F, A, t)
    b = n.forward(P, L, F[perm], A[perm], t)
    np.testing.assert_allclose(b.coord_scores, a.coord_scores[perm], atol=1e-10)
    np.testing.assert_allclose(b.type_logits, a.type_logits[perm], atol=1e-10)
    np.testing.assert_allclose(b.lattice_mean, a.lattice_mean, atol=1e-10)


def test_orthogonal_equivariance(net):
    # rows of L are basis vectors, so a rotation acts as L -> L Q^T
    n, P = net
    for seed in range(5):
        L, F, A, t = random_input(7, seed)
        Q = ortho_group.rvs(3, random_state=seed)
        a = n.forward(P, L, F, A, t)
        b = n.forward(P, L @ Q.T, F, A, t)
        np.testing.assert_allclose(b.lattice_mean, a.lattice_mean @ Q.T, atol=1e-6)
        np.testing.assert_allclose(b.coord_scores, a.coord_scores, atol=1e-6)
        np.testing.assert_allclose(b.type_logits, a.type_logits, atol=1e-6)


def test_translation_invariance(net):
    n, P = net
    L, F, A, t = random_input(6, 3)
    a = n.forward(P, L, F, A, t)
    b = n.forward(P, L, wrap(F + np.array([0.37, -1.2, 2.9])), A, t)
    for x, y in zip([a.lattice_mean, a.coord_scores, a.type_logits], [b.lattice_mean, b.coord_scores, b.type_logits]):
        np.testing.assert_allclose(y, x, atol=1e-6)


def test_lattice_mean_is_left_multiple_of_input(net):
    n, P = net
    L, F, A, t = random_input(4, 9)
    out = n.forward(P, L, F, A, t)
    M = out.lattice_mean @ np.linalg.inv(L)
    np.testing.assert_allclose(M @ L, out.lattice_mean, atol=1e-12)


def test_input_errors(net):
    n, P = net
    L, F, A, t = random_input(13)
    with pytest.raises(NetworkConfigError):
        n.forward(P, L, F, A, t)
    L, F, A, t = random_input(3)
    with pytest.raises(NetworkConfigError):
        n.forward(P, L, F, A + K, t)


def test_param_count_deterministic():
    a = ScoreNetwork(ModelConfig(), 4)
    assert a.n_params() == ScoreNetwork(ModelConfig(), 4).n_params()
    assert ScoreNetwork(ModelConfig(), 5).n_params() - a.n_params() == 64 + 64 + 1


@pytest.fixture(scope="module")
def toy_model():
    model = Model(TrainConfig(n_m=10, n_types=3, T=20, seed=0), ModelConfig(hidden_dim=16, n_layers=2, n_freqs=8))
    data = make_toy_dataset(4, seed=1)
    cb = corrupt_batch(data, model, np.random.default_rng(2))
    return model, cb


def total_loss(model, params, cb):
    out = model.network.forward(params, cb.L_t, cb.F_t, cb.A_t, cb.t)
    return sum(float(np.mean(x)) for x in batch_losses(out, cb, model))


def test_gradients_match_finite_differences(toy_model):
    model, cb = toy_model
    params = model.init_state().params
    out = model.network.forward_tensors(params, cb.L_t, cb.F_t, cb.A_t, cb.t)
    loss = sum((x.mean() for x in batch_losses(out, cb, model)), 0.0)
    grads = model.network.backward(loss)
    assert loss.data == pytest.approx(total_loss(model, params, cb), rel=1e-12)

    rng = np.random.default_rng(0)
    names = sorted(params)
    h = 1e-5
    worst = 0.0
    for _ in range(200):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        old = params[name][idx]
        params[name][idx] = old + h
        up = total_loss(model, params, cb)
        params[name][idx] = old - h
        down = total_loss(model, params, cb)
        params[name][idx] = old
        fd = (up - down) / (2 * h)
        g = grads[name][idx]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    assert worst < 1e-4


def test_backward_contract(toy_model):
    model, cb = toy_model
    params = model.init_state().params
    with pytest.raises(GradientError):
        model.network.backward(None)

    def run(adjoint):
        out = model.network.forward_tensors(params, cb.L_t, cb.F_t, cb.A_t, cb.t)
        loss = sum((x.mean() for x in batch_losses(out, cb, model)), 0.0)
        return model.network.backward(loss, adjoint)

    assert all(np.all(g == 0) for g in run(0.0).values())
    a, b = run(1.0), run(1.0)
    assert all(np.array_equal(a[k], b[k]) for k in a)
