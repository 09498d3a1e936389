"""Joint denoiser: permutation-equivariant message passing over the fully connected atom graph.

Coordinates enter only through Fourier features of pairwise fractional
differences, the lattice only through its Gram matrix (normalized, plus log scale), and the lattice head
multiplies the network's 3x3 output into ``L_t``. Together these give
permutation equivariance, O(3) equivariance of the lattice mean (invariance of
everything else) and invariance to periodic translations.

Lattices use the row convention (rows are basis vectors), so a rotation acts
as ``L -> L @ Q.T``, the Gram matrix is ``L @ L.T`` and the lattice mean is
``NN(L L^T) @ L``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import GradientError, Tensor, parameter


class NetworkConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_layers: int = 3
    n_freqs: int = 16
    max_atoms: int = 100
    init_seed: int = 0

    def __post_init__(self):
        if self.n_freqs % 2:
            raise NetworkConfigError(f"n_freqs must be even, got {self.n_freqs}")
        if self.hidden_dim % 2:
            raise NetworkConfigError("hidden_dim must be even")

    def to_dict(self):
        return asdict(self)


@dataclass
class DenoiserOutput:
    lattice_mean: object
    coord_scores: object
    type_logits: object


def fourier_pairwise(fi, fj, n_freqs):
    """Per axis [sin(2 pi n d), cos(2 pi n d)] for n = 1..n_freqs/2, with d = fj - fi.

    Broadcasts over leading dimensions; the last axis of the result has
    3 * n_freqs entries ordered axis by axis (sines first).
    """
    if n_freqs % 2:
        raise NetworkConfigError(f"n_freqs must be even, got {n_freqs}")
    d = np.asarray(fj, float) - np.asarray(fi, float)
    n = np.arange(1, n_freqs // 2 + 1)
    arg = 2.0 * np.pi * d[..., None] * n
    feats = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)
    return feats.reshape(d.shape[:-1] + (3 * n_freqs,))


def time_embedding(t, dim):
    t = np.asarray(t, float)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = t[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


GRAM_FEATURES = 10


def gram_features(L):
    """Scale-free Gram matrix plus its log scale, shape (..., 10).

    ``G / s`` with ``s = tr(G) / 3`` stays O(1) from the noise prior up to real
    cells, and ``log s`` carries the size.
    """
    L = np.asarray(L, float)
    G = L @ np.swapaxes(L, -1, -2)
    s = np.maximum(np.trace(G, axis1=-2, axis2=-1) / 3.0, 1e-12)
    shape = G.shape[:-2]
    return np.concatenate([(G / s[..., None, None]).reshape(shape + (9,)), np.log(s)[..., None]], axis=-1)


def _glorot(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


class ScoreNetwork:
    """Parameter layout, forward pass and reverse-mode gradients of the joint denoiser.

    ``score_scale[t]`` multiplies the raw coordinate head so that the network
    predicts unit-scale quantities at every noise level.
    """

    def __init__(self, config, n_classes, score_scale=None):
        self.config = config
        self.n_classes = int(n_classes)
        self.score_scale = None if score_scale is None else np.asarray(score_scale, float)
        self._leaves = None

    # parameters -----------------------------------------------------------

    def param_shapes(self):
        H, K, E = self.config.hidden_dim, self.n_classes, 3 * self.config.n_freqs
        shapes = {
            "type_embed": (K, H),
            "time_w": (H, H),
            "time_b": (H,),
        }
        for layer in range(self.config.n_layers):
            p = f"layer{layer}."
            shapes.update(
                {
                    p + "edge_hi": (H, H),
                    p + "edge_hj": (H, H),
                    p + "edge_feat": (E, H),
                    p + "edge_gram": (GRAM_FEATURES, H),
                    p + "edge_b": (H,),
                    p + "msg_w": (H, H),
                    p + "msg_b": (H,),
                    p + "node_h": (H, H),
                    p + "node_m": (H, H),
                    p + "node_b": (H,),
                    p + "node_out": (H, H),
                    p + "node_out_b": (H,),
                }
            )
        shapes.update(
            {
                "coord_w": (H, 3),
                "coord_b": (3,),
                "type_w": (H, K),
                "type_b": (K,),
                "lat_w1": (H, H),
                "lat_gram": (GRAM_FEATURES, H),
                "lat_b1": (H,),
                "lat_w2": (H, 9),
                "lat_b2": (9,),
            }
        )
        return shapes

    def n_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def init_params(self, rng=None):
        rng = rng if rng is not None else np.random.default_rng(self.config.init_seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            elif name == "type_embed":
                params[name] = rng.standard_normal(shape)
            else:
                params[name] = _glorot(rng, *shape)
        # start the lattice head at the identity map: mean = L_t
        params["lat_w2"] *= 0.01
        params["lat_b2"] = np.eye(3).ravel().copy()
        params["coord_w"] *= 0.1
        params["type_w"] *= 0.1
        for layer in range(self.config.n_layers):
            params[f"layer{layer}.node_out"] *= 0.1
        return params

    # forward ----------------------------------------------------------------

    def _check_inputs(self, L_t, F_t, A_t, t):
        L_t = np.asarray(L_t, float)
        F_t = np.asarray(F_t, float)
        A_t = np.asarray(A_t)
        single = L_t.ndim == 2
        if single:
            L_t, F_t, A_t = L_t[None], F_t[None], A_t[None]
        B, N = A_t.shape
        if L_t.shape != (B, 3, 3) or F_t.shape != (B, N, 3):
            raise NetworkConfigError("inconsistent input shapes")
        if N > self.config.max_atoms:
            raise NetworkConfigError(f"{N} atoms exceeds max_atoms={self.config.max_atoms}")
        if np.any(A_t < 0) or np.any(A_t >= self.n_classes):
            raise NetworkConfigError("atom type index out of range")
        t = np.broadcast_to(np.asarray(t), (B,))
        return L_t, F_t, A_t, t, single

    def _forward(self, P, L_t, F_t, A_t, t):
        cfg = self.config
        B, N = A_t.shape
        gram = gram_features(L_t).reshape(B, 1, GRAM_FEATURES)
        edges = fourier_pairwise(F_t[:, :, None, :], F_t[:, None, :, :], cfg.n_freqs)
        offdiag = (1.0 - np.eye(N))[None, :, :, None]
        denom = max(N - 1, 1)

        temb = time_embedding(t, cfg.hidden_dim)
        h = P["type_embed"][A_t] + (Tensor(temb) @ P["time_w"] + P["time_b"]).reshape(B, 1, cfg.hidden_dim)

        for layer in range(cfg.n_layers):
            p = f"layer{layer}."
            hi = (h @ P[p + "edge_hi"]).reshape(B, N, 1, cfg.hidden_dim)
            hj = (h @ P[p + "edge_hj"]).reshape(B, 1, N, cfg.hidden_dim)
            g = (gram @ P[p + "edge_gram"]).reshape(B, 1, 1, cfg.hidden_dim)
            pre = hi + hj + Tensor(edges) @ P[p + "edge_feat"] + g + P[p + "edge_b"]
            msg = (pre.silu() @ P[p + "msg_w"] + P[p + "msg_b"]).silu()
            agg = (msg * offdiag).sum(axis=2) * (1.0 / denom)
            upd = (h @ P[p + "node_h"] + agg @ P[p + "node_m"] + P[p + "node_b"]).silu()
            h = h + upd @ P[p + "node_out"] + P[p + "node_out_b"]

        coords = h @ P["coord_w"] + P["coord_b"]
        if self.score_scale is not None:
            coords = coords * self.score_scale[t].reshape(B, 1, 1)
        logits = h @ P["type_w"] + P["type_b"]

        pooled = h.mean(axis=1)
        lat_h = (pooled @ P["lat_w1"] + (gram.reshape(B, GRAM_FEATURES) @ P["lat_gram"]) + P["lat_b1"]).silu()
        lat_m = (lat_h @ P["lat_w2"] + P["lat_b2"]).reshape(B, 3, 3)
        lattice_mean = lat_m @ L_t
        return DenoiserOutput(lattice_mean, coords, logits)

    def forward(self, params, L_t, F_t, A_t, t):
        """Plain-array outputs; accepts a single crystal or a batch."""
        L_t, F_t, A_t, t, single = self._check_inputs(L_t, F_t, A_t, t)
        P = {k: Tensor(v) for k, v in params.items()}
        out = self._forward(P, L_t, F_t, A_t, t)
        arrays = [out.lattice_mean.data, out.coord_scores.data, out.type_logits.data]
        if single:
            arrays = [a[0] for a in arrays]
        return DenoiserOutput(*arrays)

    def forward_tensors(self, params, L_t, F_t, A_t, t):
        """Batched forward pass that records the graph for :meth:`backward`."""
        L_t, F_t, A_t, t, _ = self._check_inputs(L_t, F_t, A_t, t)
        self._leaves = {k: parameter(v) for k, v in params.items()}
        return self._forward(self._leaves, L_t, F_t, A_t, t)

    def backward(self, loss, adjoint=1.0):
        """Gradients of ``adjoint * loss`` with respect to every parameter."""
        if self._leaves is None:
            raise GradientError("backward called without a recorded forward pass")
        if not isinstance(loss, Tensor) or not loss.requires_grad:
            raise GradientError("loss was not computed from the recorded forward pass")
        for leaf in self._leaves.values():
            leaf.grad = None
        loss.backward(adjoint)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self._leaves.items()}
        self._leaves = None
        return grads
