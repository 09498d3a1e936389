"""Desk-scale generation metrics: uniqueness, novelty, validity and atom-count statistics.

Structure matching uses a fingerprint (reduced composition, quantized
periodic distance multiset, quantized volume per atom) instead of a full
lattice-reduction matcher. Equal fingerprints are treated as the same
structure; this over-matches rather than under-matches.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import reduce as _fold
from math import gcd

import numpy as np

MAX_PAIR_IMAGES = 4_000_000


class DegenerateLatticeError(ValueError):
    pass


@dataclass(frozen=True)
class StructureFingerprint:
    composition: tuple
    distances: tuple
    volume_per_atom: int

    def key(self):
        return (self.composition, self.distances, self.volume_per_atom)


def _image_range(lattice, radius, n_atoms=1):
    """Integer shifts per axis needed to cover a sphere of ``radius``."""
    with np.errstate(over="ignore", invalid="ignore"):
        vol = abs(np.linalg.det(lattice))
    if not np.isfinite(vol) or vol < 1e-8:
        raise DegenerateLatticeError("lattice volume is (numerically) zero")
    spans = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            spacing = vol / np.linalg.norm(np.cross(lattice[j], lattice[k]))
        if not np.isfinite(spacing) or spacing <= 0:
            raise DegenerateLatticeError("lattice plane spacing is not finite")
        spans.append(int(np.ceil(radius / spacing)))
    if np.prod([2 * s + 1 for s in spans]) * n_atoms**2 > MAX_PAIR_IMAGES:
        raise DegenerateLatticeError("cell too thin for periodic image enumeration")
    return spans


def periodic_distances(crystal, radius):
    """Distances up to ``radius`` from each atom to every periodic image of every atom (self excluded)."""
    lattice = crystal.lattice
    spans = _image_range(lattice, radius, crystal.n_atoms)
    grids = np.meshgrid(*[np.arange(-s, s + 1) for s in spans], indexing="ij")
    shifts = np.stack([g.ravel() for g in grids], axis=1).astype(float)
    f = crystal.frac_coords
    d = f[None, :, None, :] - f[:, None, None, :] + shifts[None, None, :, :]
    gram = lattice @ lattice.T
    sq = np.einsum("...i,ij,...j->...", d, gram, d)
    dist = np.sqrt(np.maximum(sq, 0.0))
    n = f.shape[0]
    self_pair = np.eye(n, dtype=bool)[:, :, None] & np.all(shifts == 0, axis=1)[None, None, :]
    dist = dist[~self_pair]
    return dist[dist <= radius]


def min_periodic_distance(crystal, search_radius):
    dist = periodic_distances(crystal, search_radius)
    return float(dist.min()) if dist.size else np.inf


def _reduced_composition(types):
    counts = Counter(int(a) for a in types)
    div = _fold(gcd, counts.values())
    return tuple(sorted((k, v // div) for k, v in counts.items()))


def fingerprint(crystal, cutoff=6.0, delta_d=0.05, delta_v=0.1):
    """Permutation-, rotation- and translation-invariant structure summary."""
    dist = periodic_distances(crystal, cutoff)
    q = np.sort(np.round(dist / delta_d).astype(np.int64))
    bins, counts = np.unique(q, return_counts=True)
    return StructureFingerprint(
        composition=_reduced_composition(crystal.atom_types),
        distances=tuple(zip(bins.tolist(), counts.tolist())),
        volume_per_atom=int(np.round(crystal.volume / crystal.n_atoms / delta_v)),
    )


def _keys(samples, **kw):
    keys = []
    for c in samples:
        try:
            keys.append(fingerprint(c, **kw).key())
        except DegenerateLatticeError:
            # each degenerate sample is its own structure
            keys.append(("degenerate", id(c)))
    return keys


def uniqueness(samples, **kw):
    """Fraction of samples that are distinct under fingerprint equality."""
    samples = list(samples)
    if not samples:
        raise ValueError("uniqueness needs at least one sample")
    return len(set(_keys(samples, **kw))) / len(samples)


def novelty(samples, reference, **kw):
    """Fraction of samples whose fingerprint matches nothing in ``reference``."""
    samples = list(samples)
    if not samples:
        return 0.0
    ref = set(_keys(reference, **kw))
    return sum(k not in ref for k in _keys(samples, **kw)) / len(samples)


def atom_count_histogram(samples):
    return dict(sorted(Counter(c.n_atoms for c in samples).items()))


def validity_screen(crystal, min_dist=0.5):
    """True iff no two atoms (or periodic images) are closer than ``min_dist``."""
    try:
        return min_periodic_distance(crystal, min_dist) >= min_dist
    except DegenerateLatticeError:
        return False


def evaluation_report(samples, reference=None, discards=0, cutoff=6.0, delta_d=0.05, min_dist=0.5):
    """U&N report; stability is not computed, so no S.U.N. value is produced."""
    samples = list(samples)
    kw = dict(cutoff=cutoff, delta_d=delta_d)
    valid = [validity_screen(c, min_dist) for c in samples]
    return {
        "num_samples": len(samples),
        "discards": int(discards),
        "uniqueness": uniqueness(samples, **kw) if samples else 0.0,
        "novelty": novelty(samples, reference, **kw) if reference is not None else None,
        "histogram": {str(k): v for k, v in atom_count_histogram(samples).items()},
        "validity_rate": float(np.mean(valid)) if samples else 0.0,
    }
