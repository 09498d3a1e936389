"""Synthetic cubic crystals for smoke runs and ablations."""

from __future__ import annotations

import numpy as np

from .crystal import Crystal

# the 27 points of the {0, 1/3, 2/3}^3 grid, as integer indices and fractions
GRID_INDEX = np.array([[i, j, k] for i in range(3) for j in range(3) for k in range(3)])
GRID_SITES = GRID_INDEX / 3.0


def make_toy_dataset(n_crystals=200, min_atoms=2, max_atoms=8, n_species=3, seed=0):
    """Cubic cells with atoms on distinct {0, 1/3, 2/3}^3 grid points.

    The grid splits into three interpenetrating sublattices by (i + j + k)
    mod 3. Each crystal assigns a random species to each sublattice, so the
    species pattern is learnable from the geometry and stays invariant under
    grid translations. The cell edge grows with the atom count (about 0.4 Å
    per atom) so that lattice and composition are correlated.

    There are more sites than padded slots, so mirage atoms that drift onto
    the grid during sampling are not forced to share a site.
    """
    if not 1 <= min_atoms <= max_atoms <= len(GRID_SITES):
        raise ValueError(f"atom counts must lie in [1, {len(GRID_SITES)}]")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_crystals):
        n = int(rng.integers(min_atoms, max_atoms + 1))
        chosen = np.sort(rng.choice(len(GRID_SITES), n, replace=False))
        a = 3.0 + 0.4 * n + rng.uniform(-0.1, 0.1)
        species = rng.choice(np.arange(1, n_species + 1), size=3, replace=n_species < 3)
        types = species[GRID_INDEX[chosen].sum(axis=1) % 3]
        out.append(Crystal(np.eye(3) * a, GRID_SITES[chosen], types))
    return out
