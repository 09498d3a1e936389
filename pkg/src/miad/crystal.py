"""Periodic crystal data model, the torus wrap map and mirage infusion/reduction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIRAGE = 0


class CrystalError(ValueError):
    """Raised when a crystal (or expanded crystal) violates its invariants."""


class EmptyCrystalError(CrystalError):
    """Raised when reduction would leave no atoms."""


def wrap(coords):
    """Map real coordinates onto [0, 1) by taking the fractional part."""
    coords = np.asarray(coords, dtype=float)
    if not np.all(np.isfinite(coords)):
        raise CrystalError("wrap: non-finite coordinate values")
    out = coords - np.floor(coords)
    # x - floor(x) can round up to exactly 1.0 for tiny negative x
    return np.where(out >= 1.0, 0.0, out)


def _check_lattice(lattice):
    lattice = np.array(lattice, dtype=float)
    if lattice.shape != (3, 3):
        raise CrystalError(f"lattice must be 3x3, got shape {lattice.shape}")
    if not np.all(np.isfinite(lattice)):
        raise CrystalError("lattice has non-finite entries")
    if np.linalg.det(lattice) == 0.0:
        raise CrystalError("lattice is degenerate (zero determinant)")
    return lattice


def _check_coords(frac_coords, n):
    frac_coords = np.array(frac_coords, dtype=float).reshape(-1, 3) if n else np.zeros((0, 3))
    if frac_coords.shape != (n, 3):
        raise CrystalError(f"frac_coords must be {n}x3, got {frac_coords.shape}")
    if not np.all(np.isfinite(frac_coords)):
        raise CrystalError("frac_coords has non-finite entries")
    if np.any(frac_coords < 0.0) or np.any(frac_coords >= 1.0):
        raise CrystalError("frac_coords must lie in [0, 1)")
    return frac_coords


def _check_types(atom_types):
    atom_types = np.array(atom_types)
    if atom_types.ndim != 1:
        raise CrystalError("atom_types must be one-dimensional")
    if atom_types.size and not np.issubdtype(atom_types.dtype, np.integer):
        if not np.all(atom_types == np.round(atom_types)):
            raise CrystalError("atom_types must be integers")
    return atom_types.astype(np.int64)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Crystal:
    """A unit cell: lattice rows are basis vectors (Å), coordinates are fractional."""

    lattice: np.ndarray
    frac_coords: np.ndarray
    atom_types: np.ndarray

    def __post_init__(self):
        lattice = _check_lattice(self.lattice)
        types = _check_types(self.atom_types)
        if types.size < 1:
            raise CrystalError("a crystal needs at least one atom")
        if np.any(types == MIRAGE):
            raise CrystalError("mirage type in input")
        if np.any(types < 0):
            raise CrystalError("atom types must be positive")
        coords = _check_coords(self.frac_coords, types.size)
        _freeze(lattice, coords, types)
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "frac_coords", coords)
        object.__setattr__(self, "atom_types", types)

    @property
    def n_atoms(self):
        return int(self.atom_types.size)

    @property
    def cart_coords(self):
        return self.frac_coords @ self.lattice

    @property
    def volume(self):
        return float(abs(np.linalg.det(self.lattice)))

    def __eq__(self, other):
        if not isinstance(other, Crystal):
            return NotImplemented
        return (
            np.array_equal(self.lattice, other.lattice)
            and np.array_equal(self.frac_coords, other.frac_coords)
            and np.array_equal(self.atom_types, other.atom_types)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ExpandedCrystal:
    """Fixed-size crystal in which type 0 marks a mirage atom."""

    lattice: np.ndarray
    frac_coords: np.ndarray
    atom_types: np.ndarray

    def __post_init__(self):
        lattice = np.array(self.lattice, dtype=float)
        if lattice.shape != (3, 3) or not np.all(np.isfinite(lattice)):
            raise CrystalError("lattice must be a finite 3x3 matrix")
        types = _check_types(self.atom_types)
        if np.any(types < 0):
            raise CrystalError("atom types must be non-negative")
        coords = _check_coords(self.frac_coords, types.size)
        _freeze(lattice, coords, types)
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "frac_coords", coords)
        object.__setattr__(self, "atom_types", types)

    @property
    def n_m(self):
        return int(self.atom_types.size)

    @property
    def mask(self):
        return mirage_mask(self)


def mirage_mask(expanded):
    """Ascending indices of the non-mirage atoms."""
    return np.flatnonzero(np.asarray(expanded.atom_types) != MIRAGE)


def infuse(crystal, n_m, rng, init="uniform"):
    """Pad ``crystal`` with mirage atoms up to ``n_m`` atoms.

    Real atoms come first and are copied unchanged. Mirage coordinates are
    drawn uniformly on the unit cell, or (``init="center"``) placed at the
    arithmetic mean of the real fractional coordinates.
    """
    n = crystal.n_atoms
    if n > n_m:
        raise CrystalError(f"crystal has {n} atoms but n_m is {n_m}")
    n_extra = n_m - n
    if init == "uniform":
        extra = rng.random((n_extra, 3))
    elif init == "center":
        # no periodic unwrapping, see the ledger
        center = crystal.frac_coords.mean(axis=0)
        extra = np.tile(wrap(center), (n_extra, 1))
    else:
        raise ValueError(f"unknown mirage init {init!r}")
    return ExpandedCrystal(
        lattice=crystal.lattice.copy(),
        frac_coords=np.concatenate([crystal.frac_coords, extra]),
        atom_types=np.concatenate([crystal.atom_types, np.zeros(n_extra, dtype=np.int64)]),
    )


def reduce(expanded):
    """Drop every mirage atom, keeping the relative order of the rest."""
    idx = mirage_mask(expanded)
    if idx.size == 0:
        raise EmptyCrystalError("all atoms are mirage; nothing left after reduction")
    return Crystal(
        lattice=expanded.lattice.copy(),
        frac_coords=expanded.frac_coords[idx].copy(),
        atom_types=expanded.atom_types[idx].copy(),
    )


def check_crystals(crystals, n_m=None):
    """Validate a sequence of crystals, optionally against a size limit.

    Returns the list; raises with the offending index otherwise.
    """
    crystals = list(crystals)
    if not crystals:
        raise CrystalError("expected at least one crystal")
    for i, c in enumerate(crystals):
        if not isinstance(c, Crystal):
            raise CrystalError(f"item {i} is not a Crystal (got {type(c).__name__})")
        if n_m is not None and c.n_atoms > n_m:
            raise CrystalError(f"crystal {i} has {c.n_atoms} atoms but n_m is {n_m}")
    return crystals
