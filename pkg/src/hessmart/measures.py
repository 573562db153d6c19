"""Discrete probability measures on R^n.

A :class:`DiscreteMeasure` is a finite set of weighted atoms.  It is the only
representation of a measure used in the package: marginals, reference
densities (through quadrature) and Monte Carlo clouds all end up here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

WEIGHT_TOL = 1e-12
RENORMALIZE_TOL = 1e-9
SVD_RTOL = 1e-10


class DiscreteMeasure:
    """Weighted atoms in R^n.

    Parameters
    ----------
    atoms : array_like, shape (m, n) or (m,)
        Atom locations.  A 1-d array is read as ``m`` atoms in R^1.
    weights : array_like, shape (m,)
        Nonnegative weights.  Sums within ``1e-9`` of one are renormalized,
        anything further off is rejected.
    allow_zero : bool
        Permit atoms of zero weight (a null cell).  Off by default.
    """

    __slots__ = ("_atoms", "_weights")

    def __init__(self, atoms, weights, allow_zero=False):
        atoms = np.array(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2:
            raise ValueError("atoms must be a 2-d array of shape (m, n)")
        weights = np.array(weights, dtype=float).reshape(-1)
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{atoms.shape[0]} atoms but {weights.shape[0]} weights"
            )
        if atoms.shape[0] == 0:
            raise ValueError("a measure needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not allow_zero and np.any(weights == 0):
            raise ValueError("zero weights require allow_zero=True")
        total = math.fsum(weights)
        if abs(total - 1.0) > RENORMALIZE_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1")
        if abs(total - 1.0) > 0.0:
            weights = weights / total
        atoms.setflags(write=False)
        weights.setflags(write=False)
        self._atoms = atoms
        self._weights = weights

    @property
    def atoms(self) -> np.ndarray:
        return self._atoms

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def dim(self) -> int:
        return self._atoms.shape[1]

    @property
    def size(self) -> int:
        return self._atoms.shape[0]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"DiscreteMeasure(size={self.size}, dim={self.dim})"

    def support(self) -> "DiscreteMeasure":
        """Copy with zero-weight atoms dropped."""
        keep = self._weights > 0
        return DiscreteMeasure(self._atoms[keep], self._weights[keep])

    def mean(self) -> np.ndarray:
        return mean(self)

    def expectation(self, f, vectorized=False) -> float:
        return expectation(self, f, vectorized=vectorized)

    def to_json(self) -> dict:
        return {
            "dimension": self.dim,
            "atoms": self._atoms.tolist(),
            "weights": self._weights.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "DiscreteMeasure":
        n = int(data["dimension"])
        atoms = np.asarray(data["atoms"], dtype=float).reshape(-1, n)
        return cls(atoms, data["weights"], allow_zero=bool(data.get("allow_zero", False)))

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(point[None, :], [1.0])


def mean(m: DiscreteMeasure) -> np.ndarray:
    """Weighted average of the atoms."""
    return m.weights @ m.atoms


def expectation(m: DiscreteMeasure, f, vectorized=False) -> float:
    """Integrate ``f`` against ``m``.

    ``f`` receives one atom (a length-n array) at a time, or the full
    ``(m, n)`` atom array when ``vectorized`` is set.
    """
    if vectorized:
        values = np.asarray(f(m.atoms), dtype=float).reshape(-1)
        if values.shape[0] != m.size:
            raise ValueError("vectorized f must return one value per atom")
    else:
        values = np.array([float(np.asarray(f(a)).reshape(())) for a in m.atoms])
    bad = ~np.isfinite(values)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise EvaluationError(
            f"non-finite value {values[i]!r} at atom {i} = {m.atoms[i].tolist()}"
        )
    return float(m.weights @ values)


def affine_hull_dimension(m: DiscreteMeasure) -> int:
    """Dimension of the affine span of the atoms carrying positive weight."""
    pts = m.atoms[m.weights > 0]
    return _affine_rank(pts)


def _affine_rank(pts):
    if pts.shape[0] <= 1 or pts.shape[1] == 0:
        return 0
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return int(np.sum(s > _rank_cutoff(s, pts)))


def _rank_cutoff(s, pts):
    # relative cutoff, floored at the rounding level of the coordinates
    floor = 64 * np.finfo(float).eps * np.abs(pts).max() * np.sqrt(pts.shape[0])
    return max(SVD_RTOL * s[0], floor)


@dataclass(frozen=True)
class AffineFrame:
    """Orthonormal frame of an affine subspace: ``x = base + basis @ z``."""

    basis: np.ndarray  # (n, d)
    base: np.ndarray  # (n,)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def is_identity(self) -> bool:
        n = self.base.shape[0]
        return self.dim == n and np.array_equal(self.basis, np.eye(n)) and not np.any(self.base)

    def project(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return (points - self.base) @ self.basis

    def lift(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        if coords.ndim < 2:
            coords = coords.reshape(-1, self.dim) if self.dim else coords.reshape(1, 0)
        return self.base + coords @ self.basis.T

    def lift_affine(self, a, b):
        """Map an affine function ``a + <b, z>`` on the frame to R^n coordinates.

        The result agrees with the original on the subspace; off the subspace
        it is extended constantly along the orthogonal complement.
        """
        b_full = self.basis @ np.asarray(b, dtype=float).reshape(self.dim)
        return float(a) - float(b_full @ self.base), b_full


def reduce_to_affine_hull(m1: DiscreteMeasure, m2: DiscreteMeasure):
    """Express both measures in coordinates of the affine hull of their supports.

    Returns
    -------
    (r1, r2) : tuple of DiscreteMeasure
        The measures in frame coordinates (dimension ``d <= n``).
    frame : AffineFrame
        ``frame.lift`` maps coordinates back to R^n.  For a full-dimensional
        pair the frame is the identity and the measures come back unchanged.
    """
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")
    n = m1.dim
    m1s, m2s = m1.support(), m2.support()
    pts = np.vstack([m1s.atoms, m2s.atoms])
    if _affine_rank(pts) == n:
        frame = AffineFrame(np.eye(n), np.zeros(n))
        return (m1s, m2s), frame
    base = pts.mean(axis=0)
    centered = pts - base
    if centered.shape[0] > 1 and np.any(centered):
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        d = int(np.sum(s > _rank_cutoff(s, pts)))
        basis = vt[:d].T.copy()
    else:
        basis = np.zeros((n, 0))
    # deterministic orientation: first nonzero entry of each column positive
    for j in range(basis.shape[1]):
        col = basis[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            basis[:, j] = -col
    frame = AffineFrame(basis, base)
    r1 = DiscreteMeasure(frame.project(m1s.atoms), m1s.weights)
    r2 = DiscreteMeasure(frame.project(m2s.atoms), m2s.weights)
    return (r1, r2), frame


def product_measure(*factors: DiscreteMeasure) -> DiscreteMeasure:
    """Tensor product of measures (atoms concatenated, weights multiplied)."""
    atoms = factors[0].atoms
    weights = factors[0].weights
    for f in factors[1:]:
        atoms = np.hstack([
            np.repeat(atoms, f.size, axis=0),
            np.tile(f.atoms, (atoms.shape[0], 1)),
        ])
        weights = np.outer(weights, f.weights).reshape(-1)
    return DiscreteMeasure(atoms, weights)


def empirical(samples) -> DiscreteMeasure:
    """Equal-weight measure on a sample cloud."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    m = samples.shape[0]
    return DiscreteMeasure(samples, np.full(m, 1.0 / m))
