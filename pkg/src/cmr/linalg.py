"""Dense symmetric/PSD matrix primitives.

Everything downstream (sampling, moment estimators, whitening, recovery
metrics) is built on the four operations here: symmetric eigendecomposition,
PSD square root / inverse square root, and the projector-based subspace
distance. All functions are pure and operate on plain float64 ndarrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinite, NotInvertible, RankDeficient, ShapeMismatch

# Relative eigenvalue floor used when whitening: guards against
# finite-sample near-singularity of estimated covariances.
DEFAULT_EIG_FLOOR_RATIO = 1e-10


def as_symmetric(m, name: str = "matrix") -> np.ndarray:
    """Validate a square finite matrix and return its symmetrized copy.

    Symmetrization is (m + m.T) / 2; inputs are expected to be symmetric up
    to roundoff, this just removes the roundoff skew.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"{name} must be a square 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} contains NaN or Inf entries")
    return (a + a.T) / 2.0


@dataclass(frozen=True)
class EigPair:
    """Full eigendecomposition of a symmetric matrix.

    values are sorted non-increasing; vectors holds the matching
    column-orthonormal eigenvectors in the same order.
    """

    values: np.ndarray
    vectors: np.ndarray


def eig_sym(m) -> EigPair:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    a = as_symmetric(m)
    values, vectors = np.linalg.eigh(a)
    # eigh returns ascending order; flip to descending
    return EigPair(values=values[::-1].copy(), vectors=vectors[:, ::-1].copy())


def sqrt_psd(m) -> np.ndarray:
    """Unique PSD square root via symmetric eigendecomposition.

    Tiny negative eigenvalues from roundoff are clamped to zero, so the
    root is well-defined for singular PSD inputs.
    """
    pair = eig_sym(m)
    vals = np.clip(pair.values, 0.0, None)
    root = (pair.vectors * np.sqrt(vals)) @ pair.vectors.T
    return (root + root.T) / 2.0


def inv_sqrt_psd(m, eig_floor: float | None = None) -> np.ndarray:
    """Inverse PSD square root: V diag(lambda^{-1/2}) V^T.

    eig_floor defaults to DEFAULT_EIG_FLOOR_RATIO times the largest
    eigenvalue. Raises NotInvertible when any eigenvalue falls below the
    floor, since whitening with a near-singular matrix is unreliable.
    """
    pair = eig_sym(m)
    lam_max = float(pair.values[0]) if pair.values.size else 0.0
    if eig_floor is None:
        eig_floor = DEFAULT_EIG_FLOOR_RATIO * max(lam_max, 0.0)
    if eig_floor <= 0.0:
        raise NotInvertible("eig_floor must be positive")
    lam_min = float(pair.values[-1])
    if lam_min < eig_floor:
        raise NotInvertible(
            f"smallest eigenvalue {lam_min:.3e} is below the floor {eig_floor:.3e}"
        )
    inv_root = (pair.vectors / np.sqrt(pair.values)) @ pair.vectors.T
    return (inv_root + inv_root.T) / 2.0


def operator_norm(m) -> float:
    """Largest singular value (spectral norm) of a dense matrix."""
    a = np.asarray(m, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[0])


def orthonormal_basis(m, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the column span, via SVD.

    Raises RankDeficient if the smallest singular value is below
    rank_tol times the largest (the columns must be a genuine basis).
    """
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[-1] < rank_tol * s[0]:
        raise RankDeficient(
            f"columns are numerically rank deficient (singular values {s})"
        )
    return u[:, : a.shape[1]]


def subspace_distance(u, v) -> float:
    """sin of the largest principal angle between column spans.

    Computed as the operator norm of the difference of the orthogonal
    projectors onto span(u) and span(v); inputs need not be orthonormal
    but must have full column rank and equal row counts.
    """
    bu = orthonormal_basis(u)
    bv = orthonormal_basis(v)
    if bu.shape[0] != bv.shape[0]:
        raise ShapeMismatch(f"row counts differ: {bu.shape[0]} vs {bv.shape[0]}")
    diff = bu @ bu.T - bv @ bv.T
    # exact largest singular value of the projector difference; the value
    # is a sine, clip the roundoff excursions outside [0, 1]
    return float(min(max(operator_norm(diff), 0.0), 1.0))
