"""Symmetric positive definite matrix foundations.

Dense helpers used by every other module: the canonical symmetric basis,
nearest-SPD projection, Cholesky-style vectorization, distance metrics on
the SPD cone, and a validated symmetric eigendecomposition.

Conventions
-----------
* A matrix counts as SPD when its smallest eigenvalue is at least
  ``SPD_EIG_FLOOR``; projections clamp eigenvalues to that floor.
* The symmetric basis for dimension n enumerates the upper triangle in
  row-major order, diagonal entry first within each row.  A diagonal slot
  (i, i) maps to the unit matrix E_ii; an off-diagonal slot (i, j) maps to
  E_ij + E_ji.  For n = 2 the basis is

      [[1, 0], [0, 0]],  [[0, 1], [1, 0]],  [[0, 0], [0, 1]]

* ``chol_vec`` factors K = L^T L with L lower triangular and positive
  diagonal, and returns the lower triangle of L in row-major order.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import DecompositionError, InvalidInputError

SPD_EIG_FLOOR = 1e-6

METRICS = ("affine_invariant", "log_euclidean", "log_det")


class EigPair(NamedTuple):
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")
    if a.shape[0] == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _require_symmetric(a, name="matrix", tol=1e-8):
    a = _as_square(a, name)
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > tol * scale:
        raise InvalidInputError(f"{name} is not symmetric")
    return a


def symmetrize(a):
    """Return the symmetric part (A + A^T) / 2."""
    a = _as_square(a)
    return 0.5 * (a + a.T)


def min_eig(a):
    """Smallest eigenvalue of a symmetric matrix."""
    return float(np.linalg.eigvalsh(_require_symmetric(a))[0])


def is_spd(a, floor=SPD_EIG_FLOOR, tol=1e-12):
    """True when ``a`` is symmetric with smallest eigenvalue >= floor - tol."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.all(np.isfinite(a)):
        return False
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > 1e-8 * scale:
        return False
    return float(np.linalg.eigvalsh(a)[0]) >= floor - tol


@lru_cache(maxsize=16)
def _sym_basis_cached(dim):
    mats = []
    for i in range(dim):
        for j in range(i, dim):
            m = np.zeros((dim, dim))
            m[i, j] = 1.0
            m[j, i] = 1.0
            mats.append(m)
    return tuple(m.copy() for m in mats)


def sym_basis(dim):
    """Canonical basis of the n x n symmetric matrices, length n(n+1)/2.

    Ordered row-major over the upper triangle with the diagonal entry
    first in each row: (0,0), (0,1), ..., (0,n-1), (1,1), (1,2), ...
    """
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise InvalidInputError(f"dimension must be a positive integer, got {dim!r}")
    return [m.copy() for m in _sym_basis_cached(int(dim))]


def sym_basis_tensor(dim):
    """Stacked basis as an array of shape (n(n+1)/2, n, n)."""
    return np.stack(_sym_basis_cached(int(dim)))


def recombine(basis, weights):
    """Weighted sum sum_i w_i M_i of basis matrices."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or len(basis) != weights.shape[0]:
        raise InvalidInputError(
            f"got {len(basis)} basis matrices but {weights.shape} weights"
        )
    stack = np.stack([np.asarray(m, dtype=float) for m in basis])
    return np.tensordot(weights, stack, axes=1)


def lift_spd(a, floor=SPD_EIG_FLOOR):
    """Clamp the eigenvalues of a symmetric matrix to at least ``floor``."""
    a = _require_symmetric(a)
    w, v = np.linalg.eigh(a)
    if w[0] >= floor:
        return a.copy()
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def nearest_spd(a, floor=SPD_EIG_FLOOR):
    """Project a square matrix onto the SPD cone.

    Symmetrize, replace the symmetric part by its positive factor from an
    SVD, average, and finally clamp eigenvalues to the floor if the result
    is still short of positive definite.  Already-SPD input passes through
    unchanged up to roundoff, and the projection is idempotent.
    """
    a = _as_square(a)
    b = 0.5 * (a + a.T)
    try:
        u, s, vt = np.linalg.svd(b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - svd rarely fails
        raise DecompositionError(f"svd failed: {exc}") from exc
    l = vt.T @ np.diag(s) @ vt
    k = 0.5 * (b + l)
    k = 0.5 * (k + k.T)
    w, v = np.linalg.eigh(k)
    if w[0] < floor:
        w = np.maximum(w, floor)
        k = (v * w) @ v.T
        k = 0.5 * (k + k.T)
    return k


def eig_sym(a):
    """Eigendecomposition of a symmetric matrix.

    Returns an :class:`EigPair` with eigenvalues ascending and orthonormal
    eigenvectors in the columns, so that A = V diag(w) V^T.
    """
    a = _require_symmetric(a)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"eigendecomposition failed: {exc}") from exc
    return EigPair(w, v)


def chol_vec(k):
    """Vectorize the factor L of K = L^T L, L lower triangular.

    The factor with positive diagonal is unique for SPD input.  It is
    computed from a standard Cholesky factorization of the index-reversed
    matrix: with J the exchange matrix, J K J = R^T R for an upper
    triangular R, and L = J R J.  The returned vector lists the lower
    triangle of L row-major, e.g. (l11, l21, l22) for n = 2.
    """
    k = _require_symmetric(k, "stiffness")
    rev = k[::-1, ::-1]
    try:
        c = np.linalg.cholesky(rev)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("matrix is not positive definite") from exc
    l = c.T[::-1, ::-1]
    return l[np.tril_indices(k.shape[0])].copy()


def chol_unvec(v):
    """Rebuild K = L^T L from a row-major lower-triangle vector of L."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
        raise InvalidInputError("factor vector must be a finite 1-d array")
    n = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    if n * (n + 1) // 2 != v.size:
        raise InvalidInputError(
            f"vector length {v.size} is not a triangular number"
        )
    l = np.zeros((n, n))
    l[np.tril_indices(n)] = v
    return l.T @ l


def chol_matrix(v):
    """Lower-triangular matrix form of a factor vector (bit-exact inverse
    of the vectorization)."""
    v = np.asarray(v, dtype=float)
    n = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    if n * (n + 1) // 2 != v.size:
        raise InvalidInputError(
            f"vector length {v.size} is not a triangular number"
        )
    l = np.zeros((n, n))
    l[np.tril_indices(n)] = v
    return l


def _spd_eigvals(a, name):
    a = _require_symmetric(a, name)
    w = np.linalg.eigvalsh(a)
    if w[0] <= 0.0:
        raise InvalidInputError(f"{name} is not positive definite")
    return w


def _logm_spd(a, name="matrix"):
    a = _require_symmetric(a, name)
    w, v = np.linalg.eigh(a)
    if w[0] <= 0.0:
        raise InvalidInputError(f"{name} is not positive definite")
    return (v * np.log(w)) @ v.T


def spd_distance(a, b, metric="log_euclidean"):
    """Distance between two SPD matrices.

    Metrics:
      * ``affine_invariant``  ||log(A^-1/2 B A^-1/2)||_F
      * ``log_euclidean``     ||log(A) - log(B)||_F
      * ``log_det``           sqrt(logdet((A+B)/2) - (logdet(A B)) / 2)

    All three are symmetric in their arguments and vanish exactly on
    identical input.
    """
    a = _require_symmetric(a, "a")
    b = _require_symmetric(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "affine_invariant":
        w, v = np.linalg.eigh(a)
        if w[0] <= 0.0:
            raise InvalidInputError("a is not positive definite")
        inv_sqrt = (v / np.sqrt(w)) @ v.T
        c = inv_sqrt @ b @ inv_sqrt
        wc = np.linalg.eigvalsh(0.5 * (c + c.T))
        if wc[0] <= 0.0:
            raise InvalidInputError("b is not positive definite")
        return float(np.sqrt(np.sum(np.log(wc) ** 2)))
    if metric == "log_euclidean":
        return float(np.linalg.norm(_logm_spd(a, "a") - _logm_spd(b, "b")))
    if metric == "log_det":
        wa = _spd_eigvals(a, "a")
        wb = _spd_eigvals(b, "b")
        sign, logdet_mid = np.linalg.slogdet(0.5 * (a + b))
        if sign <= 0:
            raise InvalidInputError("midpoint matrix is not positive definite")
        val = logdet_mid - 0.5 * (np.sum(np.log(wa)) + np.sum(np.log(wb)))
        return float(np.sqrt(max(val, 0.0)))
    raise InvalidInputError(f"unknown metric {metric!r}; choose from {METRICS}")
