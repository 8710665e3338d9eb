"""Dense real linear algebra used by the subspace criteria.

Subspaces are carried as orthonormal bases; projectors are never formed as
explicit m x m matrices.  Bases come from the SVD so that numerical-rank
decisions have the cleanest possible gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "OrthonormalBasis",
    "Projector",
    "default_rank_tol",
    "orthonormal_basis",
    "complement_basis",
    "project",
    "numerical_rank",
    "spectral_norm",
    "min_nonzero_singular",
    "residual_sq_norms",
    "pivoted_independent_columns",
    "projector_distance",
]

_EPS = np.finfo(float).eps


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def default_rank_tol(shape: tuple[int, int]) -> float:
    """Relative rank tolerance ``32 * eps * max(rows, cols)``.

    Singular values at or below ``tol * sigma_max`` are treated as zero.
    """
    return 32.0 * _EPS * max(shape[0], shape[1], 1)


@dataclass(frozen=True)
class OrthonormalBasis:
    """Orthonormal columns spanning a subspace of R^ambient_dim."""

    columns: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2:
            raise ValueError("basis columns must be a 2-D array")
        if cols.shape[1] > cols.shape[0]:
            raise ValueError("basis_dim exceeds ambient_dim")
        cols.setflags(write=False)
        object.__setattr__(self, "columns", cols)

    @property
    def ambient_dim(self) -> int:
        return self.columns.shape[0]

    @property
    def basis_dim(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def empty(cls, ambient_dim: int) -> "OrthonormalBasis":
        return cls(np.zeros((ambient_dim, 0)))

    def hstack(self, other: "OrthonormalBasis") -> np.ndarray:
        return np.hstack([self.columns, other.columns])


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector ``basis @ basis.T``, stored implicitly."""

    basis: OrthonormalBasis

    @property
    def ambient_dim(self) -> int:
        return self.basis.ambient_dim

    def __call__(self, v) -> np.ndarray:
        return project(self, v)

    def complement(self) -> "Projector":
        return Projector(complement_basis(self.basis))

    def matrix(self) -> np.ndarray:
        """Explicit matrix; only meant for tests and small diagnostics."""
        Q = self.basis.columns
        return Q @ Q.T


def orthonormal_basis(M, tol: float | None = None) -> OrthonormalBasis:
    """Orthonormal basis of the numerical column space of ``M``.

    Parameters
    ----------
    M : array_like, shape (m, p)
    tol : float, optional
        Relative tolerance; directions with ``sigma <= tol * sigma_max`` are
        dropped.  Defaults to :func:`default_rank_tol`.

    Returns
    -------
    OrthonormalBasis
        ``basis_dim`` equals the numerical rank; an all-zero ``M`` gives an
        empty basis.
    """
    M = _as_matrix(M)
    if tol is None:
        tol = default_rank_tol(M.shape)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if M.shape[1] == 0:
        return OrthonormalBasis.empty(M.shape[0])
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return OrthonormalBasis.empty(M.shape[0])
    rank = int(np.count_nonzero(s > tol * s[0]))
    return OrthonormalBasis(U[:, :rank])


def complement_basis(Q: OrthonormalBasis) -> OrthonormalBasis:
    """Orthonormal basis of the orthogonal complement of ``span(Q)``."""
    m, d = Q.ambient_dim, Q.basis_dim
    if d == 0:
        return OrthonormalBasis(np.eye(m))
    if d == m:
        return OrthonormalBasis.empty(m)
    U, _, _ = np.linalg.svd(Q.columns, full_matrices=True)
    return OrthonormalBasis(U[:, d:])


def project(P: Projector, v) -> np.ndarray:
    """Apply ``P`` to a vector or to each column of a matrix."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != P.ambient_dim:
        raise ValueError(
            f"dimension mismatch: projector acts on R^{P.ambient_dim}, got {v.shape[0]}"
        )
    Q = P.basis.columns
    return Q @ (Q.T @ v)


def numerical_rank(M, tol: float | None = None) -> int:
    """Number of singular values above ``tol * sigma_max`` (0 for a zero matrix)."""
    M = _as_matrix(M)
    if tol is None:
        tol = default_rank_tol(M.shape)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def spectral_norm(M) -> float:
    M = _as_matrix(M)
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def min_nonzero_singular(M, tol: float | None = None) -> float:
    """Smallest singular value above ``tol * sigma_max``."""
    M = _as_matrix(M)
    if tol is None:
        tol = default_rank_tol(M.shape)
    s = np.linalg.svd(M, compute_uv=False) if M.size else np.zeros(0)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("no nonzero singular value")
    return float(s[s > tol * s[0]][-1])


def residual_sq_norms(basis: OrthonormalBasis, V) -> np.ndarray:
    """Column-wise ``||(I - Q Q^T) v||^2`` for the columns of ``V``."""
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    Q = basis.columns
    R = V - Q @ (Q.T @ V)
    return np.einsum("ij,ij->j", R, R)


def pivoted_independent_columns(
    base: OrthonormalBasis, V, tol: float
) -> np.ndarray:
    """Positions of a well-conditioned independent subset of the columns of ``V``.

    Columns are unit-normalised and projected off ``span(base)``; a QR
    factorisation with column pivoting then keeps every pivot whose
    ``|R_ii|`` exceeds ``tol``.  Appending the returned columns to ``base``
    raises the numerical rank by exactly one per column.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[1] == 0:
        return np.zeros(0, dtype=int)
    norms = np.linalg.norm(V, axis=0)
    keep = norms > 0
    W = np.zeros_like(V)
    W[:, keep] = V[:, keep] / norms[keep]
    Q = base.columns
    W = W - Q @ (Q.T @ W)
    _, R, piv = scipy.linalg.qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > tol))
    return np.sort(piv[:rank])


def projector_distance(U: OrthonormalBasis, W: OrthonormalBasis) -> float:
    """Spectral norm ``||P_U - P_W||``, i.e. the sine of the largest principal angle.

    Computed as ``||(I - P_W) U||`` when the dimensions agree, which keeps full
    relative accuracy for nearly equal subspaces.  Subspaces of different
    dimension are at distance 1.
    """
    if U.ambient_dim != W.ambient_dim:
        raise ValueError("bases live in different ambient spaces")
    if U.basis_dim != W.basis_dim:
        return 1.0
    if U.basis_dim == 0:
        return 0.0
    R = U.columns - W.columns @ (W.columns.T @ U.columns)
    return min(1.0, spectral_norm(R))
