"""Rank-revealing linear algebra for nullspace work.

Conventions follow row vectors: the nullspace of ``M`` (p x d) is the set of
``v`` in R^{1 x p} with ``v @ M == 0``. All routines factor with the LAPACK
SVD, which is deterministic for fixed input bits and thread count.
Tolerances are relative to the largest singular value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
# singular values this close to the cutoff count as ties and are dropped
_TIE_BAND = 1e-6


@dataclass(frozen=True)
class NullspaceBasis:
    """Orthonormal basis (one vector per row) of a left nullspace."""

    vectors: np.ndarray
    tol: float
    source_shape: tuple
    rank: int

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def is_trivial(self) -> bool:
        return self.dim == 0

    def __len__(self) -> int:
        return self.dim

    def project(self, x: np.ndarray) -> np.ndarray:
        """Orthogonal projection of row vector(s) ``x`` onto the basis span."""
        return (x @ self.vectors.T) @ self.vectors


def _check_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {M.shape}")
    if M.size == 0:
        raise UsageError(f"empty matrix of shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise UsageError("matrix has non-finite entries")
    return M


def _rank_from_singular_values(s: np.ndarray, tol: float) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    cutoff = tol * s[0]
    above = s > cutoff
    ties = above & (s <= cutoff * (1.0 + _TIE_BAND))
    if ties.any():
        logger.warning(
            "%d singular value(s) tie with cutoff %.3e; treating them as zero",
            int(ties.sum()),
            cutoff,
        )
        above &= ~ties
    return int(above.sum())


def numerical_rank(M, tol: float = DEFAULT_TOL) -> int:
    """Number of singular values above ``tol * sigma_max``."""
    M = _check_matrix(M)
    s = np.linalg.svd(M, compute_uv=False)
    return _rank_from_singular_values(s, tol)


def nullspace(M, tol: float = DEFAULT_TOL) -> NullspaceBasis:
    """Orthonormal basis of ``{v : v @ M = 0}`` for a p x d matrix ``M``.

    The basis has ``p - rank(M)`` rows. It is read off the trailing left
    singular vectors of ``M``, each sign-normalized so its largest-magnitude
    entry is positive.
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    M = _check_matrix(M)
    U, s, _ = np.linalg.svd(M, full_matrices=True)
    rank = _rank_from_singular_values(s, tol)
    vectors = U[:, rank:].T.copy()
    _fix_signs(vectors)
    return NullspaceBasis(vectors=vectors, tol=tol, source_shape=M.shape, rank=rank)


def _fix_signs(rows: np.ndarray) -> None:
    if rows.size == 0:
        return
    pivot = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), pivot])
    signs[signs == 0] = 1.0
    rows *= signs[:, None]


def row_space_basis(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Orthonormal rows spanning the row space of ``M``."""
    M = _check_matrix(M)
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    rank = _rank_from_singular_values(s, tol)
    return Vt[:rank]


def row_space_contains(M, r, tol: float = 1e-9, rank_tol: float = DEFAULT_TOL) -> tuple[bool, float]:
    """Test whether row vector ``r`` lies in the row space of ``M``.

    Returns ``(inside, residual)`` where ``residual`` is the distance from
    ``r`` to its orthogonal projection on the row space; ``inside`` holds when
    the residual is at most ``tol * ||r||``.
    """
    M = _check_matrix(M)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if r.shape[0] != M.shape[1]:
        raise ShapeError(f"vector of width {r.shape[0]} against matrix {M.shape}")
    basis = row_space_basis(M, rank_tol)
    residual = float(np.linalg.norm(r - (r @ basis.T) @ basis))
    return residual <= tol * float(np.linalg.norm(r)), residual


def is_symmetric(M, tol: float = 1e-10) -> bool:
    return symmetry_residual(M) <= tol


def symmetry_residual(M) -> float:
    """``max|M - M^T| / max|M|`` (0 for the zero matrix)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise UsageError(f"symmetry needs a square matrix, got {M.shape}")
    scale = np.abs(M).max() if M.size else 0.0
    if scale == 0.0:
        return 0.0
    return float(np.abs(M - M.T).max() / scale)


def orthogonal_complement(rows, tol: float = DEFAULT_TOL) -> NullspaceBasis:
    """Orthonormal basis of the orthogonal complement of the span of ``rows``."""
    rows = _check_matrix(rows)
    return nullspace(rows.T, tol)
