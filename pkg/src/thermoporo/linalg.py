"""Thin, contract-enforcing wrappers around the sparse and dense kernels.

All matrices in this package are CSR float64 (scipy.sparse).  This module
pins down the behaviour the solvers rely on: reusable factorizations with a
small-residual guarantee, a symmetric eigensolver with deterministic
descending ordering, and a 2-norm condition number with an infinity sentinel.
Concurrent solves against one factorization are safe; the factor objects are
never mutated after construction.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "LinalgError",
    "SingularMatrixError",
    "AsymmetricMatrixError",
    "Factorization",
    "finalize_csr",
    "factorize",
    "solve",
    "sym_eig",
    "condition_number_2",
]

# Dense fallback used only to locate the failing pivot of a singular matrix.
_DENSE_DIAGNOSIS_LIMIT = 5000


class LinalgError(Exception):
    """Base class for linear algebra contract violations."""


class SingularMatrixError(LinalgError):
    """Factorization hit an exactly singular pivot."""

    def __init__(self, message: str, pivot_row: int | None = None):
        super().__init__(message)
        self.pivot_row = pivot_row


class AsymmetricMatrixError(LinalgError):
    """sym_eig received a matrix that is not symmetric within tolerance."""


def finalize_csr(a: sp.spmatrix) -> sp.csr_matrix:
    """Canonical CSR: float64, duplicates summed, zeros dropped, sorted indices."""
    out = sp.csr_matrix(a, dtype=np.float64, copy=True)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def _diagnose_pivot(a: sp.csr_matrix) -> int | None:
    """Locate the first zero pivot of a singular matrix via dense LU.

    Only attempted for matrices small enough to densify; returns None when
    the matrix is too large or the diagnosis is inconclusive.
    """
    n = a.shape[0]
    if n > _DENSE_DIAGNOSIS_LIMIT:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, _ = scipy.linalg.lu_factor(a.toarray(), check_finite=False)
    diag = np.abs(np.diag(lu))
    zero = np.nonzero(diag == 0.0)[0]
    if zero.size:
        return int(zero[0])
    # No exact zero: report the weakest pivot instead.
    return int(np.argmin(diag))


class Factorization:
    """Reusable sparse LU factor of a square CSR matrix.

    Solves against one instance may run concurrently; nothing is mutated
    after construction.
    """

    def __init__(self, matrix: sp.csr_matrix, lu: spla.SuperLU):
        self.matrix = matrix
        self.shape = matrix.shape
        self._lu = lu

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.shape[0]:
            raise ValueError(
                f"right-hand side length {b.shape[0]} != matrix size {self.shape[0]}"
            )
        return self._lu.solve(b)


def factorize(a: sp.spmatrix) -> Factorization:
    """LU-factorize a square sparse matrix for repeated solves.

    Raises
    ------
    SingularMatrixError
        If the matrix is exactly singular; the message names the pivot row
        when a dense diagnosis is feasible.
    """
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    a = finalize_csr(a)
    try:
        lu = spla.splu(a.tocsc())
    except RuntimeError as exc:
        if "singular" not in str(exc).lower():
            raise
        pivot = _diagnose_pivot(a)
        where = f" at pivot row {pivot}" if pivot is not None else ""
        raise SingularMatrixError(
            f"matrix of size {a.shape[0]} is exactly singular{where}", pivot_row=pivot
        ) from exc
    return Factorization(a, lu)


def solve(factorization: Factorization, b: np.ndarray) -> np.ndarray:
    """Solve A x = b against a previously computed factorization."""
    return factorization.solve(b)


def sym_eig(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full eigendecomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.  The input must be symmetric to a relative
    Frobenius tolerance of 1e-10.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {c.shape}")
    scale = np.linalg.norm(c)
    asym = np.linalg.norm(c - c.T)
    if asym > 1e-10 * max(1.0, scale):
        raise AsymmetricMatrixError(
            f"matrix asymmetry {asym:.3e} exceeds 1e-10 * {max(1.0, scale):.3e}"
        )
    eigenvalues, eigenvectors = np.linalg.eigh(c)
    order = np.arange(eigenvalues.shape[0] - 1, -1, -1)
    return eigenvalues[order], eigenvectors[:, order]


def condition_number_2(a: np.ndarray) -> float:
    """2-norm condition number of a dense matrix; inf when numerically singular."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("condition number of an empty matrix is undefined")
    singular_values = np.linalg.svd(a, compute_uv=False)
    smax = float(singular_values[0])
    smin = float(singular_values[-1])
    # Same numerical-rank cutoff as numpy.linalg.matrix_rank.
    cutoff = smax * max(a.shape) * np.finfo(np.float64).eps
    if smax == 0.0 or smin <= cutoff:
        return math.inf
    return smax / smin
