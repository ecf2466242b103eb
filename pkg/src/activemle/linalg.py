"""Small shared linear-algebra helpers for symmetric PSD matrices."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be invertible is rank deficient."""


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def symmetry_defect(matrix: np.ndarray) -> float:
    """Relative asymmetry ``|M - M^T| / max(|M|, tiny)`` in the max norm."""
    scale = max(float(np.abs(matrix).max(initial=0.0)), 1e-300)
    return float(np.abs(matrix - matrix.T).max(initial=0.0)) / scale


def min_eigenvalue(matrix: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(matrix))[0])


def check_psd(matrix: np.ndarray, sym_rtol: float = 1e-10, eig_rtol: float = 1e-10) -> None:
    """Validate the symmetric-PSD contract used for Fisher matrices.

    Symmetry must hold to ``sym_rtol`` relative, and all eigenvalues must
    satisfy ``lam >= -eig_rtol * |M|``.
    """
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if symmetry_defect(matrix) > sym_rtol:
        raise ValueError("matrix is not symmetric within tolerance")
    scale = max(float(np.abs(matrix).max(initial=0.0)), 1e-300)
    if min_eigenvalue(matrix) < -eig_rtol * scale:
        raise ValueError("matrix has an eigenvalue below the PSD tolerance")


def solve_psd(matrix: np.ndarray, rhs: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Solve ``matrix @ x = rhs`` for a symmetric PD matrix via Cholesky.

    Raises :class:`SingularMatrixError` naming the rank deficiency when the
    factorization fails.
    """
    try:
        factor = cho_factor(symmetrize(matrix), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        eigs = np.linalg.eigvalsh(symmetrize(matrix))
        p = matrix.shape[0]
        tol = max(abs(eigs.max(initial=0.0)), 1e-300) * p * np.finfo(float).eps
        rank = int((eigs > tol).sum())
        raise SingularMatrixError(
            f"{what} is singular: numerical rank {rank} of {p}"
        ) from None
    return cho_solve(factor, rhs, check_finite=False)
