"""Small linear-algebra helpers shared across modules.

Everything here is thin wrapping around numpy/scipy: symmetric solves with a
Cholesky-first strategy and a pivoted fallback, plus validation utilities for
symmetric positive definite inputs.
"""

from __future__ import annotations

import hashlib

import numpy as np
import scipy.linalg


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Average a nearly symmetric matrix with its transpose."""
    return 0.5 * (mat + mat.T)


def max_asymmetry(mat: np.ndarray) -> float:
    """Relative asymmetry |M - M'| / max(1, |M|) in max-norm."""
    scale = max(1.0, float(np.abs(mat).max()))
    return float(np.abs(mat - mat.T).max()) / scale


def solve_pd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve mat @ x = rhs for symmetric positive definite ``mat``.

    Tries a Cholesky factorization first and falls back to a pivoted
    symmetric solve when the matrix is not numerically PD.
    """
    try:
        factor = scipy.linalg.cho_factor(mat, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        return scipy.linalg.solve(mat, rhs, assume_a="sym", check_finite=False)


def inv_pd(mat: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via solve_pd."""
    eye = np.eye(mat.shape[0])
    return symmetrize(solve_pd(mat, eye))


def pd_eigenvalues(mat: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending."""
    return scipy.linalg.eigvalsh(mat)


def stable_hash64(text: str) -> int:
    """Deterministic 64-bit hash of a string (process-independent)."""
    digest = hashlib.blake2s(text.encode("utf8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
