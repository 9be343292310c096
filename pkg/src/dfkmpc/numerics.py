"""Dense linear-algebra kernels shared by the identification and control code.

All rank judgements in the package go through :data:`RCOND`: singular values
below ``RCOND * sigma_max`` are treated as zero.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

RCOND = 1e-10


class NumericsError(RuntimeError):
    pass


class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a non-empty matrix, got shape {a.shape}")
    return a


def svd(a, full_matrices: bool = False) -> SvdResult:
    """Thin SVD with a fallback LAPACK driver.

    ``gesdd`` is tried first; if it fails to converge ``gesvd`` is used.
    If both fail a :class:`NumericsError` is raised naming both attempts.
    """
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    errors = []
    for driver in ("gesdd", "gesvd"):
        try:
            u, s, vt = scipy.linalg.svd(
                a, full_matrices=full_matrices, lapack_driver=driver, check_finite=False
            )
            return SvdResult(u, s, vt)
        except np.linalg.LinAlgError as exc:
            errors.append(f"{driver}: {exc}")
    raise NumericsError(f"SVD did not converge after {len(errors)} driver attempts ({'; '.join(errors)})")


def numerical_rank(s: np.ndarray, tol: float = RCOND) -> int:
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def rank(a, tol: float = RCOND) -> int:
    return numerical_rank(svd(a).s, tol)


def truncate_rank(a, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in Frobenius norm (Eckart-Young)."""
    a = as_matrix(a)
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r} outside [1, {min(a.shape)}]")
    u, s, vt = svd(a)
    return (u[:, :r] * s[:r]) @ vt[:r]


def pseudoinverse(a, tol: float = RCOND) -> np.ndarray:
    a = as_matrix(a)
    u, s, vt = svd(a)
    k = numerical_rank(s, tol)
    if k == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    return (vt[:k].T / s[:k]) @ u[:, :k].T


def least_squares(a, b, tol: float = RCOND) -> np.ndarray:
    """Minimum-norm minimiser of ``||a @ x - b||_F``.

    A 1-D ``b`` gives a 1-D result.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"row mismatch: a has {a.shape[0]} rows, b has {b.shape[0]}")
    u, s, vt = svd(a)
    k = numerical_rank(s, tol)
    if k == 0:
        return np.zeros((a.shape[1],) + b.shape[1:])
    coef = u[:, :k].T @ b
    coef = coef / (s[:k] if b.ndim == 1 else s[:k, None])
    return vt[:k].T @ coef


def range_basis(a, tol: float = RCOND) -> np.ndarray:
    """Orthonormal basis (as columns) of the column space of ``a``."""
    u, s, _ = svd(a)
    return u[:, : numerical_rank(s, tol)]


def row_space_basis(a, tol: float = RCOND) -> np.ndarray:
    """Orthonormal basis (as rows) of the row space of ``a``."""
    _, s, vt = svd(a)
    return vt[: numerical_rank(s, tol)]


def null_space(a, tol: float = RCOND) -> np.ndarray:
    """Orthonormal basis (as columns) of the null space of ``a``."""
    a = as_matrix(a)
    _, s, vt = svd(a, full_matrices=True)
    return vt[numerical_rank(s, tol):].T.copy()
