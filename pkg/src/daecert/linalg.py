"""Dense matrix kernels shared by every other module.

All routines are deterministic (LAPACK drivers, fixed sign conventions) and
operate on plain ``numpy`` arrays.  Problem sizes in this package are small
(<= a few hundred rows), so everything is dense.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "symmetrize",
    "is_finite_matrix",
    "null_space_orthonormal",
    "truncated_svd",
    "min_eigenvalue_sym",
    "vec_upper",
    "mat_from_upper",
]


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return the symmetric part (a + a.T)/2."""
    return 0.5 * (a + a.T)


def is_finite_matrix(a: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(a)))


def _fix_svd_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Deterministic sign convention: largest-magnitude entry of each left
    # singular vector is made positive.
    for j in range(u.shape[1]):
        col = u[:, j]
        k = int(np.argmax(np.abs(col)))
        if col[k] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return u, vt


def null_space_orthonormal(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis of ker(m) as columns of the returned matrix.

    Singular values below ``tol * sigma_max`` count as zero.  An empty
    (cols, 0) matrix is returned when the kernel is trivial.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = np.atleast_2d(np.asarray(m, dtype=float))
    _, s, vt = np.linalg.svd(m, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0 else 0
    basis = vt[rank:].T.copy()
    # Fix signs column-wise for reproducibility.
    for j in range(basis.shape[1]):
        k = int(np.argmax(np.abs(basis[:, j])))
        if basis[k, j] < 0:
            basis[:, j] = -basis[:, j]
    return basis


def truncated_svd(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-``r`` factors (U, s, V) with m ~= U @ diag(s) @ V.T.

    U, V have orthonormal columns and s is non-increasing.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if not 0 <= r <= min(m.shape):
        raise ValueError(f"rank {r} out of range for shape {m.shape}")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, vt = _fix_svd_signs(u, vt)
    return u[:, :r].copy(), s[:r].copy(), vt[:r].T.copy()


def min_eigenvalue_sym(s: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (symmetrized defensively)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if s.shape[0] == 0:
        return 0.0
    if not is_finite_matrix(s):
        raise ValueError("matrix has non-finite entries")
    return float(np.linalg.eigvalsh(symmetrize(s))[0])


def vec_upper(a: np.ndarray) -> np.ndarray:
    """Stack the upper triangle (including diagonal) of a symmetric matrix."""
    idx = np.triu_indices(a.shape[0])
    return a[idx]


def mat_from_upper(v: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of :func:`vec_upper`."""
    out = np.zeros((dim, dim))
    idx = np.triu_indices(dim)
    out[idx] = v
    out = out + out.T - np.diag(np.diag(out))
    return out
