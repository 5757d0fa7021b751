"""Dense float64 linear-algebra helpers shared by the rest of the package.

Matrices and vectors are plain ``numpy`` arrays. The helpers here pin the
summation order (ascending inner index) so anything that feeds a mask
decision is reproducible regardless of BLAS threading.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class SingularMatrixError(ValueError):
    pass


def _ordered_sum(v: np.ndarray) -> float:
    # add.accumulate is strictly sequential, unlike np.sum's pairwise scheme
    if v.size == 0:
        return 0.0
    return float(np.add.accumulate(v)[-1])


def as_matrix(a, dtype=np.float64) -> np.ndarray:
    m = np.asarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with the inner sum taken in ascending index order.

    ``result[i, k] = sum_j a[i, j] * b[j, k]`` accumulated j = 0, 1, ...
    Each step is a vectorised rank-one update, so the cost is one numpy
    call per inner index.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for j in range(a.shape[1]):
        out += a[:, j, None] * b[None, j, :]
    return out


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(np.sqrt(_ordered_sum(v * v)))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    su, sv = _ordered_sum(u * u), _ordered_sum(v * v)
    if su == 0.0 or sv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    dot = _ordered_sum(u * v)
    # one square root of the product keeps cos(u, u) == 1 exactly
    prod = su * sv
    den = np.sqrt(prod) if 0.0 < prod < np.inf else np.sqrt(su) * np.sqrt(sv)
    return float(min(1.0, max(-1.0, dot / den)))


def invert_spd(m, max_dim: int = 128) -> np.ndarray:
    """Invert a symmetric positive-definite matrix by Gauss-Jordan elimination
    with partial pivoting.

    Oracle use only (exact Hessian diagonals); never on the scoring path.
    """
    m = as_matrix(m)
    n = m.shape[0]
    if m.shape[1] != n:
        raise ShapeError(f"matrix is not square: {m.shape}")
    if n > max_dim:
        raise ShapeError(f"invert_spd is limited to dim <= {max_dim}, got {n}")
    if not np.all(np.isfinite(m)):
        raise SingularMatrixError("matrix has non-finite entries")
    if np.max(np.abs(m - m.T)) > 1e-9:
        raise ShapeError("matrix is not symmetric within 1e-9")

    tol = 1e-12 * float(np.max(np.abs(np.diag(m)))) if n else 0.0
    aug = np.hstack([m.copy(), np.eye(n)])
    for col in range(n):
        p = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[p, col]) <= tol or aug[p, col] == 0.0:
            raise SingularMatrixError(f"pivot {aug[p, col]:.3e} at column {col} is numerically singular")
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        aug[col] /= aug[col, col]
        others = np.arange(n) != col
        aug[others] -= aug[others, col, None] * aug[col]
    return aug[:, n:].copy()
