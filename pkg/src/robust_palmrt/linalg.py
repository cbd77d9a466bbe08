"""Dense least-squares kernels and order statistics shared by the fitters.

Rank deficiency is routine here: ``[Z, Z_pi]`` repeats the intercept column
for every permutation, so every projection goes through a column-pivoted QR
that drops dependent columns before solving.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

RANK_RTOL = 1e-10
# Residual vectors smaller than this fraction of ||y|| are rounding noise
# from an exact fit and are returned as exact zeros.
EXACT_FIT_RTOL = 1e-11


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_matrix(C, n: int | None = None, name: str = "matrix") -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    if C.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {C.shape}")
    if C.shape[0] < 1:
        raise ValueError(f"{name} must have at least one row")
    if n is not None and C.shape[0] != n:
        raise ValueError(f"{name} has {C.shape[0]} rows, expected {n}")
    if not np.all(np.isfinite(C)):
        raise ValueError(f"{name} contains non-finite entries")
    return C


def column_basis(C: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Indices (ascending) of a maximal independent subset of the columns of ``C``.

    Uses LAPACK's column-pivoted QR; among columns of equal remaining norm the
    lowest index is pivoted first.  A column is dependent when its diagonal
    entry falls below ``rtol`` times the largest column norm.
    """
    C = np.asarray(C, dtype=float)
    k = C.shape[1]
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    _, R, piv = scipy.linalg.qr(C, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros(0, dtype=np.intp)
    rank = int(np.count_nonzero(diag > rtol * diag[0]))
    return np.sort(piv[:rank])


def _project_out(y: np.ndarray, C: np.ndarray) -> np.ndarray:
    keep = column_basis(C)
    if keep.size == 0:
        return y.copy()
    Q, _ = np.linalg.qr(C[:, keep])
    r = y - Q @ (Q.T @ y)
    if np.linalg.norm(r) <= EXACT_FIT_RTOL * np.linalg.norm(y):
        r = np.zeros_like(y)
    return r


def least_squares_residuals(y, C) -> np.ndarray:
    """Residuals ``y - H(C) y`` of the orthogonal projection onto span(C)."""
    y = as_vector(y, "y")
    C = as_matrix(C, y.size, "C")
    return _project_out(y, C)


def weighted_least_squares_residuals(y, C, w) -> np.ndarray:
    """Residuals of the weighted projection minimising ``sum w_i (y_i - C_i b)^2``.

    Rows with zero weight do not influence the fit; their residuals are
    still reported as ``y_i - C_i b``.
    """
    y = as_vector(y, "y")
    C = as_matrix(C, y.size, "C")
    w = as_vector(w, "w")
    if w.size != y.size:
        raise ValueError(f"w has length {w.size}, expected {y.size}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.any(w > 0):
        raise ValueError("weights are all zero")
    sw = np.sqrt(w)
    Cw = C * sw[:, None]
    keep = column_basis(Cw)
    if keep.size == 0:
        return y.copy()
    coef, *_ = np.linalg.lstsq(Cw[:, keep], y * sw, rcond=None)
    return y - C[:, keep] @ coef


def batch_residuals(Y: np.ndarray, C: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Stacked (weighted) least-squares residuals.

    ``Y`` has shape ``(m, n)`` and ``C`` shape ``(m, n, k)`` with every slice of
    full column rank; ``w`` is ``None`` or a positive ``(m, n)`` array.
    """
    if w is None:
        Q, _ = np.linalg.qr(C)
        fitted = np.einsum("mnk,mk->mn", Q, np.einsum("mnk,mn->mk", Q, Y))
        return Y - fitted
    # Column-equilibrated normal equations: four times cheaper than a stacked
    # QR and accurate enough for IRLS sweeps, which start from a QR projection.
    CwT = (C * w[:, :, None]).transpose(0, 2, 1)
    G = CwT @ C
    d = 1.0 / np.sqrt(np.einsum("mkk->mk", G))
    G *= d[:, :, None] * d[:, None, :]
    rhs = (CwT @ Y[:, :, None])[:, :, 0] * d
    try:
        coef = np.linalg.solve(G, rhs[:, :, None])[:, :, 0] * d
    except np.linalg.LinAlgError:
        coef = None
    if coef is None or not np.all(np.isfinite(coef)):
        sw = np.sqrt(w)
        Q, R = np.linalg.qr(C * sw[:, :, None])
        qty = np.einsum("mnk,mn->mk", Q, Y * sw)
        coef = np.linalg.solve(R, qty[:, :, None])[:, :, 0]
    return Y - (C @ coef[:, :, None])[:, :, 0]


def median(v) -> float:
    """Median; the mean of the two central order statistics for even length."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("median of an empty vector")
    s = np.sort(v)
    m = s.size // 2
    if s.size % 2:
        return float(s[m])
    return float(0.5 * (s[m - 1] + s[m]))


def quantile(v, q: float) -> float:
    """Left-continuous inverse of the empirical CDF (type 1).

    Returns the order statistic ``x_(k)`` with ``k = max(1, ceil(n q))``.
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty vector")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    s = np.sort(v)
    k = max(1, int(np.ceil(s.size * q - 1e-12)))
    return float(s[k - 1])
