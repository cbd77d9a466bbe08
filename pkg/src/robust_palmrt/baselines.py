"""Classical comparators: the partial F-test and the studentized Breusch-Pagan test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .framework import Dataset
from .special import chi2_sf, f_sf


@dataclass
class ClassicalReport:
    statistic: float
    df: tuple[int, ...]
    p_value: float
    method: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "statistic": self.statistic,
            "df": list(self.df),
            "p_value": self.p_value,
        }


def _rank(C: np.ndarray) -> int:
    return int(linalg.column_basis(C).size)


def partial_f_test(data: Dataset) -> ClassicalReport:
    """F-test of ``y ~ Z`` against ``y ~ X + Z``.

    ``F = ((RSS0 - RSS1) / d) / (RSS1 / (n - d - p))`` with the upper tail of
    ``F(d, n - d - p)``.
    """
    n, d = data.x.shape
    p = data.z.shape[1]
    full = np.column_stack([data.x, data.z])
    if _rank(full) < d + p:
        raise ValueError("combined design [X, Z] is rank deficient")
    df2 = n - d - p
    if df2 < 1:
        raise ValueError(f"insufficient residual degrees of freedom (n={n}, d={d}, p={p})")
    rss0 = float(np.sum(linalg.least_squares_residuals(data.y, data.z) ** 2))
    rss1 = float(np.sum(linalg.least_squares_residuals(data.y, full) ** 2))
    if rss1 <= 0:
        raise ValueError("residual sum of squares is zero; the F statistic is undefined")
    stat = max(0.0, (rss0 - rss1) / d) / (rss1 / df2)
    return ClassicalReport(stat, (d, df2), f_sf(stat, d, df2), "F-test")


def breusch_pagan_koenker(data: Dataset) -> ClassicalReport:
    """Koenker's studentized Breusch-Pagan test.

    Squared OLS residuals of ``y ~ X + Z`` are regressed on ``[X, Z]``; the
    statistic is ``n R^2`` of that auxiliary regression, referred to a
    chi-square with one degree of freedom per non-intercept covariate.
    """
    n = data.n
    full = np.column_stack([data.x, data.z])
    k = full.shape[1]
    if _rank(full) < k:
        raise ValueError("combined design [X, Z] is rank deficient")
    if n <= k:
        raise ValueError("insufficient degrees of freedom")
    e = linalg.least_squares_residuals(data.y, full)
    u = e * e
    resid = linalg.least_squares_residuals(u, full)
    centered = u - u.mean()
    tss = float(centered @ centered)
    # constant squared residuals: no variance to explain
    r2 = 0.0 if tss <= 1e-24 * float(u @ u) else max(0.0, 1.0 - float(resid @ resid) / tss)
    has_const = bool(np.any(np.all(full == full[:1], axis=0) & np.any(full != 0, axis=0)))
    df = k - 1 if has_const else k
    stat = n * r2
    return ClassicalReport(stat, (df,), chi2_sf(stat, df), "Breusch-Pagan")
