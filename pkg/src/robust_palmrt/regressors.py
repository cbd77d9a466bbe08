"""Model-fitting algorithms: OLS, Huber IRLS (MAD or fixed scale), quantile regression.

Every fitter here is shift invariant (its output depends on ``y`` only through
the residuals of an initial projection onto the design) and treats rows
symmetrically, which is what the permutation tests in ``framework`` require.

The Huber routines work on stacks of problems so that the ``B`` augmented
fits of one permutation test run as a single vectorised loop; the scalar
entry points are stacks of size one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from ._simplex import rq_simplex

__all__ = [
    "FitSummary",
    "HuberConfig",
    "QuantileConfig",
    "QuantileFit",
    "huber_rho",
    "huber_loss",
    "ols_fit",
    "huber_fit_mad",
    "huber_fit_fixed",
    "huber_irls",
    "quantile_fit",
    "quantile_regression",
]


@dataclass(frozen=True)
class HuberConfig:
    delta: float = 1.345
    mad_factor: float = 1.4826
    rel_tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.mad_factor > 0:
            raise ValueError("mad_factor must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class QuantileConfig:
    q: float = 0.5
    tol: float = 1e-9
    max_iter: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie strictly between 0 and 1, got {self.q}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class FitSummary:
    """Sorted residuals of a fit plus the scale it was fitted with, if any."""

    sorted_residuals: np.ndarray
    scale: float | None = None
    converged: bool = True
    degenerate_scale: bool = False
    iterations: int = 0

    def __post_init__(self):
        r = np.asarray(self.sorted_residuals, dtype=float)
        if r.size > 1 and np.any(np.diff(r) < 0):
            raise ValueError("sorted_residuals must be ascending")
        self.sorted_residuals = r
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive when present")


def huber_rho(t, delta: float = 1.345):
    """Huber's loss: quadratic inside ``[-delta, delta]``, linear outside."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    a = np.abs(np.asarray(t, dtype=float))
    out = np.where(a <= delta, 0.5 * a * a, a * delta - 0.5 * delta * delta)
    return out if out.ndim else float(out)


def huber_loss(r, scale: float, delta: float = 1.345) -> float:
    return float(np.sum(huber_rho(np.asarray(r, dtype=float) / scale, delta)))


def ols_fit(y, C) -> FitSummary:
    return FitSummary(np.sort(linalg.least_squares_residuals(y, C)))


# --------------------------------------------------------------------------
# Huber IRLS
# --------------------------------------------------------------------------


@dataclass
class IRLSResult:
    residuals: np.ndarray  # (m, n), observation aligned
    scale: np.ndarray  # (m,)
    converged: np.ndarray  # (m,) bool
    degenerate: np.ndarray  # (m,) bool
    iterations: np.ndarray  # (m,) int
    loss_trace: list = field(default_factory=list)


def _huber_weights(R: np.ndarray, s: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(R)
    with np.errstate(divide="ignore"):
        w = np.where(a > 0, delta * s[:, None] / np.where(a > 0, a, 1.0), 1.0)
    return np.minimum(1.0, w)


def _mad_scale(R: np.ndarray, cfg: HuberConfig, floor: np.ndarray):
    s = cfg.mad_factor * np.median(np.abs(R), axis=1)
    bad = s <= 0
    return np.where(bad, floor, s), bad


def huber_irls(
    Y: np.ndarray,
    C: np.ndarray,
    cfg: HuberConfig = HuberConfig(),
    scale: np.ndarray | float | None = None,
    trace: bool = False,
) -> IRLSResult:
    """Huber regression by IRLS for a stack of problems.

    ``Y`` is ``(m, n)``, ``C`` is ``(m, n, k)`` with full column rank slices.
    With ``scale=None`` the scale is re-estimated each sweep as
    ``mad_factor * median|R|``; otherwise it is held fixed.  Each sweep
    replaces ``R`` by the residuals of the weighted regression of ``R`` on
    ``C`` with weights ``min(1, delta * s / |R_i|)``; a problem stops once
    ``||R_new - R|| / ||R|| < rel_tol``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    C = np.asarray(C, dtype=float)
    if C.ndim == 2:
        C = C[None]
    m, n = Y.shape
    if C.shape[:2] != (m, n):
        raise ValueError(f"design stack has shape {C.shape}, expected ({m}, {n}, k)")

    R = linalg.batch_residuals(Y, C)
    ynorm = np.linalg.norm(Y, axis=1)
    R[np.linalg.norm(R, axis=1) <= linalg.EXACT_FIT_RTOL * ynorm] = 0.0
    floor = np.maximum(1e-12, 1e-8 * np.mean(np.abs(R), axis=1))

    estimate = scale is None
    if estimate:
        s = np.empty(m)
        degenerate = np.zeros(m, dtype=bool)
    else:
        s = np.broadcast_to(np.asarray(scale, dtype=float), (m,)).copy()
        if np.any(s <= 0):
            raise ValueError("fixed scale must be positive")
        degenerate = np.zeros(m, dtype=bool)

    active = np.ones(m, dtype=bool)
    iterations = np.zeros(m, dtype=int)
    losses = []
    if trace and not estimate:
        losses.append(np.sum(huber_rho(R / s[:, None], cfg.delta), axis=1))

    for _ in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ra = R[idx]
        if estimate:
            sa, bad = _mad_scale(Ra, cfg, floor[idx])
            s[idx] = sa
            degenerate[idx] |= bad
        else:
            sa = s[idx]
        w = _huber_weights(Ra, sa, cfg.delta)
        Rn = linalg.batch_residuals(Ra, C[idx], w)
        num = np.linalg.norm(Rn - Ra, axis=1)
        den = np.linalg.norm(Ra, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            crit = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        R[idx] = Rn
        iterations[idx] += 1
        active[idx[crit < cfg.rel_tol]] = False
        if trace and not estimate:
            losses.append(np.sum(huber_rho(R / s[:, None], cfg.delta), axis=1))

    return IRLSResult(
        residuals=R,
        scale=s,
        converged=~active,
        degenerate=degenerate,
        iterations=iterations,
        loss_trace=losses,
    )


def _reduced_design(y, C) -> tuple[np.ndarray, np.ndarray]:
    y = linalg.as_vector(y, "y")
    C = linalg.as_matrix(C, y.size, "C")
    if y.size < 2:
        raise ValueError("need at least two observations")
    keep = linalg.column_basis(C)
    if keep.size == 0:
        raise ValueError("design has no non-zero column")
    return y, C[:, keep]


def _summary(res: IRLSResult, i: int = 0) -> FitSummary:
    if not res.converged[i]:
        warnings.warn("Huber IRLS reached max_iter without converging", RuntimeWarning, stacklevel=3)
    return FitSummary(
        np.sort(res.residuals[i]),
        scale=float(res.scale[i]),
        converged=bool(res.converged[i]),
        degenerate_scale=bool(res.degenerate[i]),
        iterations=int(res.iterations[i]),
    )


def huber_fit_mad(y, C, cfg: HuberConfig = HuberConfig()) -> FitSummary:
    """Huber regression with the scale re-estimated by MAD at every sweep."""
    y, Cr = _reduced_design(y, C)
    return _summary(huber_irls(y[None], Cr[None], cfg))


def huber_fit_fixed(y, C, s: float, cfg: HuberConfig = HuberConfig()) -> FitSummary:
    """Huber regression with the scale held at ``s``."""
    if not s > 0:
        raise ValueError("scale must be positive")
    y, Cr = _reduced_design(y, C)
    return _summary(huber_irls(y[None], Cr[None], cfg, scale=s))


def huber_residuals(y, C, cfg: HuberConfig = HuberConfig(), scale: float | None = None):
    """Observation-aligned Huber residuals and the final scale."""
    y, Cr = _reduced_design(y, C)
    res = huber_irls(y[None], Cr[None], cfg, scale=scale)
    return res.residuals[0], float(res.scale[0])


# --------------------------------------------------------------------------
# Quantile regression
# --------------------------------------------------------------------------


@dataclass
class QuantileFit:
    coef: np.ndarray  # coefficients on the retained columns
    columns: np.ndarray  # indices of the retained columns of C
    residuals: np.ndarray  # observation aligned
    basis: np.ndarray  # observations interpolated by the solution
    iterations: int
    converged: bool


def quantile_regression(y, C, cfg: QuantileConfig = QuantileConfig()) -> QuantileFit:
    """Minimise the pinball loss ``sum rho_q(y_i - C_i b)``.

    Dependent columns are dropped first.  The solver is a dual simplex over
    basic solutions (``k`` interpolated observations) with a bound-flipping
    ratio test; ties are always broken towards the lowest observation index,
    so the same vertex is returned on every call, and the starting basis is
    chosen from OLS residuals, which keeps the fit shift invariant.
    """
    return quantile_regressions(y, C, [cfg])[0]


def quantile_regressions(y, C, cfgs) -> list[QuantileFit]:
    """:func:`quantile_regression` at several levels, sharing the design preprocessing."""
    y = linalg.as_vector(y, "y")
    C = linalg.as_matrix(C, y.size, "C")
    keep = linalg.column_basis(C)
    if keep.size == 0:
        raise ValueError("design has no non-zero column")
    if keep.size > y.size:
        raise ValueError("more independent columns than observations")
    # unit max-norm columns: same column space, better conditioned bases
    colscale = np.max(np.abs(C[:, keep]), axis=0)
    Cr = np.ascontiguousarray(C[:, keep] / colscale)
    r0 = linalg.least_squares_residuals(y, Cr)
    order = np.argsort(np.abs(r0), kind="stable")
    fits = []
    for cfg in cfgs:
        coef, resid, basis, iters, status = rq_simplex(y, Cr, float(cfg.q), order, cfg.tol, cfg.max_iter)
        coef = coef / colscale
        if status == 2:
            raise ValueError("rank failure: could not find an initial basis after deduplication")
        if status == 3:
            raise ArithmeticError("quantile simplex found an unbounded direction")
        converged = status == 0
        if not converged:
            warnings.warn("quantile simplex hit max_iter", RuntimeWarning, stacklevel=2)
        fits.append(QuantileFit(coef, keep, resid, np.sort(basis), int(iters), converged))
    return fits


def quantile_fit(y, C, cfg: QuantileConfig = QuantileConfig()) -> np.ndarray:
    """Observation-aligned residuals of the ``cfg.q`` quantile regression of ``y`` on ``C``."""
    return quantile_regression(y, C, cfg).residuals


def pinball_loss(r, q: float) -> float:
    r = np.asarray(r, dtype=float)
    return float(np.sum(r * (q - (r < 0))))
