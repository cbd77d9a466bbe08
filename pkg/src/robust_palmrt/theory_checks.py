"""Executable oracles for the combinatorics and invariances behind the 2-alpha guarantee.

* The weighted column-sum lemma: for a tournament matrix ``A``
  (``A_ij + A_ji = 1``) and probability weights ``w``, the ``w``-mass of the
  columns with weighted sum ``<= alpha`` is at most ``2 alpha``.
* The comparison-array symmetry
  ``T(pi1, pi2; eps_sigma) = T(pi1 o sigma^-1, pi2 o sigma^-1; eps)`` with
  ``T(pi1, pi2; eps) = omega(M(eps, X_pi2, [Z_pi1, Z_pi2]))``.
* Spot checks of fitter shift invariance and row symmetry.

Permutations are index arrays, ``A_pi = A[pi]``; in that notation the
symmetry reads ``T(pi1, pi2; eps[sigma]) = T(pi1[sigma_inv], pi2[sigma_inv]; eps)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import linalg, streams
from .framework import (
    Dataset,
    DispersionSummary,
    EvaluatorSpec,
    FitterSpec,
    check_permutation,
    evaluate,
    permutation,
)
from .regressors import (
    FitSummary,
    HuberConfig,
    QuantileConfig,
    huber_fit_fixed,
    huber_fit_mad,
    ols_fit,
    quantile_fit,
    quantile_regressions,
)

# --------------------------------------------------------------------------
# Tournament lemma
# --------------------------------------------------------------------------


def check_tournament(A, atol: float = 1e-12) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("tournament matrix must be square")
    if np.any(A < -atol) or np.any(A > 1 + atol):
        raise ValueError("tournament entries must lie in [0, 1]")
    if not np.allclose(A + A.T, 1.0, rtol=0.0, atol=atol):
        raise ValueError("tournament matrix must satisfy A_ij + A_ji = 1")
    return A


def _check_weights(w, m: int, atol: float = 1e-12) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (m,):
        raise ValueError(f"w must have length {m}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > atol:
        raise ValueError("weights must sum to one")
    return w


def random_tournament(m: int, rng: np.random.Generator, binary: bool = False) -> np.ndarray:
    """Strict upper triangle uniform on [0, 1] (or fair 0/1), reflected as ``1 - A``; diagonal 1/2."""
    A = np.full((m, m), 0.5)
    iu = np.triu_indices(m, 1)
    u = rng.random(iu[0].size)
    A[iu] = np.round(u) if binary else u
    A[(iu[1], iu[0])] = 1.0 - A[iu]
    return A


def small_column_sets(A, w, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """The two descriptions of the small set: ``sum_j w_j A_ij >= 1 - alpha`` and ``sum_j w_j A_ji <= alpha``.

    With ``A_ji = 1 - A_ij`` and ``sum w = 1`` these are the same set up to
    rounding; both are returned as boolean masks so callers can compare them.
    """
    A = check_tournament(A)
    w = _check_weights(w, A.shape[0])
    rows = A @ w
    cols = w @ A
    eps = 1e-12
    return rows >= 1.0 - alpha - eps, cols <= alpha + eps


def weighted_small_column_mass(A, w, alpha: float) -> float:
    """``sum_i w_i 1{sum_j w_j A_ji <= alpha}``; the lemma bounds it by ``2 alpha``."""
    if not 0.0 <= alpha <= 0.5:
        raise ValueError("alpha must lie in [0, 1/2]")
    A = check_tournament(A)
    w = _check_weights(w, A.shape[0])
    cols = w @ A
    # small slack so that boundary cases computed with rounding stay included
    return float(np.sum(w[cols <= alpha + 1e-12]))


@dataclass
class LemmaSweep:
    instances: int
    violations: int
    set_mismatches: int
    worst_ratio: float  # max mass / (2 alpha) over instances with alpha > 0


def lemma_sweep(instances: int = 10_000, m_max: int = 8, seed: int = 0) -> LemmaSweep:
    """Random ``(A, w, alpha)`` with ``m <= m_max``; counts bound violations and set mismatches.

    Weights come from a Dirichlet draw, sometimes with coordinates zeroed,
    and ``alpha`` is either uniform on ``[0, 1/2]`` or set to one of the
    column sums so the boundary case is exercised.
    """
    rng = streams.stream(seed, streams.THEORY)
    violations = mismatches = 0
    worst = 0.0
    for _ in range(instances):
        m = int(rng.integers(1, m_max + 1))
        # a third of the instances are 0/1 tournaments, the extreme case
        A = random_tournament(m, rng, binary=rng.random() < 0.3)
        w = rng.dirichlet(np.ones(m))
        if m > 1 and rng.random() < 0.2:
            w[rng.integers(0, m)] = 0.0
            w = w / w.sum()
        cols = w @ A
        if rng.random() < 0.5:
            alpha = float(rng.random() * 0.5)
        else:
            alpha = float(min(0.5, cols[rng.integers(0, m)]))
        mass = weighted_small_column_mass(A, w, alpha)
        if mass > 2.0 * alpha + 1e-12:
            violations += 1
        if alpha > 0:
            worst = max(worst, mass / (2.0 * alpha))
        by_row, by_col = small_column_sets(A, w, alpha)
        if not np.array_equal(by_row, by_col):
            mismatches += 1
    return LemmaSweep(instances, violations, mismatches, worst)


# --------------------------------------------------------------------------
# Comparison-array symmetry
# --------------------------------------------------------------------------

# A fitter for the symmetry check maps (eps, X, [Z1, Z2]) to a summary.
AugmentedFitter = Callable[[np.ndarray, np.ndarray, np.ndarray], object]


def spec_fitter(spec: FitterSpec) -> AugmentedFitter:
    """The augmented-model fitter described by ``spec`` as a plain function."""

    def fit(y, X, ZZ):
        C = np.column_stack([X, ZZ])
        if spec.kind == "OLS":
            return ols_fit(y, C)
        if spec.kind == "HuberMAD-prelim":
            s = huber_fit_mad(y, ZZ, spec.huber).scale
            return huber_fit_fixed(y, C, s, spec.huber)
        lo, hi = quantile_regressions(y, C, [spec.q_low, spec.q_high])
        spread = np.abs(hi.residuals - lo.residuals)
        g1 = X[:, 0] == 1
        return DispersionSummary(float(np.mean(spread[~g1])), float(np.mean(spread[g1])))

    return fit


def row_weighted_ols(weight: float = 10.0) -> AugmentedFitter:
    """Deliberately asymmetric fitter: least squares with extra weight on row 0."""

    def fit(y, X, ZZ):
        C = np.column_stack([X, ZZ])
        w = np.ones(y.size)
        w[0] = weight
        r = linalg.weighted_least_squares_residuals(y, C, w)
        return FitSummary(np.sort(r))

    return fit


def comparison_value(
    data: Dataset, fitter: AugmentedFitter, evaluator, pi1, pi2, eps: np.ndarray | None = None
) -> float:
    """``T(pi1, pi2; eps) = omega(M(eps, X[pi2], [Z[pi1], Z[pi2]]))``; ``eps`` defaults to ``data.y``."""
    eps = data.y if eps is None else eps
    ZZ = np.column_stack([data.z[pi1], data.z[pi2]])
    return evaluate(fitter(eps, data.x[pi2], ZZ), evaluator)


def comparison_array_symmetry_check(
    data: Dataset,
    fitter: FitterSpec | AugmentedFitter,
    evaluator,
    sigma,
    pis: Sequence[tuple[np.ndarray, np.ndarray]],
    rtol: float = 1e-8,
) -> bool:
    """True when ``T(pi1, pi2; eps[sigma]) == T(pi1[sigma_inv], pi2[sigma_inv]; eps)`` for every pair."""
    fit = spec_fitter(fitter) if isinstance(fitter, FitterSpec) else fitter
    n = data.n
    sigma = check_permutation(sigma, n)
    sigma_inv = np.argsort(sigma)
    eps = data.y
    for pi1, pi2 in pis:
        pi1 = check_permutation(pi1, n)
        pi2 = check_permutation(pi2, n)
        left = comparison_value(data, fit, evaluator, pi1, pi2, eps[sigma])
        right = comparison_value(data, fit, evaluator, pi1[sigma_inv], pi2[sigma_inv], eps)
        if abs(left - right) > rtol * max(1.0, abs(left), abs(right)):
            return False
    return True


# --------------------------------------------------------------------------
# Fitter conditions
# --------------------------------------------------------------------------


def _quantile_summary(y, C, cfg=QuantileConfig(0.5)):
    r = quantile_fit(y, C, cfg)
    return FitSummary(np.sort(r))


# Each entry maps (y, C) to a FitSummary.
CONDITION_FITTERS: dict[str, Callable] = {
    "OLS": ols_fit,
    "HuberMAD": lambda y, C: huber_fit_mad(y, C, HuberConfig()),
    "HuberFixed": lambda y, C: huber_fit_fixed(y, C, 1.0, HuberConfig()),
    "Quantile": _quantile_summary,
}


def random_instance(rng: np.random.Generator, n_range=(8, 40), k_range=(1, 5)):
    """Random ``(y, C)`` with an intercept column and heavy-tailed noise."""
    n = int(rng.integers(*n_range))
    k = int(rng.integers(k_range[0], min(k_range[1], n - 2) + 1))
    C = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
    y = C @ rng.standard_normal(k) + rng.standard_t(3, n)
    return y, C


def _close(a: FitSummary, b: FitSummary, rtol: float, ref: float) -> bool:
    ok = np.allclose(a.sorted_residuals, b.sorted_residuals, rtol=0.0, atol=rtol * ref)
    if a.scale is not None or b.scale is not None:
        ok = ok and a.scale is not None and b.scale is not None
        ok = ok and abs(a.scale - b.scale) <= rtol * max(ref, abs(a.scale))
    return bool(ok)


def shift_invariance_check(fit: Callable, y, C, gamma, rtol: float = 1e-6) -> bool:
    """``fit(y + C gamma, C)`` matches ``fit(y, C)``."""
    ref = max(1.0, float(np.linalg.norm(y)))
    return _close(fit(y + C @ gamma, C), fit(y, C), rtol, ref)


def symmetry_check(fit: Callable, y, C, sigma, rtol: float = 1e-8) -> bool:
    """``fit(y[sigma], C[sigma])`` matches ``fit(y, C)`` as a sorted summary."""
    ref = max(1.0, float(np.linalg.norm(y)))
    return _close(fit(y[sigma], C[sigma]), fit(y, C), rtol, ref)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def run_checks(seed: int = 0, instances: int = 100, lemma_instances: int = 10_000) -> list[CheckResult]:
    """Property suites used by the ``check`` command."""
    out: list[CheckResult] = []
    rng = streams.stream(seed, streams.THEORY, 1)
    for name, fit in CONDITION_FITTERS.items():
        bad1 = bad2 = 0
        for _ in range(instances):
            y, C = random_instance(rng)
            gamma = 10.0 * rng.standard_normal(C.shape[1])
            bad1 += not shift_invariance_check(fit, y, C, gamma)
            bad2 += not symmetry_check(fit, y, C, rng.permutation(y.size))
        out.append(CheckResult(f"condition1:{name}", bad1 == 0, f"{bad1}/{instances} failures"))
        out.append(CheckResult(f"condition2:{name}", bad2 == 0, f"{bad2}/{instances} failures"))

    sweep = lemma_sweep(lemma_instances, 8, seed)
    out.append(
        CheckResult(
            "lemma:column-mass", sweep.violations == 0, f"{sweep.violations}/{sweep.instances} violations"
        )
    )
    out.append(
        CheckResult(
            "lemma:two-set-definitions",
            sweep.set_mismatches == 0,
            f"{sweep.set_mismatches}/{sweep.instances} mismatches",
        )
    )

    n = 30
    y, C = random_instance(rng, (n, n + 1), (4, 5))
    data = Dataset(y, C[:, 1:2], C[:, [0, 2, 3]])
    sigma = rng.permutation(n)
    pis = [(permutation(n, seed, 2 * i), permutation(n, seed, 2 * i + 1)) for i in range(20)]
    for label, fitter, ev in (
        ("OLS-L2", FitterSpec("OLS"), EvaluatorSpec("L2")),
        ("Huber-Huber", FitterSpec(), EvaluatorSpec("HuberScaled")),
    ):
        ok = comparison_array_symmetry_check(data, fitter, ev, sigma, pis)
        out.append(CheckResult(f"array-symmetry:{label}", ok, "20 permutation pairs, n = 30"))
    return out
