"""Permutation-augmented tests of ``H0: beta = 0`` in ``y = X beta + Z theta + eps``.

For each random permutation ``pi`` two augmented models are fitted,

    orig:  y ~ [X,    Z, Z_pi]
    perm:  y ~ [X_pi, Z, Z_pi]

and an evaluator scores each fit (smaller is better).  The Monte-Carlo
p-value is ``(1 + sum_b A_b) / (1 + B)`` with ``A_b = 1`` when the original
fit is not better than the permuted one.  Provided the fitter is invariant
to shifts of ``y`` along ``[Z, Z_pi]`` and treats rows symmetrically,
``P(p <= alpha) <= 2 alpha`` under the null for any evaluator.

Permutations are index arrays: ``A_pi`` means ``A[pi]``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba as nb
import numpy as np

from . import linalg, streams
from .regressors import (
    FitSummary,
    HuberConfig,
    QuantileConfig,
    huber_irls,
    huber_rho,
    quantile_regressions,
)

GUARANTEE_NOTE = (
    "finite-sample guarantee: P(p <= alpha) <= 2*alpha under H0 for exchangeable errors; "
    "compare p with alpha/2 for strict level-alpha control"
)
TIE_RTOL = 1e-10

FITTERS = ("OLS", "HuberMAD-prelim", "QuantilePair")
EVALUATORS = ("L1", "L2", "HuberScaled", "IQRLogRatio")


# --------------------------------------------------------------------------
# Data and specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Response ``y`` (n), interest covariates ``x`` (n, d), controls ``z`` (n, p).

    ``z`` carries its own intercept column; use :meth:`from_arrays` to add one.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = linalg.as_vector(self.y, "y")
        n = y.size
        if n < 2:
            raise ValueError("need at least two observations")
        x = linalg.as_matrix(self.x, n, "x")
        if x.shape[1] < 1:
            raise ValueError("x needs at least one column")
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise ValueError(f"z has {z.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(z)):
            raise ValueError("z contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @classmethod
    def from_arrays(cls, y, x, z=None, add_intercept: bool = True) -> "Dataset":
        y = np.asarray(y, dtype=float)
        n = y.size
        z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        if add_intercept and not _has_constant_column(z):
            z = np.column_stack([np.ones(n), z])
        return cls(y, x, z)

    @property
    def n(self) -> int:
        return self.y.size

    def with_response(self, y) -> "Dataset":
        return Dataset(y, self.x, self.z)

    def permute_rows(self, sigma) -> "Dataset":
        sigma = np.asarray(sigma)
        return Dataset(self.y[sigma], self.x[sigma], self.z[sigma])


def _has_constant_column(z: np.ndarray) -> bool:
    if z.shape[1] == 0:
        return False
    return bool(np.any(np.all(z == z[:1], axis=0) & np.any(z != 0, axis=0)))


@dataclass(frozen=True)
class FitterSpec:
    kind: str = "HuberMAD-prelim"
    huber: HuberConfig = HuberConfig()
    q_low: QuantileConfig = QuantileConfig(0.10)
    q_high: QuantileConfig = QuantileConfig(0.90)

    def __post_init__(self):
        if self.kind not in FITTERS:
            raise ValueError(f"unknown fitter {self.kind!r}; choose from {FITTERS}")
        if self.q_low.q >= self.q_high.q:
            raise ValueError("q_low must be below q_high")

    @property
    def label(self) -> str:
        return {"OLS": "OLS", "HuberMAD-prelim": "Huber", "QuantilePair": "Quantile"}[self.kind]


@dataclass(frozen=True)
class EvaluatorSpec:
    kind: str = "HuberScaled"
    delta: float = 1.345

    def __post_init__(self):
        if self.kind not in EVALUATORS:
            raise ValueError(f"unknown evaluator {self.kind!r}; choose from {EVALUATORS}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def label(self) -> str:
        return {"L1": "L1", "L2": "L2", "HuberScaled": "Huber", "IQRLogRatio": "IQR"}[self.kind]


def method_label(fitter: FitterSpec, evaluator) -> str:
    if fitter.kind == "QuantilePair":
        return "DispersionPALRMT"
    ev = evaluator.label if isinstance(evaluator, EvaluatorSpec) else getattr(evaluator, "__name__", "custom")
    return f"{fitter.label}-{ev}"


@dataclass
class DispersionSummary:
    """Group-wise mean inter-quantile spreads of one quantile-pair fit."""

    spread0: float
    spread1: float
    clamped: bool = False

    @property
    def statistic(self) -> float:
        return -abs(math.log(self.spread1 / self.spread0))


@dataclass
class TestReport:
    __test__ = False  # not a pytest class

    p_value: float
    B: int
    indicators: np.ndarray
    seed: int
    method: str
    fitter: str
    evaluator: str
    ties: str = "conservative"
    omega_orig: np.ndarray | None = None
    omega_perm: np.ndarray | None = None
    nonconverged: int = 0
    alpha_note: str = GUARANTEE_NOTE

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "fitter": self.fitter,
            "evaluator": self.evaluator,
            "p_value": self.p_value,
            "B": self.B,
            "seed": self.seed,
            "ties": self.ties,
            "n_indicators_one": float(np.sum(self.indicators)),
            "nonconverged_fits": self.nonconverged,
            "alpha_note": self.alpha_note,
        }


@dataclass
class ConfidenceInterval:
    beta_lo: float
    beta_hi: float
    alpha: float
    grid: np.ndarray
    p_values: np.ndarray
    contiguous: bool = True
    degenerate: bool = False
    seed: int = 0
    method: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "coverage_guarantee": 1.0 - 2.0 * self.alpha,
            "beta_lo": self.beta_lo,
            "beta_hi": self.beta_hi,
            "contiguous": self.contiguous,
            "degenerate": self.degenerate,
            "seed": self.seed,
            "grid": [float(b) for b in self.grid],
            "p_values": [float(p) for p in self.p_values],
        }


# --------------------------------------------------------------------------
# Permutations
# --------------------------------------------------------------------------


@nb.njit(cache=True)
def _fisher_yates(n, draws):
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = draws[n - 1 - i]
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm


def permutation(n: int, seed: int, b: int) -> np.ndarray:
    """Permutation number ``b`` of the stream ``seed``; a pure function of both."""
    rng = streams.stream(seed, streams.PERMUTATION, b)
    draws = rng.integers(0, np.arange(n, 1, -1), dtype=np.int64) if n > 1 else np.zeros(0, np.int64)
    return _fisher_yates(n, draws)


def sample_permutations(n: int, B: int, seed: int) -> np.ndarray:
    """``B`` independent uniform permutations of ``range(n)`` as a ``(B, n)`` array."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if B < 1:
        raise ValueError("B must be at least 1")
    return np.stack([permutation(n, seed, b) for b in range(B)])


def check_permutation(pi, n: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.intp)
    if pi.shape != (n,) or not np.array_equal(np.sort(pi), np.arange(n)):
        raise ValueError("not a permutation of range(n)")
    return pi


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------


def _grouped(designs: Sequence[np.ndarray]) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    """Group designs by their retained-column pattern and stack each group."""
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, D in enumerate(designs):
        groups[tuple(linalg.column_basis(D))].append(i)
    for key, idx in groups.items():
        cols = list(key)
        yield np.asarray(idx), np.stack([designs[i][:, cols] for i in idx])


def _ols_stack(y: np.ndarray, designs) -> np.ndarray:
    out = np.empty((len(designs), y.size))
    for idx, C in _grouped(designs):
        R = linalg.batch_residuals(np.broadcast_to(y, (idx.size, y.size)), C)
        small = np.linalg.norm(R, axis=1) <= linalg.EXACT_FIT_RTOL * np.linalg.norm(y)
        R[small] = 0.0
        out[idx] = R
    return out


def _huber_stack(y: np.ndarray, designs, cfg: HuberConfig, scale=None):
    m = len(designs)
    R = np.empty((m, y.size))
    s = np.empty(m)
    conv = np.ones(m, dtype=bool)
    degen = np.zeros(m, dtype=bool)
    for idx, C in _grouped(designs):
        Y = np.broadcast_to(y, (idx.size, y.size))
        res = huber_irls(Y, C, cfg, scale=None if scale is None else scale[idx])
        R[idx] = res.residuals
        s[idx] = res.scale
        conv[idx] = res.converged
        degen[idx] = res.degenerate
    return R, s, conv, degen


def _augmented(data: Dataset, pi: np.ndarray):
    zz = np.column_stack([data.z, data.z[pi]])
    orig = np.column_stack([data.x, zz])
    perm = np.column_stack([data.x[pi], zz])
    return zz, orig, perm


def _mad(R: np.ndarray, cfg: HuberConfig) -> np.ndarray:
    s = cfg.mad_factor * np.median(np.abs(R), axis=1)
    floor = np.maximum(1e-12, 1e-8 * np.mean(np.abs(R), axis=1))
    return np.where(s > 0, s, floor)


def _dispersion_summary(y, x_tau, design, fitter: FitterSpec) -> DispersionSummary:
    lo, hi = quantile_regressions(y, design, [fitter.q_low, fitter.q_high])
    spread = np.abs(hi.residuals - lo.residuals)
    g1 = x_tau == 1
    s1 = float(np.mean(spread[g1]))
    s0 = float(np.mean(spread[~g1]))
    clamped = False
    if s0 <= 0 or s1 <= 0:
        floor = max(1e-12 * float(np.mean(spread)), np.finfo(float).tiny)
        s0, s1 = max(s0, floor), max(s1, floor)
        clamped = True
    return DispersionSummary(s0, s1, clamped)


def _check_indicator(data: Dataset) -> np.ndarray:
    if data.x.shape[1] != 1:
        raise ValueError("dispersion test needs a single indicator column in x")
    x = data.x[:, 0]
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("dispersion test needs x to be a 0/1 indicator")
    if x.all() or not x.any():
        raise ValueError("both groups must be non-empty")
    return x


def paired_fits(data: Dataset, perms: np.ndarray, fitter: FitterSpec):
    """Fits of the original and permuted augmented models for every permutation.

    Returns two lists (orig, perm) of summaries, one entry per row of ``perms``.
    """
    perms = np.atleast_2d(np.asarray(perms, dtype=np.intp))
    y = data.y
    aug = [_augmented(data, pi) for pi in perms]

    if fitter.kind == "QuantilePair":
        x = _check_indicator(data)
        orig, perm = [], []
        for pi, (_, Co, Cp) in zip(perms, aug):
            orig.append(_dispersion_summary(y, x, Co, fitter))
            perm.append(_dispersion_summary(y, x[pi], Cp, fitter))
        return orig, perm

    zz = [a[0] for a in aug]
    Co = [a[1] for a in aug]
    Cp = [a[2] for a in aug]
    if fitter.kind == "OLS":
        s = _mad(_ols_stack(y, zz), fitter.huber)
        Ro, Rp = _ols_stack(y, Co), _ols_stack(y, Cp)
        conv_o = conv_p = np.ones(len(perms), dtype=bool)
        degen = np.zeros(len(perms), dtype=bool)
    else:
        _, s, conv_s, degen = _huber_stack(y, zz, fitter.huber)
        Ro, _, conv_o, _ = _huber_stack(y, Co, fitter.huber, scale=s)
        Rp, _, conv_p, _ = _huber_stack(y, Cp, fitter.huber, scale=s)
        conv_o = conv_o & conv_s
        conv_p = conv_p & conv_s
    Ro.sort(axis=1)
    Rp.sort(axis=1)
    orig = [
        FitSummary(Ro[b], float(s[b]), bool(conv_o[b]), bool(degen[b])) for b in range(len(perms))
    ]
    perm = [
        FitSummary(Rp[b], float(s[b]), bool(conv_p[b]), bool(degen[b])) for b in range(len(perms))
    ]
    return orig, perm


def paired_fit(data: Dataset, pi, fitter: FitterSpec):
    """``(M_orig, M_perm)`` for a single permutation ``pi``."""
    pi = check_permutation(pi, data.n)
    orig, perm = paired_fits(data, pi[None], fitter)
    return orig[0], perm[0]


# --------------------------------------------------------------------------
# Evaluation and the test
# --------------------------------------------------------------------------


def evaluate(summary, evaluator: EvaluatorSpec | Callable) -> float:
    """Goodness-of-fit score of a summary; smaller means a better fit."""
    if callable(evaluator) and not isinstance(evaluator, EvaluatorSpec):
        return float(evaluator(summary))
    kind = evaluator.kind
    if kind == "IQRLogRatio":
        if not isinstance(summary, DispersionSummary):
            raise ValueError("IQRLogRatio needs a quantile-pair summary")
        return summary.statistic
    r = summary.sorted_residuals
    if kind == "L2":
        return float(np.sum(r * r))
    if kind == "L1":
        return float(np.sum(np.abs(r)))
    if summary.scale is None:
        raise ValueError("HuberScaled evaluation needs a fit summary that carries a scale")
    return float(np.sum(huber_rho(r / summary.scale, evaluator.delta)))


def compare(omega_orig: np.ndarray, omega_perm: np.ndarray, ties: str = "conservative") -> np.ndarray:
    """Per-permutation indicators that the original fit is no better than the permuted one.

    Scores within ``TIE_RTOL`` (relative) of each other are ties; they count
    as 1 under the conservative convention and 1/2 under ``ties="half"``.
    """
    o = np.asarray(omega_orig, dtype=float)
    p = np.asarray(omega_perm, dtype=float)
    tie = np.abs(o - p) <= TIE_RTOL * np.maximum(np.abs(o), np.abs(p))
    if ties == "conservative":
        return np.where(tie | (o >= p), 1.0, 0.0)
    if ties == "half":
        return np.where(tie, 0.5, np.where(o > p, 1.0, 0.0))
    raise ValueError(f"unknown tie convention {ties!r}")


def p_value(indicators) -> float:
    a = np.asarray(indicators, dtype=float)
    return float((1.0 + a.sum()) / (1.0 + a.size))


def palmrt_tests(
    data: Dataset,
    fitter: FitterSpec,
    evaluators: Sequence,
    B: int = 999,
    seed: int = 0,
    ties: str = "conservative",
    perms: np.ndarray | None = None,
) -> list[TestReport]:
    """Run several evaluators on one shared set of augmented fits."""
    if perms is None:
        perms = sample_permutations(data.n, B, seed)
    B = len(perms)
    orig, perm = paired_fits(data, perms, fitter)
    nonconv = sum(not getattr(m, "converged", True) for m in orig + perm)
    reports = []
    for ev in evaluators:
        wo = np.array([evaluate(m, ev) for m in orig])
        wp = np.array([evaluate(m, ev) for m in perm])
        A = compare(wo, wp, ties)
        reports.append(
            TestReport(
                p_value=p_value(A),
                B=B,
                indicators=A,
                seed=seed,
                method=method_label(fitter, ev),
                fitter=fitter.kind,
                evaluator=ev.kind if isinstance(ev, EvaluatorSpec) else "custom",
                ties=ties,
                omega_orig=wo,
                omega_perm=wp,
                nonconverged=nonconv,
            )
        )
    return reports


def palmrt_test(
    data: Dataset,
    fitter: FitterSpec = FitterSpec(),
    evaluator=EvaluatorSpec(),
    B: int = 999,
    seed: int = 0,
    ties: str = "conservative",
) -> TestReport:
    """Monte-Carlo permutation p-value for ``H0: beta = 0``.

    The defaults (preliminary MAD-scale Huber fit, scaled Huber evaluation)
    give the Huber-Huber test; ``FitterSpec("OLS")`` with
    ``EvaluatorSpec("L2")`` gives the least-squares version.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    return palmrt_tests(data, fitter, [evaluator], B, seed, ties)[0]


def dispersion_test(
    data: Dataset,
    q_low: QuantileConfig = QuantileConfig(0.10),
    q_high: QuantileConfig = QuantileConfig(0.90),
    B: int = 999,
    seed: int = 0,
    ties: str = "conservative",
) -> TestReport:
    """Permutation test for a difference in conditional inter-quantile spread between two groups.

    ``data.x`` must be a single 0/1 column.  For each permutation the
    ``q_low`` and ``q_high`` quantile regressions of ``y`` on
    ``[x_tau, Z, Z_pi]`` are fitted for ``tau`` in ``{id, pi}``; the
    per-observation spread ``|Q_high - Q_low|`` is averaged within each group
    and the statistic is ``-|log(spread_1 / spread_0)|``.
    """
    _check_indicator(data)
    fitter = FitterSpec("QuantilePair", q_low=q_low, q_high=q_high)
    return palmrt_test(data, fitter, EvaluatorSpec("IQRLogRatio"), B, seed, ties)


def invert_ci(
    data: Dataset,
    fitter: FitterSpec = FitterSpec(),
    evaluator=EvaluatorSpec(),
    B: int = 999,
    seed: int = 0,
    alpha: float = 0.05,
    beta_grid: Sequence[float] = (),
) -> ConfidenceInterval:
    """Confidence set for a scalar ``beta`` by inverting the test over ``beta_grid``.

    Every grid point reuses the same permutations, so the p-value curve is
    smooth in ``beta``.  The interval spans the accepted grid points
    (``p > alpha``); its coverage guarantee is ``1 - 2 alpha``.
    """
    if data.x.shape[1] != 1:
        raise ValueError("confidence intervals need a single interest covariate")
    grid = np.asarray(beta_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("beta_grid is empty")
    if np.any(np.diff(grid) < 0):
        raise ValueError("beta_grid must be sorted")
    perms = sample_permutations(data.n, B, seed)
    x = data.x[:, 0]
    pvals = np.array(
        [
            palmrt_tests(data.with_response(data.y - x * b0), fitter, [evaluator], seed=seed, perms=perms)[0].p_value
            for b0 in grid
        ]
    )
    accepted = np.flatnonzero(pvals > alpha)
    label = method_label(fitter, evaluator)
    if accepted.size == 0:
        return ConfidenceInterval(math.nan, math.nan, alpha, grid, pvals, False, True, seed, label)
    contiguous = bool(accepted[-1] - accepted[0] + 1 == accepted.size)
    return ConfidenceInterval(
        float(grid[accepted[0]]), float(grid[accepted[-1]]), alpha, grid, pvals, contiguous, False, seed, label
    )
