"""Monte-Carlo type-I error and power studies.

A :class:`SimSetting` is one cell of the experimental grid.  Trial ``t`` of a
setting draws its covariates and errors from the counter-based stream keyed
by ``seed0 + t * seed_step``, so any single trial can be regenerated in
isolation, and every method in a trial sees the identical dataset.

Location settings follow ``y = X beta + eps`` (``theta = 0``; all tests are
invariant to ``Z theta``).  Dispersion settings follow
``y = (1 + beta X) eps`` with ``X`` a balanced 0/1 indicator.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special as sps

from . import streams
from .baselines import breusch_pagan_koenker, partial_f_test
from .framework import Dataset, EvaluatorSpec, FitterSpec, palmrt_tests, sample_permutations
from .special import f_isf

DESIGNS = ("Normal", "T3", "Cauchy", "BalancedANOVA")
ERRORS = ("Normal", "T3", "Cauchy", "LogNormal", "MultinomialOutlier")
MODES = ("location", "dispersion")

# method label -> (fitter kind, evaluator kind); None marks a classical test
METHODS: dict[str, tuple[str, str] | None] = {
    "F-test": None,
    "Breusch-Pagan": None,
    "OLS-L2": ("OLS", "L2"),
    "OLS-L1": ("OLS", "L1"),
    "OLS-Huber": ("OLS", "HuberScaled"),
    "Huber-L2": ("HuberMAD-prelim", "L2"),
    "Huber-L1": ("HuberMAD-prelim", "L1"),
    "Huber-Huber": ("HuberMAD-prelim", "HuberScaled"),
    "DispersionPALRMT": ("QuantilePair", "IQRLogRatio"),
}


@dataclass(frozen=True)
class SimSetting:
    design: str = "Normal"
    error: str = "Normal"
    n: int = 100
    p: int = 6
    d: int = 1
    beta: float | None = None
    target_power: float | None = None
    trials: int = 200
    B: int = 99
    seed0: int = 1
    seed_step: int = 1
    mode: str = "location"
    calibration_reps: int = 5000
    alpha: float = 0.05
    name: str = ""

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        if self.error not in ERRORS:
            raise ValueError(f"unknown error law {self.error!r}; choose from {ERRORS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.beta is None and self.target_power is None:
            object.__setattr__(self, "beta", 0.0)
        if self.beta is not None and self.target_power is not None:
            raise ValueError("set at most one of beta and target_power")
        if self.target_power is not None and not 0.0 < self.target_power < 1.0:
            raise ValueError("target_power must lie in (0, 1)")
        if self.mode == "dispersion" and self.design == "BalancedANOVA":
            raise ValueError("dispersion settings need a continuous design for Z")
        if self.mode == "dispersion" and self.p < 2:
            raise ValueError("dispersion settings count X in p, so p must be at least 2")
        if self.target_power is not None and self.mode != "location":
            raise ValueError("power calibration is defined for location settings only")
        if self.d != 1:
            raise ValueError("only a single interest covariate (d = 1) is supported")
        if self.p < 1:
            raise ValueError("p counts the intercept and must be at least 1")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.n < self.p + self.d + 2:
            raise ValueError("n too small for the requested number of covariates")
        if self.seed0 < 0 or self.seed_step < 0:
            raise ValueError("seeds must be non-negative")

    @property
    def id(self) -> str:
        if self.name:
            return self.name
        size = f"beta={self.beta:g}" if self.beta is not None else f"power={self.target_power:g}"
        return f"{self.mode}:{self.design}/{self.error}/n={self.n}/p={self.p}/{size}"

    def seed(self, trial: int) -> int:
        return self.seed0 + trial * self.seed_step

    def effective_n(self) -> int:
        if self.mode == "location" and self.design == "BalancedANOVA":
            groups = self.p + 1
            return (self.n // groups) * groups
        return self.n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PowerRow:
    setting: str
    method: str
    alpha: float
    rejection_rate: float
    mc_stderr: float
    trials: int
    beta: float
    relative_power: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# Data generation
# --------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1) with 53-bit resolution."""
    return (rng.integers(0, 1 << 53, size=size, dtype=np.int64) + 0.5) / float(1 << 53)


def _law(name: str, rng: np.random.Generator, size) -> np.ndarray:
    u = _uniform(rng, size)
    if name == "Normal":
        return sps.ndtri(u)
    if name == "T3":
        return sps.stdtrit(3.0, u)
    if name == "Cauchy":
        return np.tan(np.pi * (u - 0.5))
    raise ValueError(name)


def _errors(setting: SimSetting, rng: np.random.Generator, n: int) -> np.ndarray:
    kind = setting.error
    if kind in ("Normal", "T3", "Cauchy"):
        return _law(kind, rng, n)
    if kind == "LogNormal":
        return np.exp(_law("Normal", rng, n))
    eps = _law("Normal", rng, n)
    i = int(rng.integers(0, n))
    sign = -1.0 if rng.integers(0, 2) else 1.0
    eps[i] += sign * 1e4
    return eps


def _shuffled_labels(rng: np.random.Generator, counts: Sequence[int]) -> np.ndarray:
    labels = np.repeat(np.arange(len(counts)), counts)
    return labels[rng.permutation(labels.size)]


def draw_components(setting: SimSetting, rng: np.random.Generator):
    """``(x, z, eps)`` for one replicate, before the response is formed."""
    n = setting.effective_n()
    if setting.mode == "dispersion":
        x = _shuffled_labels(rng, [n - n // 2, n // 2]).astype(float)
        # here p counts [X, Z], so Z is the intercept plus p - 2 draws
        zc = _law(setting.design, rng, (n, setting.p - 2))
    elif setting.design == "BalancedANOVA":
        groups = setting.p + 1
        labels = _shuffled_labels(rng, [n // groups] * groups)
        x = (labels == groups - 1).astype(float)
        zc = (labels[:, None] == np.arange(1, groups - 1)[None, :]).astype(float)
    else:
        block = _law(setting.design, rng, (n, setting.p))
        x, zc = block[:, 0], block[:, 1:]
    z = np.column_stack([np.ones(n), zc])
    eps = _errors(setting, rng, n)
    return x, z, eps


def _response(setting: SimSetting, x, eps, beta: float) -> np.ndarray:
    if setting.mode == "dispersion":
        return (1.0 + beta * x) * eps
    return x * beta + eps


def generate(setting: SimSetting, trial: int, beta: float | None = None) -> Dataset:
    """Dataset of trial ``trial``; a pure function of ``seed0 + trial * seed_step``."""
    beta = setting.beta if beta is None else beta
    if beta is None:
        raise ValueError("setting has no beta; calibrate first or pass beta")
    rng = streams.stream(setting.seed(trial), streams.DATA)
    x, z, eps = draw_components(setting, rng)
    return Dataset(_response(setting, x, eps, beta), x[:, None], z)


# --------------------------------------------------------------------------
# F-test power and calibration
# --------------------------------------------------------------------------


@dataclass
class FPowerCurve:
    """F-test power as a function of ``beta`` over fixed replicates (common random numbers).

    With ``d = 1`` and ``ex = M_Z x``, ``ee = M_Z eps``, the F statistic at
    ``beta`` is ``(beta ex + ee)`` projected on ``ex``, squared, over the
    residual mean square, so each replicate is summarised by three inner
    products.
    """

    xx: np.ndarray
    xe: np.ndarray
    ee: np.ndarray
    df2: int
    alpha: float
    critical: float = field(init=False)

    def __post_init__(self):
        self.critical = f_isf(self.alpha, 1, self.df2)
        self.rss1 = self.ee - self.xe**2 / self.xx

    @property
    def reps(self) -> int:
        return self.xx.size

    def statistics(self, beta: float) -> np.ndarray:
        num = (beta * self.xx + self.xe) ** 2 / self.xx
        return num / (self.rss1 / self.df2)

    def power(self, beta: float) -> float:
        return float(np.mean(self.statistics(beta) > self.critical))


def f_power_curve(setting: SimSetting, reps: int, seed: int, domain: int = streams.CALIBRATION, chunk: int = 4000):
    n = setting.effective_n()
    xx, xe, ee = (np.empty(reps) for _ in range(3))
    for start in range(0, reps, chunk):
        stop = min(reps, start + chunk)
        comps = [draw_components(setting, streams.stream(seed, domain, r)) for r in range(start, stop)]
        X = np.stack([c[0] for c in comps])
        Z = np.stack([c[1] for c in comps])
        E = np.stack([c[2] for c in comps])
        Q, _ = np.linalg.qr(Z)
        ex = X - np.einsum("mnk,mk->mn", Q, np.einsum("mnk,mn->mk", Q, X))
        e = E - np.einsum("mnk,mk->mn", Q, np.einsum("mnk,mn->mk", Q, E))
        xx[start:stop] = np.einsum("mn,mn->m", ex, ex)
        xe[start:stop] = np.einsum("mn,mn->m", ex, e)
        ee[start:stop] = np.einsum("mn,mn->m", e, e)
    return FPowerCurve(xx, xe, ee, n - setting.d - setting.p, setting.alpha)


class CalibrationError(RuntimeError):
    pass


def calibrate_beta(
    setting: SimSetting,
    reps: int | None = None,
    seed: int | None = None,
    beta_max: float = 1e6,
    max_iter: int = 200,
) -> float:
    """``beta >= 0`` at which the Monte-Carlo F-test power equals ``setting.target_power``.

    Bracketing search (regula falsi with bisection fallback) on
    ``g(beta) = power(beta) - target``; all evaluations share the same
    replicates.  Stops when ``|g|`` is below two Monte-Carlo standard errors
    or the bracket is narrower than ``1e-3 * beta``.
    """
    if setting.target_power is None:
        raise ValueError("setting has no target_power")
    reps = setting.calibration_reps if reps is None else reps
    seed = setting.seed0 if seed is None else seed
    target = setting.target_power
    curve = f_power_curve(setting, reps, seed)
    tol = 2.0 * math.sqrt(target * (1.0 - target) / reps)

    def g(b):
        return curve.power(b) - target

    g_lo = g(0.0)
    if g_lo >= -tol:
        return 0.0
    lo, hi = 0.0, 1.0
    g_hi = g(hi)
    while g_hi < 0:
        lo, g_lo = hi, g_hi
        hi *= 2.0
        if hi > beta_max:
            raise CalibrationError(
                f"could not bracket target power {target} for {setting.id}: "
                f"power({lo:g}) = {g_lo + target:.4f}"
            )
        g_hi = g(hi)
    if abs(g_hi) < tol:
        return hi
    side = 0
    for _ in range(max_iter):
        if hi - lo < 1e-3 * hi:
            break
        mid = lo - g_lo * (hi - lo) / (g_hi - g_lo)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        g_mid = g(mid)
        if abs(g_mid) < tol:
            return mid
        if g_mid < 0:
            lo, g_lo = mid, g_mid
            if side == -1:
                g_hi *= 0.5  # Illinois step against a stuck endpoint
            side = -1
        else:
            hi, g_hi = mid, g_mid
            if side == 1:
                g_lo *= 0.5
            side = 1
    return 0.5 * (lo + hi)


def resolve(setting: SimSetting) -> SimSetting:
    """A copy with an explicit ``beta``, calibrating when only a target power is given."""
    if setting.beta is not None:
        return setting
    beta = calibrate_beta(setting)
    return dataclasses.replace(setting, beta=beta, target_power=None, name=setting.id)


# --------------------------------------------------------------------------
# Studies
# --------------------------------------------------------------------------


def _specs(methods: Sequence[str]):
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    by_fitter: dict[str, list[tuple[str, EvaluatorSpec]]] = {}
    for m in methods:
        spec = METHODS[m]
        if spec is not None:
            by_fitter.setdefault(spec[0], []).append((m, EvaluatorSpec(spec[1])))
    return by_fitter


def run_trial(setting: SimSetting, trial: int, methods: Sequence[str]) -> dict[str, float]:
    """p-values of every method on trial ``trial``; all methods share data and permutations."""
    data = generate(setting, trial)
    seed = setting.seed(trial)
    out: dict[str, float] = {}
    perms = None
    for kind, evs in _specs(methods).items():
        if perms is None:
            perms = sample_permutations(data.n, setting.B, seed)
        reports = palmrt_tests(data, FitterSpec(kind), [e for _, e in evs], seed=seed, perms=perms)
        for (label, _), rep in zip(evs, reports):
            out[label] = rep.p_value
    if "F-test" in methods:
        out["F-test"] = partial_f_test(data).p_value
    if "Breusch-Pagan" in methods:
        out["Breusch-Pagan"] = breusch_pagan_koenker(data).p_value
    return {m: out[m] for m in methods}


def _trial_task(args):
    setting, trial, methods = args
    return run_trial(setting, trial, methods)


def run_trials(setting: SimSetting, methods: Sequence[str], workers: int = 1) -> list[dict[str, float]]:
    tasks = [(setting, t, tuple(methods)) for t in range(setting.trials)]
    if workers <= 1:
        return [_trial_task(a) for a in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def mc_stderr(rate: float, trials: int) -> float:
    return math.sqrt(rate * (1.0 - rate) / trials)


@dataclass
class StudyResult:
    settings: list[SimSetting]
    methods: list[str]
    alphas: list[float]
    pvalues: dict[str, list[dict[str, float]]]  # setting id -> per-trial p-values
    rows: list[PowerRow]

    def trial_rows(self) -> list[dict]:
        out = []
        for s in self.settings:
            for t, pv in enumerate(self.pvalues[s.id]):
                for m in self.methods:
                    out.append(
                        {"setting": s.id, "trial": t, "seed": s.seed(t), "beta": s.beta, "method": m, "p_value": pv[m]}
                    )
        return out


def summarise(setting: SimSetting, pvalues: list[dict[str, float]], methods, alphas) -> list[PowerRow]:
    rows = []
    trials = len(pvalues)
    for alpha in alphas:
        rates = {m: sum(pv[m] <= alpha for pv in pvalues) / trials for m in methods}
        for m in methods:
            rel = None
            if "F-test" in rates and m != "F-test" and rates["F-test"] > 0:
                rel = rates[m] / rates["F-test"]
            rows.append(
                PowerRow(setting.id, m, alpha, rates[m], mc_stderr(rates[m], trials), trials, float(setting.beta), rel)
            )
    return rows


def run_power_study(
    settings: Sequence[SimSetting],
    methods: Sequence[str],
    alphas: Sequence[float] = (0.05,),
    workers: int = 1,
) -> StudyResult:
    """Rejection rates of every method in every setting (blocked by trial)."""
    _specs(methods)
    resolved = [resolve(s) for s in settings]
    pvalues, rows = {}, []
    for s in resolved:
        pv = run_trials(s, methods, workers)
        pvalues[s.id] = pv
        rows.extend(summarise(s, pv, methods, alphas))
    return StudyResult(list(resolved), list(methods), list(alphas), pvalues, rows)


def null_cdf_table(pvalues: dict[str, Sequence[float]], alphas: Sequence[float], setting: str = "") -> list[dict]:
    """Empirical CDF of null p-values at each ``alpha``, with the 2-alpha bound check.

    ``within_bound`` compares with ``2 alpha + 3 sd``; ``exceeds_nominal``
    flags curves above ``alpha + 3 sd``, binomial sd at ``alpha``.
    """
    out = []
    for method, ps in pvalues.items():
        ps = np.asarray(ps, dtype=float)
        trials = ps.size
        for alpha in alphas:
            cdf = float(np.mean(ps <= alpha))
            sd = math.sqrt(alpha * (1 - alpha) / trials)
            a2 = min(2 * alpha, 1.0)
            out.append(
                {
                    "setting": setting,
                    "method": method,
                    "alpha": alpha,
                    "cdf": cdf,
                    "trials": trials,
                    "within_bound": cdf <= a2 + 3 * math.sqrt(a2 * (1 - a2) / trials),
                    "exceeds_nominal": cdf > alpha + 3 * sd,
                }
            )
    return out


def ks_distance_uniform(ps: Sequence[float]) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``ps`` and U(0, 1)."""
    ps = np.sort(np.asarray(ps, dtype=float))
    m = ps.size
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - ps), np.max(ps - (i - 1) / m)))


def run_null_cdf_study(
    settings: Sequence[SimSetting],
    methods: Sequence[str],
    alphas: Sequence[float] = (0.001, 0.005, 0.01, 0.025, 0.05, 0.1),
    workers: int = 1,
) -> tuple[StudyResult, list[dict]]:
    """Null p-value CDFs; every setting is run at ``beta = 0``.

    Returns the underlying per-trial study and the CDF table.
    """
    nulls = [dataclasses.replace(s, beta=0.0, target_power=None) for s in settings]
    result = run_power_study(nulls, methods, alphas, workers)
    table = []
    for s in result.settings:
        pv = result.pvalues[s.id]
        table.extend(null_cdf_table({m: [r[m] for r in pv] for m in methods}, alphas, s.id))
    return result, table


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


def manifest(result: StudyResult, extra: dict | None = None) -> dict:
    doc = {
        "settings": [s.to_dict() | {"id": s.id, "seeds": [s.seed(0), s.seed(s.trials - 1)]} for s in result.settings],
        "methods": result.methods,
        "alphas": result.alphas,
        "rng": "numpy Philox4x64-10 keyed by (seed, domain << 32 | index)",
    }
    if extra:
        doc.update(extra)
    return doc


def write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# --------------------------------------------------------------------------
# Synthetic case/control table
# --------------------------------------------------------------------------


def synthetic_case_control(n: int = 176, seed: int = 0, beta: float = 0.0, dispersion: float = 1.0) -> dict:
    """Columns of a synthetic case/control table with demographic controls.

    ``x_LC`` is a case indicator; controls are age, sex, BMI and the
    age-by-BMI and sex-by-BMI interactions.  The response is a skewed
    (log-normal) proportion-like outcome whose case-group noise is scaled by
    ``dispersion``; ``beta`` shifts the case mean.
    """
    rng = streams.stream(seed, streams.DATA)
    lc = _shuffled_labels(rng, [n - n // 2, n // 2]).astype(float)
    age = np.round(20.0 + 50.0 * _uniform(rng, n))
    sex = (_uniform(rng, n) < 0.5).astype(float)
    bmi = np.round(22.0 + 4.0 * _law("Normal", rng, n), 1)
    noise = np.exp(0.8 * _law("Normal", rng, n)) - np.exp(0.32)
    y = 5.0 + 0.02 * age - 0.3 * sex + 0.05 * bmi + beta * lc + (1.0 + (dispersion - 1.0) * lc) * noise
    return {
        "y": y,
        "x_LC": lc,
        "z_age": age,
        "z_sex": sex,
        "z_BMI": bmi,
        "z_age_BMI": age * bmi,
        "z_sex_BMI": sex * bmi,
    }
