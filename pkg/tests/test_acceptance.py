"""Acceptance gate: every criterion at its stated tolerance, one report line each.

Recipes live in ``recipes/``; each criterion ``k`` uses seeds derived from
``1000 k + 1`` fixed before any run.  The whole module takes tens of minutes.
"""

import csv
import math
from pathlib import Path

import numpy as np
import pytest

from robust_palmrt.cli import main
from robust_palmrt.framework import Dataset, EvaluatorSpec, FitterSpec, invert_ci
from robust_palmrt.regressors import QuantileConfig, huber_residuals, quantile_regression
from robust_palmrt.simulation import SimSetting, calibrate_beta, f_power_curve
from robust_palmrt.theory_checks import (
    CONDITION_FITTERS,
    lemma_sweep,
    random_instance,
    shift_invariance_check,
    symmetry_check,
)

from .conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow

RECIPES = Path(__file__).resolve().parents[1] / "recipes"


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def simulate(recipe: str, out: Path) -> list[dict]:
    assert main(["simulate", "-m", str(RECIPES / recipe), "--out", str(out), "--quiet"]) == 0
    with open(out / "aggregate.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def rate(rows, method, setting=None, key="rejection_rate", alpha="0.05"):
    hits = [
        float(r[key])
        for r in rows
        if r["method"] == method and r["alpha"] == alpha and (setting is None or r["setting"] == setting)
    ]
    assert len(hits) == 1, (method, setting, hits)
    return hits[0]


def test_criterion_1_type_one_control(tmp_path):
    rows = simulate("type1_desk.json", tmp_path)
    worst = {}
    for m in ("Huber-Huber", "OLS-L2"):
        for r in rows:
            if r["method"] == m:
                worst[(m, r["design"], r["error"])] = float(r["rejection_rate"])
    assert len(worst) == 12
    top = max(worst, key=worst.get)
    ok = max(worst.values()) <= 0.079
    report(1, ok, f"max rejection {worst[top]:.3f} at {top} (bound 0.079, 12 method-cells, 500 trials)")
    assert ok


def test_criterion_2_f_test_inflation(tmp_path):
    rows = simulate("fig2_null_desk.json", tmp_path)
    frac = rate(rows, "F-test", key="cdf", alpha="0.01")
    ok = frac >= 0.02
    report(2, ok, f"F-test P(p <= 0.01) = {frac:.3f} under Cauchy design, log-normal errors (need >= 0.02)")
    assert ok


def test_criterion_3_power_ordering(tmp_path):
    rows = simulate("fig3_desk.json", tmp_path)
    hh, ols, olsh = (rate(rows, m) for m in ("Huber-Huber", "OLS-L2", "OLS-Huber"))
    ok = hh - ols >= 0.05 and olsh >= ols
    report(3, ok, f"t3 errors: Huber-Huber {hh:.3f}, OLS-Huber {olsh:.3f}, OLS-L2 {ols:.3f} (F-test {rate(rows, 'F-test'):.3f})")
    assert ok


def test_criterion_4_normal_parity(tmp_path):
    rows = simulate("normal_parity_desk.json", tmp_path)
    hh, ols = rate(rows, "Huber-Huber"), rate(rows, "OLS-L2")
    gap = ols - hh
    ok = 0.0 <= gap <= 0.10
    report(4, ok, f"normal errors: OLS-L2 {ols:.3f} - Huber-Huber {hh:.3f} = {gap:.3f} (need within [0, 0.10])")
    assert ok


def test_criterion_5_dispersion_power(tmp_path):
    rows = simulate("dispersion_desk.json", tmp_path)
    cauchy1 = "dispersion:Cauchy/Cauchy/n=200/p=6/beta=1"
    cauchy0 = "dispersion:Cauchy/Cauchy/n=200/p=6/beta=0"
    normal1 = "dispersion:Cauchy/Normal/n=200/p=6/beta=1"
    power = rate(rows, "DispersionPALRMT", cauchy1)
    size = rate(rows, "DispersionPALRMT", cauchy0)
    bp, disp = rate(rows, "Breusch-Pagan", normal1), rate(rows, "DispersionPALRMT", normal1)
    ok = power >= 0.5 and size <= 0.05 and bp >= disp
    report(
        5,
        ok,
        f"Cauchy errors: power {power:.3f} (need >= 0.5), null rate {size:.3f} (need <= 0.05); "
        f"normal errors: Breusch-Pagan {bp:.3f} vs dispersion {disp:.3f}",
    )
    assert ok


def test_criterion_6_calibration_fidelity():
    worst = 0.0
    parts = []
    for target in (0.2, 0.4, 0.6, 0.8, 0.95):
        s = SimSetting(target_power=target, calibration_reps=40_000, seed0=6001)
        beta = calibrate_beta(s)
        achieved = f_power_curve(s, 5000, seed=6002).power(beta)
        worst = max(worst, abs(achieved - target))
        parts.append(f"{target:g}->{achieved:.3f}")
    ok = worst <= 0.03
    report(6, ok, f"fresh-seed power {', '.join(parts)}; max deviation {worst:.4f} (need <= 0.03)")
    assert ok


def _subgradient_optimal(y, C, q, tol=1e-7) -> bool:
    # optimal iff basic duals solving C_h' a = -sum_{i not in h} C_i psi(r_i) lie in [q - 1, q]
    fit = quantile_regression(y, C, QuantileConfig(q))
    r = fit.residuals
    h = np.abs(r) <= 1e-9 * max(1.0, float(np.max(np.abs(y))))
    psi = np.where(r > 0, q, q - 1.0)
    rhs = -C[~h].T @ psi[~h]
    a, *_ = np.linalg.lstsq(C[h].T, rhs, rcond=None)
    return bool(
        np.allclose(C[h].T @ a, rhs, atol=tol * max(1.0, float(np.abs(rhs).max())))
        and np.all(a >= q - 1 - tol)
        and np.all(a <= q + tol)
    )


def _ci_coverage(trials=200, seed=7001):
    rng = np.random.default_rng(seed)
    grid = np.linspace(-1.0, 3.0, 21)
    hits = 0
    for t in range(trials):
        n = 40
        x, z = rng.standard_normal(n), rng.standard_normal((n, 2))
        y = 1.0 * x + z @ [0.5, -0.5] + rng.standard_t(3, n)
        ci = invert_ci(Dataset.from_arrays(y, x, z), FitterSpec("OLS"), EvaluatorSpec("L2"), 99, seed + t, 0.05, grid)
        hits += (not ci.degenerate) and ci.beta_lo <= 1.0 <= ci.beta_hi
    return hits / trials


def test_criterion_7_property_suites():
    rng = np.random.default_rng(7001)
    failures = {}
    for name, fit in CONDITION_FITTERS.items():
        bad = 0
        for _ in range(100):
            y, C = random_instance(rng)
            bad += not shift_invariance_check(fit, y, C, 10 * rng.standard_normal(C.shape[1]))
            bad += not symmetry_check(fit, y, C, rng.permutation(y.size))
        failures[f"conditions:{name}"] = bad

    bad = 0
    for _ in range(100):
        y, C = random_instance(rng)
        pi = rng.permutation(y.size)
        pinv = np.argsort(pi)
        for scale in (None, 0.8):
            left, _ = huber_residuals(y[pi], C, scale=scale)
            right, _ = huber_residuals(y, C[pinv], scale=scale)
            bad += not np.allclose(left, right[pi], atol=1e-8)
    failures["equivariance"] = bad

    sweep = lemma_sweep(10_000, 8, seed=7001)
    failures["lemma-sweep"] = sweep.violations

    bad = 0
    for _ in range(100):
        n = int(rng.integers(6, 16))
        k = int(rng.integers(1, 4))
        C = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
        bad += not _subgradient_optimal(rng.standard_t(2, n), C, float(rng.choice([0.1, 0.25, 0.5, 0.75, 0.9])))
    failures["subgradient"] = bad

    coverage = _ci_coverage()
    slack = 3 * math.sqrt(0.9 * 0.1 / 200)
    ok = all(v == 0 for v in failures.values()) and coverage >= 0.90 - slack
    bad_items = {k: v for k, v in failures.items() if v}
    report(7, ok, f"failures {bad_items or 'none'}; CI coverage {coverage:.3f} (need >= {0.90 - slack:.3f})")
    assert ok


def test_criterion_8_determinism(tmp_path):
    same = []
    for recipe in ("fig2_null_desk.json", "smoke.json"):
        a, b = tmp_path / f"{recipe}-a", tmp_path / f"{recipe}-b"
        simulate(recipe, a)
        simulate(recipe, b)
        same.append(all((a / f).read_bytes() == (b / f).read_bytes() for f in ("aggregate.csv", "trials.csv", "manifest.json")))
    ok = all(same)
    report(8, ok, "repeated manifest runs produce byte-identical aggregate, trial and manifest files")
    assert ok
