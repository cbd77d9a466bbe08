import csv
import dataclasses
import math

import numpy as np
import pytest

from robust_palmrt.framework import EvaluatorSpec, FitterSpec, palmrt_test
from robust_palmrt.simulation import (
    PowerRow,
    SimSetting,
    calibrate_beta,
    f_power_curve,
    generate,
    ks_distance_uniform,
    mc_stderr,
    null_cdf_table,
    run_null_cdf_study,
    run_power_study,
    run_trial,
    run_trials,
    summarise,
    synthetic_case_control,
    write_csv,
)


class TestSimSetting:
    def test_beta_defaults_to_null(self):
        assert SimSetting().beta == 0.0
        assert SimSetting(target_power=0.5).beta is None

    @pytest.mark.parametrize(
        "kw",
        [
            {"design": "Uniform"},
            {"error": "Laplace"},
            {"mode": "scale"},
            {"beta": 1.0, "target_power": 0.5},
            {"target_power": 1.0},
            {"trials": 0},
            {"B": 0},
            {"n": 5},
            {"mode": "dispersion", "design": "BalancedANOVA"},
            {"mode": "dispersion", "target_power": 0.5},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimSetting(**kw)

    def test_seeds(self):
        s = SimSetting(seed0=10, seed_step=7)
        assert [s.seed(t) for t in range(3)] == [10, 17, 24]


class TestGenerate:
    def test_deterministic(self):
        s = SimSetting(design="Cauchy", error="LogNormal", beta=0.3)
        a, b = generate(s, 4), generate(s, 4)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.z, b.z)
        assert not np.array_equal(a.y, generate(s, 5).y)

    def test_location_shapes(self):
        d = generate(SimSetting(n=50, p=6), 0)
        assert d.x.shape == (50, 1) and d.z.shape == (50, 6)
        np.testing.assert_array_equal(d.z[:, 0], 1.0)

    def test_beta_enters_linearly(self):
        s = SimSetting(beta=0.0)
        d0, d1 = generate(s, 2), generate(s, 2, beta=2.5)
        np.testing.assert_allclose(d1.y - d0.y, 2.5 * d0.x[:, 0])

    def test_multinomial_outlier(self):
        s = SimSetting(error="MultinomialOutlier")
        for t in range(20):
            eps = generate(s, t).y
            big = np.abs(eps) > 5000
            assert big.sum() == 1
            assert abs(abs(eps[big][0]) - 1e4) < 10

    def test_lognormal_positive(self):
        assert np.all(generate(SimSetting(error="LogNormal"), 0).y > 0)

    def test_balanced_anova(self):
        s = SimSetting(design="BalancedANOVA", n=100, p=6)
        d = generate(s, 1)
        assert s.effective_n() == 98 and d.n == 98
        zc = d.z[:, 1:]
        x = d.x[:, 0]
        assert set(np.unique(x)) == {0.0, 1.0}
        # every observation lies in at most one indicator block
        assert np.all(zc.sum(axis=1) + x <= 1)
        counts = np.concatenate([[np.sum((zc.sum(axis=1) + x) == 0)], zc.sum(axis=0), [x.sum()]])
        np.testing.assert_array_equal(counts, 14)

    def test_dispersion_model(self):
        s = SimSetting(mode="dispersion", design="Cauchy", n=40, p=6, beta=1.0)
        d = generate(s, 0)
        assert d.z.shape == (40, 5)
        assert d.x.sum() == 20
        d0 = generate(s, 0, beta=0.0)
        np.testing.assert_allclose(d.y, (1 + d.x[:, 0]) * d0.y)


class TestStudies:
    def test_blocking_shares_data_and_permutations(self):
        s = SimSetting(n=30, B=19, beta=0.5, trials=2, seed0=3)
        pv = run_trial(s, 1, ["OLS-L2", "Huber-Huber", "F-test"])
        d = generate(s, 1)
        assert pv["OLS-L2"] == palmrt_test(d, FitterSpec("OLS"), EvaluatorSpec("L2"), B=19, seed=s.seed(1)).p_value
        assert pv["Huber-Huber"] == palmrt_test(d, B=19, seed=s.seed(1)).p_value

    def test_rerun_identical(self):
        s = SimSetting(n=30, B=9, trials=3)
        assert run_trials(s, ["OLS-L1", "F-test"]) == run_trials(s, ["OLS-L1", "F-test"])

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown methods"):
            run_power_study([SimSetting(trials=1)], ["Magic"])

    def test_summarise(self):
        s = SimSetting(trials=4)
        pv = [{"A": 0.01, "F-test": 0.01}, {"A": 0.2, "F-test": 0.04}, {"A": 0.03, "F-test": 0.5}, {"A": 0.9, "F-test": 0.9}]
        rows = summarise(s, pv, ["A", "F-test"], [0.05])
        a = rows[0]
        assert isinstance(a, PowerRow)
        assert a.rejection_rate == 0.5 and a.relative_power == 1.0
        assert a.mc_stderr == pytest.approx(math.sqrt(0.25 / 4))
        assert rows[1].relative_power is None

    def test_mc_stderr(self):
        assert mc_stderr(0.05, 500) == pytest.approx(0.009746794, rel=1e-6)
        assert mc_stderr(0.0, 10) == 0.0

    def test_null_cdf_study(self):
        s = SimSetting(n=30, B=19, trials=20, beta=3.0)
        result, table = run_null_cdf_study([s], ["OLS-L2"], alphas=[0.05, 0.5])
        assert result.settings[0].beta == 0.0
        assert len(table) == 2 and all(r["trials"] == 20 for r in table)

    def test_null_cdf_table_flags(self):
        ps = np.linspace(0.005, 1, 200)
        (row,) = null_cdf_table({"u": ps}, [0.05])
        assert row["cdf"] == pytest.approx(0.05) and row["within_bound"] and not row["exceeds_nominal"]
        (bad,) = null_cdf_table({"b": np.full(100, 0.01)}, [0.05])
        assert not bad["within_bound"] and bad["exceeds_nominal"]

    def test_ks_distance(self):
        assert ks_distance_uniform([0.5]) == 0.5
        assert ks_distance_uniform((np.arange(100) + 0.5) / 100) == pytest.approx(0.005)


class TestCalibration:
    def test_power_curve_monotone_and_sized(self):
        s = SimSetting(target_power=0.5)
        curve = f_power_curve(s, 4000, seed=1)
        assert abs(curve.power(0.0) - 0.05) < 3 * math.sqrt(0.05 * 0.95 / 4000)
        powers = [curve.power(b) for b in (0.0, 0.1, 0.2, 0.4, 0.8)]
        assert powers == sorted(powers) and powers[-1] > 0.99

    def test_targets_ordered(self):
        betas = [calibrate_beta(SimSetting(target_power=t), reps=2000, seed=2) for t in (0.2, 0.5, 0.8)]
        assert betas[0] < betas[1] < betas[2]

    def test_requires_target(self):
        with pytest.raises(ValueError):
            calibrate_beta(SimSetting())

    def test_resolve_names_setting(self):
        s = SimSetting(target_power=0.4, trials=1, B=5, calibration_reps=1000)
        result = run_power_study([s], ["F-test"])
        r = result.settings[0]
        assert r.beta > 0 and r.id == s.id


class TestFiles:
    def test_write_csv(self, tmp_path):
        p = tmp_path / "a.csv"
        write_csv(p, [{"a": 0.1, "b": None, "c": True, "d": "x,y"}])
        with open(p, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["a", "b", "c", "d"], ["0.1", "", "true", "x,y"]]
        with pytest.raises(ValueError):
            write_csv(p, [])

    def test_synthetic_case_control(self):
        t = synthetic_case_control(seed=3)
        assert list(t) == ["y", "x_LC", "z_age", "z_sex", "z_BMI", "z_age_BMI", "z_sex_BMI"]
        assert all(len(v) == 176 for v in t.values())
        assert np.sum(t["x_LC"]) == 88
        np.testing.assert_allclose(t["z_age_BMI"], t["z_age"] * t["z_BMI"])
        np.testing.assert_array_equal(synthetic_case_control(seed=3)["y"], t["y"])

    def test_settings_roundtrip(self):
        s = SimSetting(design="T3", beta=0.2)
        assert SimSetting(**s.to_dict()) == s
        assert dataclasses.replace(s, beta=0.3).beta == 0.3
