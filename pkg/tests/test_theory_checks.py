import numpy as np
import pytest

from robust_palmrt.framework import Dataset, EvaluatorSpec, FitterSpec
from robust_palmrt.theory_checks import (
    CONDITION_FITTERS,
    check_tournament,
    comparison_array_symmetry_check,
    lemma_sweep,
    random_instance,
    random_tournament,
    row_weighted_ols,
    run_checks,
    shift_invariance_check,
    small_column_sets,
    symmetry_check,
    weighted_small_column_mass,
)


class TestTournamentLemma:
    def test_tight_two_by_two(self):
        # column 0 has weighted sum 1/4, so alpha = 1/4 captures mass 1/2 = 2 alpha
        A = np.array([[0.5, 1.0], [0.0, 0.5]])
        w = np.array([0.5, 0.5])
        assert weighted_small_column_mass(A, w, 0.25) == 0.5
        assert weighted_small_column_mass(A, w, 0.2) == 0.0

    def test_all_half(self):
        A = np.full((5, 5), 0.5)
        w = np.full(5, 0.2)
        assert weighted_small_column_mass(A, w, 0.5) == pytest.approx(1.0)
        assert weighted_small_column_mass(A, w, 0.49) == 0.0

    def test_set_definitions_agree(self, rng):
        for _ in range(50):
            m = int(rng.integers(1, 9))
            A = random_tournament(m, rng, binary=bool(rng.integers(2)))
            w = rng.dirichlet(np.ones(m))
            a, b = small_column_sets(A, w, float(rng.random() / 2))
            np.testing.assert_array_equal(a, b)

    def test_random_tournament_valid(self, rng):
        check_tournament(random_tournament(6, rng))
        B = random_tournament(6, rng, binary=True)
        assert set(np.unique(B[~np.eye(6, dtype=bool)])) <= {0.0, 1.0}

    @pytest.mark.parametrize(
        "A,w,alpha",
        [
            (np.array([[0.5, 0.7], [0.7, 0.5]]), [0.5, 0.5], 0.1),
            (np.full((2, 2), 0.5), [0.7, 0.7], 0.1),
            (np.full((2, 2), 0.5), [-0.5, 1.5], 0.1),
            (np.full((2, 2), 0.5), [0.5, 0.5], 0.6),
            (np.full((2, 3), 0.5), [0.5, 0.5], 0.1),
        ],
    )
    def test_input_validation(self, A, w, alpha):
        with pytest.raises(ValueError):
            weighted_small_column_mass(A, w, alpha)

    def test_sweep_has_no_violations(self):
        sweep = lemma_sweep(10_000, 8, seed=1)
        assert sweep.instances == 10_000
        assert sweep.violations == 0 and sweep.set_mismatches == 0
        assert sweep.worst_ratio <= 1.0 + 1e-9


class TestComparisonArraySymmetry:
    def _data(self, rng, n=24):
        x = rng.standard_normal(n)
        z = rng.standard_normal((n, 2))
        return Dataset.from_arrays(z @ [1.0, 2.0] + rng.standard_t(3, n), x, z)

    def _pairs(self, rng, n, k=10):
        return [(rng.permutation(n), rng.permutation(n)) for _ in range(k)]

    @pytest.mark.parametrize(
        "fitter,ev",
        [
            (FitterSpec("OLS"), EvaluatorSpec("L2")),
            (FitterSpec("OLS"), EvaluatorSpec("L1")),
            (FitterSpec(), EvaluatorSpec("HuberScaled")),
        ],
    )
    def test_symmetric_fitters(self, rng, fitter, ev):
        d = self._data(rng)
        assert comparison_array_symmetry_check(d, fitter, ev, rng.permutation(d.n), self._pairs(rng, d.n))

    def test_dispersion_fitter(self, rng):
        n = 30
        x = np.repeat([0.0, 1.0], n // 2)
        z = rng.standard_normal((n, 2))
        d = Dataset.from_arrays((1 + x) * rng.standard_normal(n), x, z)
        ev = EvaluatorSpec("IQRLogRatio")
        assert comparison_array_symmetry_check(d, FitterSpec("QuantilePair"), ev, rng.permutation(n), self._pairs(rng, n, 5))

    def test_asymmetric_fitter_is_caught(self, rng):
        d = self._data(rng)
        sigma = np.roll(np.arange(d.n), 1)
        assert not comparison_array_symmetry_check(d, row_weighted_ols(), EvaluatorSpec("L2"), sigma, self._pairs(rng, d.n))


class TestFitterConditions:
    @pytest.mark.parametrize("name", list(CONDITION_FITTERS))
    def test_conditions(self, rng, name):
        fit = CONDITION_FITTERS[name]
        for _ in range(25):
            y, C = random_instance(rng)
            assert shift_invariance_check(fit, y, C, 10 * rng.standard_normal(C.shape[1]))
            assert symmetry_check(fit, y, C, rng.permutation(y.size))

    def test_run_checks_all_pass(self):
        results = run_checks(seed=3, instances=20, lemma_instances=500)
        names = [r.name for r in results]
        assert "lemma:column-mass" in names and "array-symmetry:Huber-Huber" in names
        assert all(r.passed for r in results), [r for r in results if not r.passed]
