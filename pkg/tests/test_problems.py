import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dre.integrators import integrate_reference
from dre.problems import (
    CHEMISTRY,
    STOICHIOMETRY,
    TEST1_NONLINEAR_LAMBDA,
    chemistry_problem,
    coil_manifolds,
    coil_point,
    get_problem,
    random_spd_lambda,
    sir_problem,
)


class TestLinear:
    def test_diagonal_action(self):
        p = get_problem("test1-linear")
        assert_array_equal(p.rhs(np.ones(3), [2.0]), [-3.0, -5.0, -5.0])

    def test_initial_condition(self):
        p = get_problem("test1-linear")
        assert_array_equal(p.init(np.array([1.0])), [1.0, 1.0, 1.0])
        assert_array_equal(p.init(np.array([[3.0], [4.0]]))[:, 0], [3.0, 4.0])

    def test_nonlinear_spectrum(self):
        eig = np.sort(np.linalg.eigvalsh(TEST1_NONLINEAR_LAMBDA))
        assert_allclose(eig, [-7.0, -4.34, -2.93], atol=0.01)

    def test_large_presets_negative_definite(self):
        for n in (100, 500):
            p = get_problem(f"test1-nonlinear-N{n}")
            lam = np.array(p.meta["lambda"])
            assert lam.shape == (n, n)
            assert_allclose(lam, lam.T)
            assert np.max(np.linalg.eigvalsh(lam)) < 0

    def test_random_lambda_seeded(self):
        assert_array_equal(random_spd_lambda(10, 3), random_spd_lambda(10, 3))

    def test_reference_matches_modes(self):
        p = get_problem("test1-nonlinear")
        w, v = np.linalg.eigh(TEST1_NONLINEAR_LAMBDA)
        u0 = p.init(np.array([2.5]))
        t = np.linspace(0, 0.5, 26)
        exact = (np.exp(np.outer(t, w)) * (v.T @ u0)) @ v.T
        assert_allclose(integrate_reference(p.rhs_at([2.5]), u0, t), exact, atol=1e-11)


class TestSir:
    def test_hand_value(self):
        assert_allclose(sir_problem().rhs(np.array([90.0, 10.0, 0.0]), [1.0]), [-9.0, 4.0, 5.0])

    def test_defaults(self):
        p = sir_problem()
        assert_array_equal(p.param_lo, [0.5])
        assert_array_equal(p.param_hi, [2.5])
        assert p.meta["gamma"] == 0.5 and p.meta["population"] == 100.0
        assert_array_equal(p.init([1.0]), [90.0, 10.0, 0.0])
        assert p.T == 20.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=3, max_size=3), st.floats(0.5, 2.5))
    def test_sum_zero(self, u, beta):
        assert abs(np.sum(sir_problem().rhs(np.array(u), [beta]))) < 1e-10

    def test_monotone(self):
        p = sir_problem()
        y = integrate_reference(p.rhs_at([2.0]), p.init([2.0]), np.linspace(0, 20, 201))
        assert np.all(np.diff(y[:, 0]) <= 1e-12)
        assert np.all(np.diff(y[:, 2]) >= -1e-12)


class TestChemistry:
    def test_columns_sum_to_zero(self):
        assert_array_equal(np.ones(19) @ STOICHIOMETRY, np.zeros(6, dtype=int))

    def test_entries(self):
        assert set(np.unique(STOICHIOMETRY)) <= {-1, 0, 1}
        assert STOICHIOMETRY.shape == (19, 6)

    def test_unit_concentrations(self):
        assert_array_equal(CHEMISTRY.rates(np.ones(19)), CHEMISTRY.k_default)
        k = np.array([5.0, 7.5, 5.0, 5.0, 5.0, 5.0])
        assert_array_equal(CHEMISTRY.rates(np.ones(19), k), k)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rhs_conserves(self, seed):
        rng = np.random.default_rng(seed)
        p = chemistry_problem()
        u = rng.uniform(0, 2, size=19)
        mu = p.sample_params(1, seed)[0]
        assert abs(np.sum(p.rhs(u, mu))) < 1e-12

    def test_total_at_mid_mu1(self):
        p = chemistry_problem()
        assert np.sum(p.init(np.array([0.84, 8.0]))) == pytest.approx(11.67, abs=1e-12)

    def test_mu_enters_second_species_and_rate(self):
        p = chemistry_problem()
        u0 = p.init(np.array([0.8, 6.0]))
        assert u0[1] == 0.8
        # reaction 2 consumes species 1, 5, 12 and 18 (0-based 0, 4, 11, 17)
        r = CHEMISTRY.rates(u0, [5.0, 6.0, 5.0, 5.0, 5.0, 5.0])
        assert r[1] == pytest.approx(6.0 * u0[0] * u0[4] * u0[11] * u0[17])

    def test_negative_state_warns(self):
        p = chemistry_problem()
        with pytest.warns(RuntimeWarning):
            p.rhs(-np.ones(19), np.array([0.8, 6.0]))

    def test_reference_conservation(self):
        p = chemistry_problem()
        mu = p.sample_params(3, 1)
        y = integrate_reference(p.rhs_at(mu), p.init(mu), np.linspace(0, 3, 101))
        assert np.max(np.abs(y.sum(-1) - y[0].sum(-1))) < 1e-8


class TestManifolds:
    def test_coil_points(self):
        assert_allclose(coil_point(0.0), [1.0, 0.0, 0.0])
        assert_allclose(coil_point(2 * np.pi), [0.5, 0.0, 0.4 * np.pi], atol=1e-15)

    def test_flat_line_rank_one(self):
        x = coil_manifolds("flat-line", 50, seed=2)
        assert np.linalg.matrix_rank(x - x.mean(0), tol=1e-10) == 1

    def test_deterministic(self):
        for kind in ("flat-line", "graph", "coil", "noisy-coil"):
            assert_array_equal(coil_manifolds(kind, 20, 5), coil_manifolds(kind, 20, 5))

    def test_noisy_coil_differs(self):
        a, b = coil_manifolds("coil", 100, 0), coil_manifolds("noisy-coil", 100, 0)
        assert 0 < np.max(np.abs(a - b)) <= 0.05 + 1e-12
        assert_array_equal(a[:, 2], b[:, 2])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            coil_manifolds("coil", 0)
