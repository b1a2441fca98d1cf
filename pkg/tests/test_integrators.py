import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import solve_ivp

from dre.errors import DivergenceError
from dre.integrators import (
    AB2,
    FE,
    RK4,
    FixedGrid,
    fe_stability_max_dt,
    integrate_fixed,
    integrate_reference,
    scheme_metadata,
)
from dre.problems import sir_problem

LAM = np.array([-3.0, -5.0, -5.0])


def fe_bisection(eigs, hi=100.0):
    """Independent oracle: bisect on max |1 + dt lam| < 1."""
    eigs = np.asarray(eigs, dtype=complex)
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.max(np.abs(1 + mid * eigs)) < 1:
            lo = mid
        else:
            hi = mid
    return lo


def measured_slope(scheme, levels=range(4, 10), T=1.0):
    errs, dts = [], []
    u0 = np.array([2.0, 1.0, 1.0])
    for e in levels:
        grid = FixedGrid.spanning(2.0**-e, T)
        u = integrate_fixed(lambda x: x * LAM, u0, grid, scheme)
        errs.append(np.max(np.abs(u - np.exp(np.outer(grid.times, LAM)) * u0)))
        dts.append(grid.dt)
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


class TestSchemes:
    def test_consistency(self):
        for s in (FE, AB2):
            assert sum(s.alpha) == 0
            assert s.beta[0] == 0
            # first-order consistency: sum p*alpha_p + sum beta_p = 0 in this sign convention
            p = np.arange(s.P + 1)
            assert np.dot(p, s.alpha) + np.sum(s.beta) == pytest.approx(0.0)

    def test_gamma_starters_are_one_sided_derivatives(self):
        # gamma . [f(0), f(h), f(2h)] / h approximates f'(0) to the scheme order
        for s in (FE, AB2):
            h = 1e-3
            vals = np.exp(np.arange(s.P + 1) * h)
            approx = np.dot(s.gamma, vals) / h
            assert abs(approx - 1.0) < 10 * h**s.order

    def test_metadata_records_starter(self):
        assert scheme_metadata(AB2)["starter"] == "heun"
        assert "starter" not in scheme_metadata(FE)


class TestFixed:
    def test_fe_scalar_hits_zero(self):
        u = integrate_fixed(lambda x: -5 * x, np.array([1.0]), FixedGrid(0.2, 3), FE)
        assert u[1, 0] == 0.0

    def test_fe_sir_one_step(self):
        p = sir_problem()
        u = integrate_fixed(p.rhs_at([1.0]), p.init([1.0]), FixedGrid(0.1, 1), FE)
        assert_allclose(u[1], [89.1, 10.4, 0.5], rtol=1e-14)

    def test_fe_linear_closed_form(self):
        dt, K = 0.05, 40
        u0 = np.array([2.0, 1.0, 1.0])
        u = integrate_fixed(lambda x: x * LAM, u0, FixedGrid(dt, K), FE)
        expected = (1 + dt * LAM) ** np.arange(K + 1)[:, None] * u0
        assert_allclose(u, expected, rtol=1e-13)

    def test_batched(self):
        u0 = np.array([[2.0, 1.0, 1.0], [1.0, -1.0, 3.0]])
        grid = FixedGrid(0.01, 10)
        both = integrate_fixed(lambda x: x * LAM, u0, grid, AB2)
        for b in range(2):
            assert_allclose(both[:, b], integrate_fixed(lambda x: x * LAM, u0[b], grid, AB2), rtol=1e-15)

    def test_ab2_first_step_is_heun(self):
        dt = 0.1
        u = integrate_fixed(lambda x: -x, np.array([1.0]), FixedGrid(dt, 1), AB2)
        assert u[1, 0] == pytest.approx(1 - dt + dt**2 / 2)

    @pytest.mark.parametrize("scheme,order,tol", [(FE, 1, 0.1), (AB2, 2, 0.15), (RK4, 4, 0.3)])
    def test_orders(self, scheme, order, tol):
        assert abs(measured_slope(scheme) - order) < tol

    def test_divergence_reports_step(self):
        with pytest.raises(DivergenceError) as info:
            integrate_fixed(lambda x: -5 * x, np.array([1.0]), FixedGrid(1.0, 100), FE)
        assert info.value.step == 20
        assert 4.0**info.value.step > 1e12 and 4.0 ** (info.value.step - 1) <= 1e12

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            FixedGrid(0.0, 3)
        with pytest.raises(ValueError):
            FixedGrid(0.1, 0)


class TestReference:
    def test_exponential(self):
        y = integrate_reference(lambda u: -u, np.array([1.0]), [0.0, 0.5, 1.0])
        assert abs(y[-1, 0] - np.exp(-1)) < 1e-10

    def test_diagonal_modes(self):
        t = np.linspace(0, 0.5, 51)
        u0 = np.array([3.0, 1.0, 1.0])
        y = integrate_reference(lambda u: u * LAM, u0, t)
        assert_allclose(y, np.exp(np.outer(t, LAM)) * u0, rtol=1e-10, atol=1e-14)

    def test_sir_conservation(self):
        p = sir_problem()
        mu = np.array([[0.7], [1.6], [2.4]])
        y = integrate_reference(p.rhs_at(mu), p.init(mu), np.linspace(0, 20, 401))
        assert np.max(np.abs(y.sum(-1) - 100.0)) < 1e-9

    def test_against_scipy(self):
        p = sir_problem()
        t = np.linspace(0, 20, 201)
        y = integrate_reference(p.rhs_at([1.3]), p.init([1.3]), t)
        ref = solve_ivp(lambda _, u: p.rhs(u, [1.3]), (0, 20), p.init([1.3]), method="DOP853",
                        t_eval=t, rtol=1e-13, atol=1e-13)
        assert_allclose(y, ref.y.T, atol=1e-8)

    def test_dense_output_between_steps(self):
        # samples far denser than the accepted steps add no error beyond the
        # global drift of the step-node solution
        t = np.linspace(0, 2, 2001)
        y = integrate_reference(lambda u: np.stack([u[1], -u[0]]), np.array([1.0, 0.0]), t, rtol=1e-8, atol=1e-10)
        err = np.abs(y[:, 0] - np.cos(t))
        assert np.max(err) < 1e-6
        assert np.max(err) <= 1.5 * err[-1] + 1e-9


class TestFeBound:
    def test_test1(self):
        assert fe_stability_max_dt([-3, -5, -5]) == pytest.approx(0.4)

    def test_nonlinear_spectrum(self):
        assert fe_stability_max_dt([-7.0, -2.93, -4.34]) == pytest.approx(2 / 7.0)
        assert round(fe_stability_max_dt([-7.0, -2.93, -4.34]), 2) == 0.29

    def test_scalar(self):
        assert fe_stability_max_dt([-1]) == 2.0

    def test_rejects_unstable(self):
        with pytest.raises(ValueError):
            fe_stability_max_dt([-1, 0.5])
        with pytest.raises(ValueError):
            fe_stability_max_dt([1j])


@settings(max_examples=50, deadline=None)
@given(
    re=st.lists(st.floats(-10, -0.05), min_size=1, max_size=5),
    im=st.lists(st.floats(-10, 10), min_size=5, max_size=5),
)
def test_fe_bound_matches_bisection(re, im):
    eigs = np.array(re) + 1j * np.array(im[: len(re)])
    assert fe_stability_max_dt(eigs) == pytest.approx(fe_bisection(eigs), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(-8, -0.1), dt=st.floats(0.001, 0.2), k=st.integers(1, 30))
def test_fe_closed_form_property(lam, dt, k):
    u = integrate_fixed(lambda x: lam * x, np.array([1.0]), FixedGrid(dt, k), FE)
    assert_allclose(u[:, 0], (1 + dt * lam) ** np.arange(k + 1), rtol=1e-12, atol=1e-300)


def test_divergence_threshold_not_hit_on_stable_run():
    u = integrate_fixed(lambda x: -x, np.array([1e11]), FixedGrid(0.5, 10), FE)
    assert_array_equal(np.isfinite(u), True)
