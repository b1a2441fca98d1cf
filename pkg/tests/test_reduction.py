import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dre.errors import ShapeError
from dre.integrators import FixedGrid
from dre.nn import LayerSpec, Mlp, mlp
from dre.problems import coil_manifolds, get_problem, sir_problem
from dre.reduction import (
    Autoencoder,
    ReducedModel,
    exact_reduced_rhs,
    load_bundle,
    reconstruct_trajectory,
    save_bundle,
    shift_to_zero_initial,
)


def linear_ae(E, D, **kw):
    enc = Mlp([LayerSpec("linear", E.shape[1], E.shape[0])], E.ravel())
    dec = Mlp([LayerSpec("linear", D.shape[1], D.shape[0])], D.ravel())
    return Autoencoder(enc, dec, **kw)


def nonlinear_ae(N=4, n=2, seed=0):
    enc = mlp([N, 6, 6, n], "elu", seed=seed)
    dec = mlp([n, 6, 6, N], "prelu", seed=seed + 1)
    enc.params += 0.05
    dec.params += 0.05
    return Autoencoder(enc, dec)


def fd_jacobian(f, x, h=1e-6):
    cols = [(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)]
    return np.stack(cols, axis=1)


class TestEncodeDecode:
    def test_plain_encode_is_network(self):
        ae = nonlinear_ae()
        x = np.random.default_rng(0).standard_normal(4)
        assert_array_equal(ae.encode(x), ae.encoder.forward(x))

    def test_dims_checked(self):
        with pytest.raises(ShapeError):
            Autoencoder(mlp([3, 2]), mlp([2, 4]))
        with pytest.raises(ShapeError):
            Autoencoder(mlp([3, 3]), mlp([3, 3]))

    def test_pca_flat_line(self):
        x = coil_manifolds("flat-line", 40, seed=1)
        mean = x.mean(0)
        _, _, vt = np.linalg.svd(x - mean)
        e = vt[:1]
        ae = linear_ae(e, e.T, mean=mean)
        assert np.max(np.abs(ae.roundtrip(x) - x)) < 1e-12
        assert_allclose(reconstruct_trajectory(ae, ae.encode(x)), x, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(ks=st.floats(0.1, 20.0), seed=st.integers(0, 1000))
    def test_ks_invariant_roundtrip(self, ks, seed):
        ae = nonlinear_ae(seed=seed)
        x = np.random.default_rng(seed).standard_normal((5, 4))
        assert_allclose(ae.rescaled(ks).roundtrip(x), ae.roundtrip(x), rtol=1e-12, atol=1e-12)

    def test_reconstruct_edge_cases(self):
        ae = nonlinear_ae()
        assert reconstruct_trajectory(ae, np.zeros((0, 2))).shape == (0, 4)
        z = np.array([[0.3, -0.2]])
        assert_array_equal(reconstruct_trajectory(ae, z)[0], ae.decode(z[0]))


class TestShift:
    def test_initial_is_origin(self):
        ae = nonlinear_ae()
        u0 = np.array([0.5, -1.0, 2.0, 0.1])
        shifted = shift_to_zero_initial(ae, u0)
        assert_array_equal(shifted.encode(u0), 0.0)
        assert_array_equal(shifted.decode(np.zeros(2)), ae.decode(ae.encode(u0)))

    def test_roundtrip_unchanged(self):
        ae = nonlinear_ae(seed=3)
        x = np.random.default_rng(1).standard_normal((6, 4))
        shifted = shift_to_zero_initial(ae, x[0])
        assert_allclose(shifted.roundtrip(x), ae.roundtrip(x), rtol=1e-13, atol=1e-13)

    def test_batched_shift(self):
        ae = nonlinear_ae(seed=4)
        u0 = np.random.default_rng(2).standard_normal((3, 4))
        shifted = shift_to_zero_initial(ae, u0)
        assert_array_equal(shifted.encode(u0), 0.0)


class TestExactRhs:
    def test_linear_matrix_oracle(self):
        rng = np.random.default_rng(0)
        E, D = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
        lam = np.diag([-3.0, -5.0, -5.0])
        ae = linear_ae(E, D)
        z = rng.standard_normal((4, 2))
        assert_allclose(exact_reduced_rhs(ae, lambda u: u @ lam.T, z), z @ (E @ lam @ D).T, rtol=1e-12)

    def test_zero_rhs(self):
        ae = nonlinear_ae()
        assert_array_equal(exact_reduced_rhs(ae, np.zeros_like, np.ones(2)), 0.0)

    def test_dense_fd_jacobian(self):
        ae = nonlinear_ae(N=3, seed=7)
        ae.mean, ae.scale, ae.ks = np.array([1.0, -2.0, 0.5]), np.array([2.0, 0.5, 3.0]), 1.7
        p = sir_problem()
        f = p.rhs_at([1.2])
        for z in np.random.default_rng(5).standard_normal((5, 2)):
            x = ae.decode(z)
            jac = fd_jacobian(ae.encode, x)
            dense = jac @ f(x)
            assert np.linalg.norm(exact_reduced_rhs(ae, f, z) - dense) <= 1e-6 * np.linalg.norm(dense)

    def test_consistency_along_trajectory(self):
        # with a lossless linear AE the encoded reference solves the reduced ODE
        p = get_problem("test1-linear")
        from dre.integrators import integrate_reference

        t = np.linspace(0, 0.5, 501)
        u = integrate_reference(p.rhs_at([2.0]), p.init([2.0]), t)
        # solution lies in span{e1, (0,1,1)}
        E = np.array([[1.0, 0, 0], [0, 0.5, 0.5]])
        D = np.array([[1.0, 0], [0, 1], [0, 1]])
        ae = linear_ae(E, D)
        z = ae.encode(u)
        dz = np.gradient(z, t, axis=0, edge_order=2)
        rhs = exact_reduced_rhs(ae, p.rhs_at([2.0]), z)
        assert np.max(np.abs(dz[5:-5] - rhs[5:-5])) < 1e-4


class TestScalingInvariance:
    def test_exact_trajectories_ks_invariant(self):
        ae = nonlinear_ae(N=3, seed=11)
        p = sir_problem()
        ae.mean, ae.scale = np.array([50.0, 20.0, 30.0]), np.array([30.0, 10.0, 30.0])
        model = ReducedModel(ae)
        grid = FixedGrid(0.05, 100)
        _, u1 = model.solve(p, np.array([1.5]), grid, "FE")
        model2 = ReducedModel(ae.rescaled(2.0))
        _, u2 = model2.solve(p, np.array([1.5]), grid, "FE")
        assert np.max(np.abs(u1 - u2)) <= 1e-10 * np.max(np.abs(u1))

    def test_learned_rhs_homogeneous(self):
        ae = nonlinear_ae(N=3, seed=2)
        net = mlp([3, 5, 2], "elu", seed=4)
        m = ReducedModel(ae, net, mu_lo=np.array([0.5]), mu_hi=np.array([2.5]))
        z = np.array([0.2, -0.4])
        f1 = m.learned_rhs(ae, z, [1.0])
        f3 = m.learned_rhs(ae.rescaled(3.0), 3 * z, [1.0])
        assert_allclose(f3, 3 * f1, rtol=1e-14)


def test_bundle_round_trip(tmp_path):
    ae = nonlinear_ae(N=3, seed=5)
    ae.mean, ae.scale, ae.ks = np.array([1.0, 2, 3]), np.array([2.0, 2, 2]), 2.0
    model = ReducedModel(ae, mlp([3, 4, 2], "elu"), mu_lo=np.array([0.5]), mu_hi=np.array([2.5]),
                         problem="sir", dt_train=0.01, scheme="FE")
    save_bundle(model, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    z = np.array([[0.1, 0.2]])
    assert_array_equal(back.ae.decode(z), model.ae.decode(z))
    assert_array_equal(back.learned_rhs(back.ae, z, [1.0]), model.learned_rhs(model.ae, z, [1.0]))
    assert back.problem == "sir" and back.dt_train == 0.01 and back.scheme == "FE" and back.ae.ks == 2.0


def test_bundle_without_rhs(tmp_path):
    model = ReducedModel(nonlinear_ae(N=3))
    save_bundle(model, tmp_path)
    back = load_bundle(tmp_path / "bundle.json")
    assert back.rhs_net is None and not (tmp_path / "rhs.json").exists()
