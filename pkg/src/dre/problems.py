"""Parametric ODE systems and static point-cloud manifolds used in the experiments."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class OdeProblem:
    """Autonomous parametric system ``du/dt = rhs(u, mu)``, ``u(0) = init(mu)``.

    ``rhs`` and ``init`` are batched: ``u`` has shape ``(..., dim)`` and ``mu``
    shape ``(..., param_dim)`` with matching leading axes (or none).
    """

    name: str
    dim: int
    param_names: tuple
    param_lo: np.ndarray
    param_hi: np.ndarray
    rhs: Callable
    init: Callable
    T: float
    conservative: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.param_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.param_hi, dtype=float))
        if lo.shape != hi.shape or lo.size != len(self.param_names):
            raise ValueError("parameter box does not match parameter names")
        if np.any(lo >= hi):
            raise ValueError("parameter box must have nonempty interior")
        object.__setattr__(self, "param_lo", lo)
        object.__setattr__(self, "param_hi", hi)

    @property
    def param_dim(self):
        return len(self.param_names)

    def sample_params(self, n, seed):
        rng = np.random.default_rng(seed)
        return self.param_lo + (self.param_hi - self.param_lo) * rng.random((n, self.param_dim))

    def scale_params(self, mu):
        """Min-max map of the parameter box onto the unit cube."""
        return (np.asarray(mu, dtype=float) - self.param_lo) / (self.param_hi - self.param_lo)

    def rhs_at(self, mu):
        """Autonomous right-hand side with ``mu`` frozen."""
        mu = np.asarray(mu, dtype=float)
        return lambda u: self.rhs(u, mu)


def _mu_column(mu, k=0):
    mu = np.asarray(mu, dtype=float)
    return mu[..., k] if mu.ndim else mu


def linear_problem(lam, u0_fn=None, *, name="linear", mu_range=(1.0, 5.0), T=0.5, meta=None):
    """``du/dt = lam @ u``; by default ``u0 = [mu, 1, ..., 1]``."""
    lam = np.array(lam, dtype=float)
    if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
        raise ValueError("lam must be a square matrix")
    n = lam.shape[0]

    def default_u0(mu):
        mu = _mu_column(mu)
        u = np.ones(np.shape(mu) + (n,))
        u[..., 0] = mu
        return u

    info = {"lambda": lam.tolist(), "eigenvalues": np.sort(np.linalg.eigvals(lam).real).tolist()}
    info.update(meta or {})
    return OdeProblem(
        name=name, dim=n, param_names=("mu",), param_lo=[mu_range[0]], param_hi=[mu_range[1]],
        rhs=lambda u, mu: np.asarray(u) @ lam.T, init=u0_fn or default_u0, T=T, meta=info,
    )


TEST1_NONLINEAR_LAMBDA = np.array([
    [-4.75, -1.55, -0.79],
    [-1.55, -4.31, -1.02],
    [-0.79, -1.02, -5.2],
])


def random_spd_lambda(n, seed, spectrum=(-7.0, -2.0)):
    """Seeded symmetric negative-definite matrix with eigenvalues in ``spectrum``."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(spectrum[0], spectrum[1], size=n)
    lam[0], lam[-1] = spectrum
    m = (q * lam) @ q.T
    return 0.5 * (m + m.T)


def sir_problem(beta_range=(0.5, 2.5), gamma=0.5, population=100.0, u0=(90.0, 10.0, 0.0), T=20.0):
    u0 = np.asarray(u0, dtype=float)

    def rhs(u, mu):
        u = np.asarray(u)
        beta = _mu_column(mu)
        s, i = u[..., 0], u[..., 1]
        inf = beta * i * s / population
        rec = gamma * i
        return np.stack([-inf, inf - rec, rec], axis=-1)

    def init(mu):
        return np.broadcast_to(u0, np.shape(_mu_column(mu)) + (3,)).copy()

    return OdeProblem(
        name="sir", dim=3, param_names=("beta",), param_lo=[beta_range[0]], param_hi=[beta_range[1]],
        rhs=rhs, init=init, T=T, conservative=True,
        meta={"gamma": gamma, "population": population, "u0": u0.tolist()},
    )


# rows are reactions, columns species
STOICHIOMETRY_T = np.array([
    [1, 0, -1, -1, 0, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 1, -1, 1, 0],
    [-1, 1, 0, 0, -1, 0, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 1, -1, 1],
    [0, -1, 1, 1, 0, -1, 0, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 0, 0],
    [1, 0, -1, 0, 1, 0, -1, 0, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 0],
    [-1, 1, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0],
    [0, -1, 1, 0, 0, 0, 1, 0, -1, 0, 0, 0, 0, 1, 0, -1, 0, 1, -1],
])
STOICHIOMETRY = STOICHIOMETRY_T.T
CHEMISTRY_U0 = np.array([
    0.79, 0.84, 0.92, 0.41, 0.32, 0.39, 0.68, 0.89, 0.02, 0.28,
    0.58, 0.94, 0.1, 0.9, 0.83, 0.72, 0.72, 0.50, 0.84,
])


@dataclass(frozen=True)
class StoichiometricSystem:
    S: np.ndarray
    k_default: np.ndarray

    @property
    def n_species(self):
        return self.S.shape[0]

    @property
    def n_reactions(self):
        return self.S.shape[1]

    def rates(self, u, k=None):
        """``r_j = k_j * prod_i u_i^{|S_ij|}`` over the reactants of reaction ``j``."""
        u = np.asarray(u, dtype=float)
        k = self.k_default if k is None else np.asarray(k, dtype=float)
        expo = np.where(self.S < 0, -self.S, 0)
        # integer exponents: repeated products stay defined for negative states
        prod = np.ones(u.shape[:-1] + (self.n_reactions,))
        for j in range(self.n_reactions):
            for i in np.nonzero(expo[:, j])[0]:
                prod[..., j] *= u[..., i] ** expo[i, j]
        return k * prod

    def rhs(self, u, k=None):
        return self.rates(u, k) @ self.S.T


CHEMISTRY = StoichiometricSystem(STOICHIOMETRY, np.array([5.0, 5.0, 5.0, 5.0, 5.0, 5.0]))


def chemistry_problem(T=3.0, mu1_range=(0.74, 0.94), mu2_range=(5.0, 11.0)):
    system = CHEMISTRY

    def rhs(u, mu):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            warnings.warn("negative concentration passed to the rate law", RuntimeWarning, stacklevel=2)
        mu = np.asarray(mu, dtype=float)
        k = np.broadcast_to(system.k_default, mu.shape[:-1] + (system.n_reactions,)).copy()
        k[..., 1] = mu[..., 1]
        return system.rhs(u, k)

    def init(mu):
        mu = np.asarray(mu, dtype=float)
        u = np.broadcast_to(CHEMISTRY_U0, mu.shape[:-1] + (system.n_species,)).copy()
        u[..., 1] = mu[..., 0]
        return u

    return OdeProblem(
        name="chemistry", dim=system.n_species, param_names=("mu1", "mu2"),
        param_lo=[mu1_range[0], mu2_range[0]], param_hi=[mu1_range[1], mu2_range[1]],
        rhs=rhs, init=init, T=T, conservative=True,
        meta={"k": "[5, mu2, 5, 5, 5, 5]", "u0": CHEMISTRY_U0.tolist(), "mu1_index": 1},
    )


def get_problem(name, **kwargs):
    """Problem preset by name."""
    if name == "test1-linear":
        return linear_problem(np.diag([-3.0, -5.0, -5.0]), name=name, **kwargs)
    if name == "test1-nonlinear":
        return linear_problem(TEST1_NONLINEAR_LAMBDA, name=name, **kwargs)
    if name.startswith("test1-nonlinear-N"):
        n = int(name.rsplit("N", 1)[1])
        seed = kwargs.pop("matrix_seed", n)
        return linear_problem(random_spd_lambda(n, seed), name=name, meta={"matrix_seed": seed}, **kwargs)
    if name == "sir":
        return sir_problem(**kwargs)
    if name == "chemistry":
        return chemistry_problem(**kwargs)
    raise KeyError(f"unknown problem {name!r}")


PROBLEMS = ("test1-linear", "test1-nonlinear", "test1-nonlinear-N100", "test1-nonlinear-N500", "sir", "chemistry")


# static manifolds

@dataclass(frozen=True)
class StaticManifold:
    name: str
    intrinsic_dim: int
    sampler: Callable
    meta: dict = field(default_factory=dict)

    def sample(self, count, seed=0):
        if count < 1:
            raise ValueError("count must be at least 1")
        return self.sampler(count, np.random.default_rng(seed))


NOISY_COIL_AMPLITUDE = 0.05
NOISY_COIL_PERIODS = 12
COIL_THETA_MAX = 6 * np.pi


def coil_point(theta, amplitude=0.0, periods=NOISY_COIL_PERIODS):
    """Conical helix ``(r cos t, r sin t, 0.2 t)`` with ``r = 2 pi / (2 pi + t)``.

    A nonzero ``amplitude`` adds a radial oscillation with ``periods`` full
    waves over ``[0, 6 pi]``.
    """
    theta = np.asarray(theta, dtype=float)
    r = 2 * np.pi / (2 * np.pi + theta)
    if amplitude:
        r = r + amplitude * np.sin(periods * 2 * np.pi * theta / COIL_THETA_MAX)
    return np.stack([r * np.cos(theta), r * np.sin(theta), 0.2 * theta], axis=-1)


def _theta(count, rng):
    return np.sort(rng.uniform(0.0, COIL_THETA_MAX, size=count))


def _flat_line(count, rng):
    s = np.sort(rng.uniform(-1.0, 1.0, size=count))
    return np.array([0.5, -0.2, 1.0]) + np.outer(s, [1.0, 2.0, 3.0])


def _graph(count, rng):
    # x = A s + g(s) with g(s) orthogonal to the column of A
    s = np.sort(rng.uniform(-1.0, 1.0, size=count))
    return np.outer(s, [1.0, 1.0, 0.0]) / np.sqrt(2) + np.outer(s**2, [0.0, 0.0, 1.0])


MANIFOLDS = {
    "flat-line": StaticManifold("flat-line", 1, _flat_line),
    "graph": StaticManifold("graph", 1, _graph),
    "coil": StaticManifold("coil", 1, lambda c, rng: coil_point(_theta(c, rng))),
    "noisy-coil": StaticManifold(
        "noisy-coil", 1,
        lambda c, rng: coil_point(_theta(c, rng), NOISY_COIL_AMPLITUDE),
        meta={"amplitude": NOISY_COIL_AMPLITUDE, "periods": NOISY_COIL_PERIODS},
    ),
}


def coil_manifolds(kind, count, seed=0):
    try:
        return MANIFOLDS[kind].sample(count, seed)
    except KeyError:
        raise KeyError(f"unknown manifold {kind!r}; known: {sorted(MANIFOLDS)}") from None
