"""Fixed-step explicit schemes and an adaptive Dormand-Prince reference solver.

Right-hand sides are autonomous callables ``rhs(u)`` acting on arrays whose
last axis is the state dimension; any leading axes are carried along, so a
whole batch of trajectories advances in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, StiffnessError

DIVERGENCE_THRESHOLD = 1e12


@dataclass(frozen=True)
class SchemeSpec:
    """Coefficients of an explicit scheme.

    Multistep schemes use the residual form
    ``sum_p alpha[p] u^{k+1-p} - dt * sum_p beta[p] F(u^{k+1-p}) = 0``
    with ``alpha[0] = 1`` and ``beta[0] = 0`` (explicit).  ``gamma`` holds
    one-sided starting coefficients of matching order; ``starter`` names the
    one-step method that actually supplies the first ``P-1`` values.
    """

    name: str
    P: int
    order: int
    alpha: tuple = ()
    beta: tuple = ()
    gamma: tuple = ()
    starter: str | None = None

    @property
    def multistep(self):
        return bool(self.alpha)

    def check(self):
        if self.multistep:
            a = np.asarray(self.alpha)
            if len(self.alpha) != self.P + 1 or len(self.beta) != self.P + 1:
                raise ValueError(f"{self.name}: coefficient length must be P+1")
            if abs(a.sum()) > 1e-14:
                raise ValueError(f"{self.name}: inconsistent scheme, sum(alpha) != 0")
            if self.beta[0] != 0:
                raise ValueError(f"{self.name}: only explicit schemes are supported")
        return self


FE = SchemeSpec("FE", P=1, order=1, alpha=(1.0, -1.0), beta=(0.0, 1.0), gamma=(-1.0, 1.0)).check()
AB2 = SchemeSpec(
    "AB2", P=2, order=2,
    alpha=(1.0, -1.0, 0.0), beta=(0.0, 1.5, -0.5),
    gamma=(-1.5, 2.0, -0.5), starter="heun",
).check()
RK4 = SchemeSpec("RK4", P=1, order=4)

SCHEMES = {"FE": FE, "AB2": AB2, "RK4": RK4}


def get_scheme(name):
    if isinstance(name, SchemeSpec):
        return name
    try:
        return SCHEMES[name.upper()]
    except KeyError:
        raise KeyError(f"unknown scheme {name!r}; known: {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class FixedGrid:
    dt: float
    K: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.K < 1:
            raise ValueError("K must be at least 1")

    @classmethod
    def spanning(cls, dt, T):
        """Grid of step ``dt`` reaching at least ``T``."""
        return cls(dt, max(1, int(np.ceil(T / dt - 1e-9))))

    @property
    def times(self):
        return self.dt * np.arange(self.K + 1)


def heun_step(rhs, u, dt):
    f0 = rhs(u)
    return u + 0.5 * dt * (f0 + rhs(u + dt * f0))


def rk4_step(rhs, u, dt):
    k1 = rhs(u)
    k2 = rhs(u + 0.5 * dt * k1)
    k3 = rhs(u + 0.5 * dt * k2)
    k4 = rhs(u + dt * k3)
    return u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _check(u, k, threshold):
    if not np.all(np.isfinite(u)) or np.max(np.abs(u), initial=0.0) > threshold:
        raise DivergenceError(f"solution diverged at step {k}", step=k)


def integrate_fixed(rhs, u0, grid, scheme=FE, *, threshold=DIVERGENCE_THRESHOLD):
    """Integrate on a uniform grid; returns an array of shape ``(K+1, *u0.shape)``.

    Raises :class:`DivergenceError` as soon as a state is non-finite or its
    max-norm exceeds ``threshold``.
    """
    scheme = get_scheme(scheme)
    u0 = np.asarray(u0, dtype=np.float64)
    dt, K = grid.dt, grid.K
    out = np.empty((K + 1,) + u0.shape)
    out[0] = u0
    if not scheme.multistep:
        for k in range(K):
            out[k + 1] = rk4_step(rhs, out[k], dt)
            _check(out[k + 1], k + 1, threshold)
        return out

    P = scheme.P
    alpha = np.asarray(scheme.alpha)
    beta = np.asarray(scheme.beta)
    hist = [rhs(u0)]
    for k in range(min(P - 1, K)):
        out[k + 1] = heun_step(rhs, out[k], dt)
        _check(out[k + 1], k + 1, threshold)
        hist.append(rhs(out[k + 1]))
    for k in range(P - 1, K):
        # hist[-p] holds F(u^{k+1-p})
        nxt = np.zeros_like(u0)
        for p in range(1, P + 1):
            if alpha[p]:
                nxt -= alpha[p] * out[k + 1 - p]
            if beta[p]:
                nxt += dt * beta[p] * hist[-p]
        out[k + 1] = nxt
        _check(nxt, k + 1, threshold)
        hist.append(rhs(nxt))
        if len(hist) > P:
            hist.pop(0)
    return out


def scheme_metadata(scheme):
    scheme = get_scheme(scheme)
    meta = {"name": scheme.name, "P": scheme.P, "order": scheme.order}
    if scheme.multistep:
        meta.update(alpha=list(scheme.alpha), beta=list(scheme.beta), gamma=list(scheme.gamma))
        if scheme.P > 1:
            meta["starter"] = scheme.starter
    return meta


def fe_stability_max_dt(eigenvalues):
    """Largest ``dt`` with ``max_i |1 + dt*lam_i| < 1`` (supremum, exclusive).

    For one eigenvalue the condition is ``dt < -2 Re(lam) / |lam|^2``; the
    admissible set for a spectrum is the intersection of these intervals.
    """
    lam = np.atleast_1d(np.asarray(eigenvalues, dtype=np.complex128))
    if lam.size == 0:
        raise ValueError("empty spectrum")
    if np.any(lam.real >= 0):
        raise ValueError("forward Euler stability needs every eigenvalue in the open left half-plane")
    return float(np.min(-2.0 * lam.real / np.abs(lam) ** 2))


# Dormand-Prince 5(4)

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# quartic continuous extension, y(t + x h) = y + h * sum_s k_s (P[s] @ [x, x^2, x^3, x^4])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


def _initial_step(rhs, y0, f0, atol, rtol):
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = rhs(y0 + h0 * f0)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def integrate_reference(rhs, u0, t_eval, *, atol=1e-16, rtol=1e-12, max_steps=10_000_000):
    """Adaptive Dormand-Prince 5(4) solve, sampled at ``t_eval`` by dense output.

    ``t_eval`` must be increasing and start at ``t0 = t_eval[0]``.  A single
    step size is shared by all trajectories in the batch (max-norm error
    control over every component).  Returns ``(len(t_eval), *u0.shape)``.
    """
    t_eval = np.asarray(t_eval, dtype=np.float64)
    if t_eval.ndim != 1 or t_eval.size == 0 or np.any(np.diff(t_eval) < 0):
        raise ValueError("t_eval must be a nonempty increasing 1-D array")
    y = np.array(u0, dtype=np.float64)
    out = np.empty((t_eval.size,) + y.shape)
    t, t_end = t_eval[0], t_eval[-1]
    out[0] = y
    nxt = 1
    while nxt < t_eval.size and t_eval[nxt] == t:
        out[nxt] = y
        nxt += 1
    if nxt == t_eval.size:
        return out
    f = rhs(y)
    h = _initial_step(rhs, y, f, atol, rtol)
    k = np.empty((7,) + y.shape)
    steps = 0
    while nxt < t_eval.size:
        steps += 1
        if steps > max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps at t={t}")
        h_min = 16 * np.finfo(float).eps * max(abs(t), 1.0)
        if h < h_min:
            raise StiffnessError(f"step size underflow at t={t} (h={h:.3e})")
        h = min(h, t_end - t)
        k[0] = f
        for s in range(1, 7):
            acc = y.copy()
            for j, a in enumerate(_A[s]):
                if a:
                    acc += h * a * k[j]
            k[s] = rhs(acc)
        y_new = acc  # stage 7 evaluates at the 5th-order solution (FSAL)
        err = h * np.tensordot(_E, k, axes=1)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = np.max(np.abs(err) / scale)
        if not np.isfinite(err_norm):
            h *= 0.2
            continue
        if err_norm <= 1.0:
            t_new = t + h if t_end - t > h else t_end
            while nxt < t_eval.size and t_eval[nxt] <= t_new:
                x = (t_eval[nxt] - t) / h
                powers = np.array([x, x**2, x**3, x**4])
                out[nxt] = y + h * np.tensordot(_P @ powers, k, axes=1)
                nxt += 1
            t, y, f = t_new, y_new, k[6]
            fac = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm**-0.2)
            h *= fac
        else:
            h *= max(0.2, 0.9 * err_norm**-0.2)
    return out
