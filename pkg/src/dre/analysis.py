"""Lipschitz estimates, stability and error bounds, error metrics and convergence sweeps.

Lipschitz quantities are sampled: every estimate is a maximum over finitely
many pairs and therefore a lower bound of the true supremum.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError, ShapeError
from .integrators import DIVERGENCE_THRESHOLD, FixedGrid, get_scheme, integrate_reference

PLATEAU_TOLERANCE = 0.25


# Lipschitz estimation

@dataclass
class LipschitzReport:
    L: float
    nu: float
    count: int
    domain: str = ""
    argmax_L: tuple | None = None   # (a, b) attaining L
    argmax_nu: tuple | None = None  # (a, b) attaining nu

    def as_dict(self):
        return {"L": self.L, "nu": self.nu, "count": self.count, "domain": self.domain}


def pair_quotients(f, a, b):
    """Two-sided and one-sided difference quotients of ``f`` on row pairs ``(a, b)``.

    Pairs with ``a == b`` are dropped; the returned mask marks the kept rows.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = a - b
    nrm2 = np.sum(diff * diff, axis=1)
    keep = nrm2 > 0
    fa, fb = np.asarray(f(a[keep])), np.asarray(f(b[keep]))
    df = fa - fb
    d = diff[keep]
    lip = np.sqrt(np.sum(df * df, axis=1) / nrm2[keep])
    if df.shape[1] == d.shape[1]:
        one = np.sum(df * d, axis=1) / nrm2[keep]
    else:
        one = np.full(lip.shape, np.nan)
    return lip, one, keep


def _pair_indices(cloud, pairs, seed):
    """Index pairs into the flattened cloud: consecutive snapshots first, then random pairs."""
    if cloud.ndim == 3:
        S, K, _ = cloud.shape
        base = (np.arange(S)[:, None] * K + np.arange(K - 1)[None, :]).ravel()
        cons = np.stack([base, base + 1], axis=1)
        M = S * K
    else:
        cons = np.zeros((0, 2), dtype=int)
        M = cloud.shape[0]
    rnd = np.random.default_rng(seed).integers(0, M, size=(int(pairs), 2))
    return np.concatenate([cons, rnd]), M


def estimate_lipschitz(f, cloud, pairs=1000, seed=0, domain="", batch=65536):
    """Sampled Lipschitz and one-sided Lipschitz constants of ``f`` on a point cloud.

    ``cloud`` is ``(M, d)`` or a trajectory stack ``(S, K, d)``; in the latter
    case every consecutive-in-time pair enters before the ``pairs`` random
    ones.  ``f`` maps rows to rows.  Both numbers only bound the true
    constants from below.  The one-sided constant is NaN when ``f`` changes
    dimension.
    """
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim not in (2, 3):
        raise ShapeError("cloud must be (M, d) or (S, K, d)")
    idx, M = _pair_indices(cloud, pairs, seed)
    if M < 2:
        raise ValueError("need at least two points")
    flat = cloud.reshape(-1, cloud.shape[-1])
    best_L, best_nu, count = -np.inf, -np.inf, 0
    arg_L = arg_nu = None
    for s in range(0, len(idx), batch):
        chunk = idx[s:s + batch]
        a, b = flat[chunk[:, 0]], flat[chunk[:, 1]]
        lip, one, keep = pair_quotients(f, a, b)
        if not lip.size:
            continue
        count += lip.size
        ka, kb = a[keep], b[keep]
        i = int(np.argmax(lip))
        if lip[i] > best_L:
            best_L, arg_L = float(lip[i]), (ka[i].copy(), kb[i].copy())
        if not np.all(np.isnan(one)):
            j = int(np.nanargmax(one))
            if one[j] > best_nu:
                best_nu, arg_nu = float(one[j]), (ka[j].copy(), kb[j].copy())
    if count == 0:
        raise ValueError("every sampled pair was a duplicate point")
    if arg_nu is None:
        best_nu = float("nan")
    return LipschitzReport(best_L, best_nu, count, domain, arg_L, arg_nu)


def max_jacobian_norm(net_jacobian, cloud):
    """Largest spectral norm of ``net_jacobian(x)`` over the rows of ``cloud``."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, np.shape(cloud)[-1])
    return float(max(np.linalg.norm(net_jacobian(x), 2) for x in cloud))


def b_stability_dt_bound(nu, L):
    """Timestep ``2|nu| / L^2`` below which FE contracts a dissipative system."""
    if not nu < 0:
        raise ValueError(f"one-sided Lipschitz constant must be negative, got {nu}")
    if not L > 0:
        raise ValueError(f"Lipschitz constant must be positive, got {L}")
    return 2.0 * abs(nu) / L**2


# perturbation bounds

@dataclass
class BoundReport:
    name: str
    inputs: dict
    t: np.ndarray
    bound: np.ndarray
    error: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.bound = np.asarray(self.bound, dtype=float)
        if self.bound.shape != self.t.shape or (self.error is not None and np.shape(self.error) != self.t.shape):
            raise ShapeError("bound and error curves must share the time grid")

    def rows(self):
        err = self.error if self.error is not None else np.full_like(self.t, np.nan)
        return np.column_stack([self.t, err, self.bound])


LYAPUNOV_CONSTANTS = ("L_dec", "L_enc", "M_enc_jac", "L_rhs")


def lyapunov_bound_curve(constants, magnitudes, ks, t):
    """Upper bound on ``|w_N(t) - u_N(t)|`` for perturbed full and reduced systems.

    ``constants`` holds ``L_dec``, ``L_enc``, ``M_enc_jac`` and ``L_rhs`` of
    the unscaled autoencoder; ``magnitudes`` holds the norms ``Delta0``,
    ``delta0``, ``Delta`` and ``delta``.  Latent-side perturbations are damped
    by ``1/ks``.
    """
    c = {k: float(constants[k]) for k in LYAPUNOV_CONSTANTS}
    m = {k: float(magnitudes.get(k, 0.0)) for k in ("Delta0", "delta0", "Delta", "delta")}
    if min(c.values()) < 0 or min(m.values()) < 0:
        raise ValueError("constants and perturbation magnitudes must be nonnegative")
    if not ks > 0:
        raise ValueError("scaling factor must be positive")
    t = np.asarray(t, dtype=float)
    start = c["L_enc"] * m["Delta0"] + m["delta0"] / ks
    rate = c["M_enc_jac"] * m["Delta"] + m["delta"] / ks
    with np.errstate(over="ignore"):
        curve = c["L_dec"] * (start + rate * t) * np.exp(c["L_rhs"] * t)
    # 0 * inf would give NaN when nothing is perturbed
    curve = np.where(start + rate * t == 0, 0.0, curve)
    return BoundReport("lyapunov", dict(c, **m, ks=float(ks)), t, curve)


@dataclass(frozen=True)
class PerturbationSpec:
    """Seeded perturbations of the full (``Delta``) and reduced (``delta``) systems.

    ``Delta0``/``delta0`` are fixed vectors; the time-dependent parts are
    drawn per step, componentwise uniform on ``*_range``.  Both streams come
    from independent generators keyed on ``seed`` and replay exactly.
    """

    Delta0: tuple | None = None
    delta0: tuple | None = None
    Delta_range: tuple | None = None
    delta_range: tuple | None = None
    seed: int = 0

    @staticmethod
    def _cap(rng, dim):
        return 0.0 if rng is None else math.sqrt(dim) * max(abs(rng[0]), abs(rng[1]))

    def caps(self, N, n):
        """Declared bounds on the per-step norms of ``Delta`` and ``delta``."""
        return self._cap(self.Delta_range, N), self._cap(self.delta_range, n)

    def draws(self, K, N, n):
        def stream(rng, key, dim):
            if rng is None:
                return np.zeros((K, dim))
            return np.random.default_rng([self.seed, key]).uniform(rng[0], rng[1], size=(K, dim))
        return stream(self.Delta_range, 0, N), stream(self.delta_range, 1, n)

    def initial(self, N, n):
        D0 = np.zeros(N) if self.Delta0 is None else np.asarray(self.Delta0, dtype=float)
        d0 = np.zeros(n) if self.delta0 is None else np.asarray(self.delta0, dtype=float)
        if D0.shape != (N,) or d0.shape != (n,):
            raise ShapeError(f"initial perturbations must have sizes {N} and {n}")
        return D0, d0


@dataclass
class BoundConstants:
    L_dec: float
    L_enc: float
    M_enc_jac: float
    L_rhs: float
    provenance: dict = field(default_factory=dict)

    def as_dict(self):
        return {k: getattr(self, k) for k in LYAPUNOV_CONSTANTS}


def bound_constants(model, problem, mu, u_traj, pairs=2000, seed=0):
    """Sampled constants of the unscaled autoencoder along a full-order trajectory ``u_traj`` (K, N)."""
    ae = model.ae.rescaled(1.0).with_shift(None)
    u_traj = np.asarray(u_traj, dtype=float)
    z = ae.encode(u_traj)
    dec = estimate_lipschitz(ae.decode, z[None], pairs, seed, "decoder on encoded trajectory")
    enc = estimate_lipschitz(ae.encode, u_traj[None], pairs, seed, "encoder on trajectory")
    rhs = estimate_lipschitz(model.latent_rhs(mu, ae, problem.rhs_at(mu)), z[None], pairs, seed,
                             "reduced rhs on encoded trajectory")
    jac = ae.encoder.jacobian
    M = max_jacobian_norm(lambda x: ae.ks * jac(ae.normalize(x)) / ae.scale[None, :], u_traj)
    return BoundConstants(dec.L, enc.L, M, rhs.L, {
        "L_dec": dec.domain, "L_enc": enc.domain, "L_rhs": rhs.domain,
        "M_enc_jac": "max spectral norm of the encoder Jacobian on trajectory",
    })


@dataclass
class PerturbationResult:
    t: np.ndarray
    w: np.ndarray          # perturbed latent trajectory
    w_full: np.ndarray     # its reconstruction
    reference: np.ndarray  # unperturbed full-order solution
    error: np.ndarray      # |w_full - reference|
    report: BoundReport
    diverged_step: int | None = None


def perturbed_integrate(model, problem, mu, perts, grid, constants, scheme="FE", *,
                        reference=None, threshold=DIVERGENCE_THRESHOLD):
    """Forward Euler on the perturbed reduced system, reconstructed and compared with the reference.

    The reduced system is ``w' = F_n(w) + J_enc Delta + delta`` started at
    ``encode(u0 + Delta0) + delta0`` in the model's latent frame (its
    ``K_s`` included).  Divergence truncates the curves with NaN instead of
    raising.
    """
    if get_scheme(scheme).name != "FE":
        raise ConfigError("perturbed integration uses forward Euler")
    mu = np.asarray(mu, dtype=float)
    u0 = problem.init(mu)
    ae = model.frame(u0)
    N, n = ae.N, ae.n
    D0, d0 = perts.initial(N, n)
    Delta, delta = perts.draws(grid.K, N, n)
    rhs = model.latent_rhs(mu, ae, problem.rhs_at(mu))
    t = grid.times
    if reference is None:
        reference = integrate_reference(problem.rhs_at(mu), u0, t)
    w = np.full((grid.K + 1, n), np.nan)
    w[0] = ae.encode(u0 + D0) + d0
    diverged = None
    with np.errstate(all="ignore"):
        for k in range(grid.K):
            step = rhs(w[k]) + delta[k]
            if Delta[k].any():
                step = step + ae.encode_jvp(ae.decode(w[k]), Delta[k])
            nxt = w[k] + grid.dt * step
            if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > threshold:
                diverged = k + 1
                break
            w[k + 1] = nxt
    w_full = np.full((grid.K + 1, N), np.nan)
    ok = np.all(np.isfinite(w), axis=1)
    w_full[ok] = ae.decode(w[ok])
    error = np.linalg.norm(w_full - reference, axis=1)
    mags = {
        "Delta0": float(np.linalg.norm(D0)),
        "delta0": float(np.linalg.norm(d0)),
        "Delta": float(np.max(np.linalg.norm(Delta, axis=1), initial=0.0)),
        "delta": float(np.max(np.linalg.norm(delta, axis=1), initial=0.0)),
    }
    consts = constants.as_dict() if isinstance(constants, BoundConstants) else constants
    report = lyapunov_bound_curve(consts, mags, ae.ks, t)
    report.error = error
    return PerturbationResult(t, w, w_full, np.asarray(reference), error, report, diverged)


# error metrics

def _relative_sq(ref, rec):
    ref, rec = np.asarray(ref, dtype=float), np.asarray(rec, dtype=float)
    if ref.shape != rec.shape:
        raise ShapeError(f"reference {ref.shape} and reconstruction {rec.shape} differ")
    num = np.sum((ref - rec) ** 2, axis=-1)
    den = np.sum(ref * ref, axis=-1)
    zero = den == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm reference snapshots excluded", RuntimeWarning, stacklevel=3)
    return np.where(zero, 0.0, num / np.where(zero, 1.0, den)), ~zero


def error_multi(reference, reconstructed):
    """``sqrt((1/S) sum_i sum_j |u_ij - r_ij|^2 / |u_ij|^2)`` over (S, K, N) stacks.

    The time sum is not averaged.
    """
    rel, _ = _relative_sq(reference, reconstructed)
    if rel.ndim != 2:
        raise ShapeError("expected (samples, times, components)")
    return float(np.sqrt(np.sum(rel) / rel.shape[0]))


def error_timewise(reference, reconstructed):
    """Per-time averages over samples: relative error and signed total defect.

    ``e_rel(t) = sqrt(mean_i |u_i(t) - r_i(t)|^2 / |u_i(t)|^2)`` and
    ``e_con(t) = mean_i sum_k (u_i(t) - r_i(t))_k``.
    """
    rel, keep = _relative_sq(reference, reconstructed)
    if rel.ndim != 2:
        raise ShapeError("expected (samples, times, components)")
    counts = np.maximum(keep.sum(axis=0), 1)
    e_rel = np.sqrt(np.sum(rel, axis=0) / counts)
    e_con = np.mean(np.sum(np.asarray(reference) - np.asarray(reconstructed), axis=-1), axis=0)
    return e_rel, e_con


# convergence

@dataclass
class SweepRow:
    scheme: str
    dt: float
    e_multi: float
    stable: bool
    strategy: str = ""


@dataclass
class SweepResult:
    rows: list
    slopes: dict          # scheme -> fitted slope or None
    fit_ranges: dict      # scheme -> (dt_max, dt_min) of the fitted run or None
    t_eval: np.ndarray

    def errors(self, scheme):
        rs = [r for r in self.rows if r.scheme == scheme]
        return np.array([r.dt for r in rs]), np.array([r.e_multi for r in rs]), np.array([r.stable for r in rs])


def local_orders(dts, errs):
    dts, errs = np.asarray(dts, dtype=float), np.asarray(errs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(errs[:-1] / errs[1:]) / np.log(dts[:-1] / dts[1:])


def fit_slope(dts, errs, order, stable=None, tol=PLATEAU_TOLERANCE):
    """Least-squares log-log slope over the longest run of local orders near ``order``.

    A local order between consecutive (stable) dt values counts when it is
    within ``tol * order`` of ``order``.  Ties go to the larger dt values.
    Returns ``(slope, (i, j))`` with the fitted index range, or ``(None, None)``.
    """
    dts, errs = np.asarray(dts, dtype=float), np.asarray(errs, dtype=float)
    ok = np.isfinite(errs) & (errs > 0)
    if stable is not None:
        ok &= np.asarray(stable, dtype=bool)
    lo = local_orders(dts, errs)
    good = ok[:-1] & ok[1:] & (np.abs(lo - order) <= tol * order)
    best, start = (0, None), None
    for i, g in enumerate(list(good) + [False]):
        if g and start is None:
            start = i
        elif not g and start is not None:
            if i - start > best[0]:
                best = (i - start, start)
            start = None
    if best[1] is None:
        return None, None
    i, j = best[1], best[1] + best[0]
    slope = np.polyfit(np.log(dts[i:j + 1]), np.log(errs[i:j + 1]), 1)[0]
    return float(slope), (i, j)


def common_times(dts, T, dt_eval=None):
    """Evaluation grid shared by all runs and each run's stride onto it.

    The grid holds the multiples of ``dt_eval`` up to ``T``; when ``T`` is
    not a multiple the horizon is cut at the last one.
    """
    dts = [float(d) for d in dts]
    dt_eval = max(dts) if dt_eval is None else float(dt_eval)
    K = math.floor(T / dt_eval * (1 + 1e-12))
    if K < 1:
        raise ConfigError(f"evaluation step {dt_eval} exceeds the horizon {T}")
    strides = []
    for dt in dts:
        s = round(dt_eval / dt)
        if s < 1 or not math.isclose(s * dt, dt_eval, rel_tol=1e-9):
            raise ConfigError(f"dt={dt} does not divide the evaluation step {dt_eval}")
        strides.append(s)
    return dt_eval * np.arange(K + 1), strides


def convergence_sweep(model, problem, mu, dts, schemes=("FE",), *, T=None, reference=None,
                      dt_eval=None, strategy="", threshold=DIVERGENCE_THRESHOLD):
    """``e_multi`` of the reconstructed reduced solution for every (scheme, dt).

    All runs are compared with the reference on a common grid of spacing
    ``dt_eval`` (default: the largest dt).  ``dts`` must be decreasing.
    Diverged runs, or runs whose error is not finite, are flagged unstable
    and left out of the slope fit.
    """
    dts = [float(d) for d in dts]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ConfigError("dt list must be strictly decreasing")
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    T = problem.T if T is None else float(T)
    t_eval, strides = common_times(dts, T, dt_eval)
    if reference is None:
        reference = np.swapaxes(integrate_reference(problem.rhs_at(mu), problem.init(mu), t_eval), 0, 1)
    reference = np.asarray(reference)
    rows, slopes, ranges = [], {}, {}
    for name in schemes:
        sch = get_scheme(name)
        errs, stab = [], []
        for dt, s in zip(dts, strides):
            grid = FixedGrid(dt, s * (len(t_eval) - 1))
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    _, u = model.solve(problem, mu, grid, sch, threshold=threshold)
                e = error_multi(reference, np.swapaxes(u[::s], 0, 1))
                stable = bool(np.isfinite(e))
            except (DivergenceError, NumericError):
                e, stable = float("nan"), False
            rows.append(SweepRow(sch.name, dt, e, stable, strategy))
            errs.append(e)
            stab.append(stable)
        slope, rng = fit_slope(dts, errs, sch.order, stab)
        slopes[sch.name] = slope
        ranges[sch.name] = None if rng is None else (dts[rng[0]], dts[rng[1]])
    return SweepResult(rows, slopes, ranges, t_eval)


def intercept_constant(dts, errs, order):
    """``C`` in ``e ~ C dt^order`` from the geometric mean of ``e / dt^order``."""
    dts, errs = np.asarray(dts, dtype=float), np.asarray(errs, dtype=float)
    return float(np.exp(np.mean(np.log(errs) - order * np.log(dts))))


def global_error_bound(L_dec, L_rhs, eps_enc, eps_rhs, eps_dec, T, dt, P, C1):
    """``L_dec (eps_enc + eps_rhs T) e^{L_rhs T} + L_dec C1 dt^P + eps_dec``."""
    args = (L_dec, L_rhs, eps_enc, eps_rhs, eps_dec, T, dt, P, C1)
    if min(args) < 0:
        raise ValueError("all inputs must be nonnegative")
    return float(L_dec * (eps_enc + eps_rhs * T) * math.exp(L_rhs * T) + L_dec * C1 * dt**P + eps_dec)
