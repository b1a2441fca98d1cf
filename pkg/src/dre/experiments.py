"""Named experiment recipes: dataset, training, evaluation and stability runs.

Every preset has a desk-scale default and a ``paper`` block of overrides
used with ``paper_scale=True``.  Configurations are plain nested dicts so
they serialize to TOML/JSON unchanged.
"""

from __future__ import annotations

import copy
import math
import warnings

import numpy as np

from .analysis import (
    PerturbationSpec,
    b_stability_dt_bound,
    bound_constants,
    convergence_sweep,
    error_multi,
    error_timewise,
    estimate_lipschitz,
    perturbed_integrate,
)
from .errors import ConfigError
from .integrators import FixedGrid, fe_stability_max_dt, integrate_fixed, integrate_reference
from .nn import ARCHITECTURES, architecture, mlp
from .problems import MANIFOLDS, get_problem
from .reduction import ReducedModel
from .training import (
    LossSpec,
    TrainConfig,
    build_autoencoder,
    generate_dataset,
    static_dataset,
    train_autoencoder,
    train_fully,
    train_semi,
)

STRATEGIES = ("exact-rhs", "semi", "fully")

_DESK_SCHEDULE = [[0, 3e-3], [200, 3e-4], [320, 3e-5]]

PRESETS = {
    "test1-linear": {
        "generate": {"problem": "test1-linear", "samples": 200, "ntime": 51, "T": 0.5,
                     "val": 0.25, "test": 0.25, "store_rhs": False},
        "train": {"strategy": "exact-rhs", "normalization": "none", "epochs": 1000, "batch": 8,
                  "lr": [[0, 1e-2], [500, 1e-3], [800, 1e-4]]},
        "evaluate": {"scheme": "FE", "dt": 0.99 * 0.4, "T": 100.0},
        "paper": {},
    },
    "test1-nonlinear": {
        "generate": {"problem": "test1-nonlinear", "samples": 200, "ntime": 51, "T": 0.5,
                     "val": 0.25, "test": 0.25, "store_rhs": False},
        "train": {"strategy": "exact-rhs", "normalization": "none", "epochs": 100, "batch": 8,
                  "lr": [[0, 1e-2], [50, 1e-3], [80, 1e-4]]},
        "evaluate": {"scheme": "FE", "T": 0.5},
        "stability": {"pairs": 2000, "safety": 0.9, "offset": 1e-3},
        "paper": {"train": {"epochs": 50, "lr": [[0, 1e-2], [30, 1e-3]]}},
    },
    "sir": {
        "generate": {"problem": "sir", "samples": 100, "ntime": 101, "T": 20.0,
                     "val": 0.2, "test": 0.2, "store_rhs": True},
        "train": {"strategy": "fully", "scheme": "FE", "epochs": 400, "batch": 4, "lr": _DESK_SCHEDULE},
        "evaluate": {"scheme": "FE", "T": 20.0},
        "converge": {"schemes": ["FE", "AB2", "RK4"], "s_min": -4, "s_max": 2},
        "paper": {
            "generate": {"samples": 300, "ntime": 20001, "val": 1 / 6, "test": 1 / 6},
            "train": {"epochs": 2000, "batch": 32, "lr": [[0, 1e-3], [500, 1e-4], [1500, 1e-5]]},
            "converge": {"s_max": 6},
        },
    },
    "sir-lyapunov": {
        "generate": {"problem": "sir", "samples": 100, "ntime": 101, "T": 20.0,
                     "val": 0.2, "test": 0.2, "store_rhs": False},
        "train": {"strategy": "exact-rhs", "epochs": 200, "batch": 4,
                  "lr": [[0, 3e-3], [100, 3e-4], [160, 3e-5]]},
        "stability": {"dt": 1e-2, "T": 20.0, "delta_range": [-0.2, 2.0], "ks": [1.0, 2.0],
                      "samples": 2, "pairs": 2000},
        "paper": {"generate": {"samples": 200, "val": 0.125, "test": 0.25}, "train": {"epochs": 2000}},
    },
    "chemistry": {
        "generate": {"problem": "chemistry", "samples": 120, "ntime": 100, "T": 3.0,
                     "val": 0.1, "test": 0.1, "relative_to": "train", "store_rhs": False},
        "train": {"strategy": "fully", "scheme": "AB2", "epochs": 400, "batch": 4, "lr": _DESK_SCHEDULE},
        "evaluate": {"scheme": "AB2", "T": 6.0},
        "paper": {"generate": {"samples": 240}, "train": {"epochs": 2000}},
    },
    "coil": {
        "manifold": {"kind": "coil", "count": 1000, "width": 32, "epochs": 300, "batch": 32,
                     "lr": [[0, 3e-3], [150, 3e-4]]},
        "paper": {},
    },
    "noisy-coil": {
        "manifold": {"kind": "noisy-coil", "count": 1000, "width": 32, "epochs": 300, "batch": 32,
                     "lr": [[0, 3e-3], [150, 3e-4]]},
        "paper": {},
    },
}


def merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(name, paper_scale=False, overrides=None):
    """Preset ``name`` with optional full-scale block and user overrides applied."""
    try:
        cfg = copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    paper = cfg.pop("paper", {})
    if paper_scale:
        cfg = merge(cfg, paper)
    return merge(cfg, overrides)


# steps

def make_dataset(gen, seed=0):
    problem = gen.get("problem")
    if not problem:
        raise ConfigError("dataset generation needs a problem")
    return generate_dataset(
        problem, int(gen["samples"]), int(gen["ntime"]), gen.get("T"),
        store_rhs=bool(gen.get("store_rhs", False)), seed=seed,
        val=float(gen.get("val", 0.1)), test=float(gen.get("test", 0.1)),
        relative_to=gen.get("relative_to", "total"),
    )


def networks(problem, n_latent=None, seed=0):
    """Encoder, decoder and reduced-rhs networks for a problem.

    Problems with a published layout use it; otherwise an ELU encoder and a
    PReLU decoder of width 32 are built around latent size ``n_latent``.
    """
    prob = get_problem(problem)
    if f"{problem}/encoder" in ARCHITECTURES:
        enc = architecture(f"{problem}/encoder", seed=seed + 1)
        dec = architecture(f"{problem}/decoder", seed=seed + 2)
    else:
        n = n_latent or 2
        enc = mlp([prob.dim, 32, 32, n], "elu", seed=seed + 1)
        dec = mlp([n, 32, 32, prob.dim], "prelu", seed=seed + 2)
    n = enc.out_dim
    if f"{problem}/rhs" in ARCHITECTURES:
        rhs = architecture(f"{problem}/rhs", seed=seed + 3)
    else:
        rhs = mlp([n + prob.param_dim, 32, 32, n], "elu", seed=seed + 3)
    return enc, dec, rhs


def train_config(tr, seed=0):
    return TrainConfig(
        epochs=int(tr.get("epochs", 100)), batch_size=int(tr.get("batch", 32)),
        lr_schedule=[(int(e), float(v)) for e, v in tr.get("lr", [[0, 1e-3]])], seed=seed,
        windows=tr.get("windows"), val_windows=tr.get("val_windows"),
    )


def loss_spec(tr, scheme):
    weights = tr.get("weights")
    if not weights:
        return None
    return LossSpec(dict(weights), scheme=scheme, conservation_mode=tr.get("conservation_mode", "componentwise"))


def train(ds, tr, seed=0):
    """Run one training strategy; returns a :class:`TrainResult` whose model carries ``ks``."""
    strategy = tr.get("strategy", "exact-rhs")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "semi" and not ds.has_rhs:
        raise ConfigError("the semi strategy needs a dataset generated with stored right-hand sides")
    enc, dec, rhs = networks(ds.problem, tr.get("latent"), seed)
    ae = build_autoencoder(ds, enc, dec, tr.get("normalization", "standard"))
    cfg = train_config(tr, seed)
    scheme = tr.get("scheme", "FE")
    spec = loss_spec(tr, scheme)
    if strategy == "exact-rhs":
        res = train_autoencoder(ds, ae, cfg, spec)
    elif strategy == "semi":
        res = train_semi(ds, ae, rhs, cfg, spec=spec)
    else:
        res = train_fully(ds, ae, rhs, cfg, scheme, spec)
    ks = float(tr.get("ks", 1.0))
    if ks != 1.0:
        res.model.ae = res.model.ae.rescaled(ks)
    return res


def reconstruct(model, problem, mu, dt, T, scheme="FE"):
    """Reduced solve for every row of ``mu``; returns ``(t, u)`` with ``u`` of shape (S, K+1, N)."""
    grid = FixedGrid.spanning(dt, T)
    with warnings.catch_warnings():
        # decoded states may leave the physical domain slightly
        warnings.simplefilter("ignore", RuntimeWarning)
        _, u = model.solve(problem, np.atleast_2d(mu), grid, scheme)
    return grid.times, np.swapaxes(u, 0, 1)


def evaluate(model, ds, ev, split="test"):
    """Timewise and aggregate errors of the reduced model against the reference on ``split``."""
    problem = get_problem(ds.problem)
    mu, _, _ = ds.subset(split)
    dt = float(ev.get("dt") or model.dt_train or ds.dt)
    T = float(ev.get("T", ds.T))
    t, u_hat = reconstruct(model, problem, mu, dt, T, ev.get("scheme", "FE"))
    ref = np.swapaxes(integrate_reference(problem.rhs_at(mu), problem.init(mu), t), 0, 1)
    e_rel, e_con = error_timewise(ref, u_hat)
    train_mask = t <= ds.T + 1e-12
    return {
        "t": t, "reference": ref, "reconstruction": u_hat, "mu": mu,
        "e_rel": e_rel, "e_con": e_con,
        "e_multi": error_multi(ref, u_hat),
        "e_multi_train_window": error_multi(ref[:, train_mask], u_hat[:, train_mask]),
        "max_abs_final": float(np.max(np.abs(u_hat[:, -1]))),
    }


def converge(model, ds, cv, strategy="", split="test"):
    problem = get_problem(ds.problem)
    mu, _, _ = ds.subset(split)
    dt_train = model.dt_train or ds.dt
    dts = [dt_train * 2.0**s for s in range(int(cv.get("s_max", 2)), int(cv.get("s_min", -4)) - 1, -1)]
    return convergence_sweep(model, problem, mu, dts, cv.get("schemes", ["FE"]),
                             T=float(cv.get("T", ds.T)), strategy=strategy)


# stability experiments

def latent_constants(model, problem, mu, u, pairs=2000, seed=0):
    """Sampled ``(nu, L)`` of the reduced rhs over encoded trajectories, maximized over samples."""
    ae = model.ae.with_shift(None)
    nus, Ls = [], []
    for i in range(len(mu)):
        z = ae.encode(u[i])
        rep = estimate_lipschitz(model.latent_rhs(mu[i], ae, problem.rhs_at(mu[i])), z[None],
                                 pairs, seed + i, f"reduced rhs on test trajectory {i}")
        nus.append(rep.nu)
        Ls.append(rep.L)
    return float(max(nus)), float(max(Ls))


def dissipativity_check(model, ds, st, split="test", seed=0):
    """FE at ``safety * 2|nu|/L^2`` from two nearby latent starts; fraction of non-growing gap steps."""
    problem = get_problem(ds.problem)
    mu, u, _ = ds.subset(split)
    nu, L = latent_constants(model, problem, mu, u, int(st.get("pairs", 2000)), seed)
    out = {"nu": nu, "L": L, "dt_bound": None, "dt": None, "fraction_nonincreasing": None}
    if problem.meta.get("eigenvalues"):
        out["fe_full_max_dt"] = fe_stability_max_dt(problem.meta["eigenvalues"])
    if not nu < 0:
        return out
    dt_bound = b_stability_dt_bound(nu, L)
    dt = float(st.get("safety", 0.9)) * dt_bound
    T = float(st.get("T", ds.T))
    grid = FixedGrid(dt, max(1, math.ceil(T / dt)))
    ae = model.ae.with_shift(None)
    rhs = model.latent_rhs(mu, ae, problem.rhs_at(mu))
    z0 = ae.encode(problem.init(mu))
    direction = np.random.default_rng(seed).standard_normal(z0.shape)
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    a = integrate_fixed(rhs, z0, grid, "FE")
    b = integrate_fixed(rhs, z0 + float(st.get("offset", 1e-3)) * direction, grid, "FE")
    gap = np.linalg.norm(a - b, axis=-1)           # (K+1, S)
    steps = gap[1:] <= gap[:-1] * (1 + 1e-12)
    out.update(dt_bound=dt_bound, dt=dt, steps=grid.K,
               fraction_nonincreasing=float(steps.mean(axis=0).min()), gap=gap)
    return out


def scaling_check(model, ds, st, split="test", seed=0):
    """Perturbed FE runs at each ``K_s`` with one seeded perturbation stream per sample."""
    problem = get_problem(ds.problem)
    mu, _, _ = ds.subset(split)
    count = int(st.get("samples", 2))
    grid = FixedGrid.spanning(float(st["dt"]), float(st.get("T", ds.T)))
    rng = st.get("delta_range", [-0.2, 2.0])
    runs = []
    for i in range(min(count, len(mu))):
        ref = integrate_reference(problem.rhs_at(mu[i]), problem.init(mu[i]), grid.times)
        consts = bound_constants(model, problem, mu[i], ref, int(st.get("pairs", 2000)), seed)
        spec = PerturbationSpec(delta_range=tuple(rng), seed=seed + i)
        base = model.ae.rescaled(1.0)
        per_ks = {}
        for ks in st.get("ks", [1.0, 2.0]):
            m = ReducedModel(base.rescaled(float(ks)), model.rhs_net, model.mu_lo, model.mu_hi,
                             model.problem, model.dt_train, model.scheme, model.shift_mode)
            per_ks[float(ks)] = {
                "perturbed": perturbed_integrate(m, problem, mu[i], spec, grid, consts, reference=ref),
                "clean": perturbed_integrate(m, problem, mu[i], PerturbationSpec(), grid, consts, reference=ref),
            }
        runs.append({"mu": mu[i], "constants": consts, "runs": per_ks})
    return runs


# static manifolds

def manifold_study(mf, seed=0):
    """Fit autoencoders with a linear and with a nonlinear encoder (latent size 1) to a sampled manifold."""
    kind = mf.get("kind", "coil")
    if kind not in MANIFOLDS:
        raise ConfigError(f"unknown manifold {kind!r}")
    man = MANIFOLDS[kind]
    x = man.sample(int(mf.get("count", 1000)), seed)
    ds = static_dataset(kind, x, seed)
    w = int(mf.get("width", 32))
    cfg = TrainConfig(epochs=int(mf.get("epochs", 300)), batch_size=int(mf.get("batch", 32)),
                      lr_schedule=[(int(e), float(v)) for e, v in mf.get("lr", [[0, 1e-3]])], seed=seed)
    n = man.intrinsic_dim
    out = {}
    for label, enc in (("linear-encoder", mlp([3, n], kind="linear", seed=seed + 1)),
                       ("nonlinear-encoder", mlp([3, w, w, n], "elu", seed=seed + 1))):
        dec = mlp([n, w, w, 3], "prelu", seed=seed + 2)
        res = train_autoencoder(ds, build_autoencoder(ds, enc, dec), cfg)
        _, u_test, _ = ds.subset("test")
        rec = res.model.ae.roundtrip(u_test[:, 0])
        out[label] = {
            "model": res.model, "log": res.logs["autoencoder"],
            "test_mse": float(np.mean(np.sum((rec - u_test[:, 0]) ** 2, axis=1))),
            "test_max_err": float(np.max(np.linalg.norm(rec - u_test[:, 0], axis=1))),
        }
    out["points"] = x
    return out

