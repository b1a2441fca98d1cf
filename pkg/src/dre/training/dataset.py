"""Reference trajectory datasets: generation, splitting and CSV storage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, StiffnessError
from ..integrators import integrate_reference
from ..problems import get_problem

MIN_SPLIT_FRACTION = 0.1


@dataclass
class TrajectoryDataset:
    problem: str
    mu: np.ndarray          # (S, p)
    t: np.ndarray           # (K,)
    u: np.ndarray           # (S, K, N)
    f: np.ndarray | None    # (S, K, N) or None
    splits: dict            # name -> index array
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        check_splits(self.splits, len(self.mu))

    @property
    def n_samples(self):
        return self.u.shape[0]

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else None

    @property
    def T(self):
        return float(self.t[-1])

    @property
    def dim(self):
        return self.u.shape[-1]

    @property
    def has_rhs(self):
        return self.f is not None

    def subset(self, split):
        idx = np.asarray(self.splits[split])
        return self.mu[idx], self.u[idx], (None if self.f is None else self.f[idx])


def split_counts(n, val, test, relative_to="total"):
    """Sizes of (train, val, test).

    ``relative_to="total"`` takes ``ceil(frac * n)`` for val and test;
    ``"train"`` sizes them as fractions of the training count, so
    ``n = 240`` with 0.1/0.1 gives 200/20/20.
    """
    if relative_to == "total":
        n_val, n_test = math.ceil(val * n - 1e-9), math.ceil(test * n - 1e-9)
        n_train = n - n_val - n_test
    elif relative_to == "train":
        n_train = int(round(n / (1.0 + val + test)))
        n_val = math.ceil(val * n_train - 1e-9)
        n_test = n - n_train - n_val
    else:
        raise ValueError(f"unknown split base {relative_to!r}")
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise ConfigError(f"{n} samples cannot be split into train/val/test")
    return n_train, n_val, n_test


def check_splits(splits, n):
    names = ("train", "val", "test")
    if set(splits) != set(names):
        raise ConfigError("splits must be exactly train/val/test")
    all_idx = np.concatenate([np.asarray(splits[k], dtype=int) for k in names])
    if all_idx.size != n or np.unique(all_idx).size != n or (n and (all_idx.min() < 0 or all_idx.max() >= n)):
        raise ConfigError("splits must be disjoint and cover every sample")
    n_train = len(splits["train"])
    for k in ("val", "test"):
        if len(splits[k]) < MIN_SPLIT_FRACTION * n_train - 1e-9:
            raise ConfigError(f"{k} split holds fewer than 10% of the training samples")


def make_splits(n, seed, val=0.1, test=0.1, relative_to="total"):
    n_train, n_val, _ = split_counts(n, val, test, relative_to)
    perm = np.random.default_rng(seed).permutation(n)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def generate_dataset(problem, n_samples, n_time, T=None, *, store_rhs=False, seed=0,
                     val=0.1, test=0.1, relative_to="total", atol=1e-16, rtol=1e-12, mu=None):
    """Sample parameters uniformly and solve the full system for each.

    ``n_time`` counts snapshots including ``t = 0``, so the grid spacing is
    ``T / (n_time - 1)``.
    """
    if isinstance(problem, str):
        problem = get_problem(problem)
    if n_samples < 10:
        raise ConfigError("at least 10 samples are needed for the train/val/test split")
    if n_time < 3:
        raise ConfigError("need at least 3 snapshots per trajectory")
    T = problem.T if T is None else float(T)
    t = np.linspace(0.0, T, n_time)
    mu = problem.sample_params(n_samples, seed) if mu is None else np.asarray(mu, dtype=float)
    u0 = problem.init(mu)
    try:
        u = integrate_reference(problem.rhs_at(mu), u0, t, atol=atol, rtol=rtol)
    except StiffnessError:
        for i in range(n_samples):
            try:
                integrate_reference(problem.rhs_at(mu[i]), u0[i], t, atol=atol, rtol=rtol)
            except StiffnessError as exc:
                raise StiffnessError(f"reference solve failed for mu={mu[i].tolist()}: {exc}") from exc
        raise
    u = np.ascontiguousarray(np.swapaxes(u, 0, 1))
    f = problem.rhs(u, mu[:, None, :]) if store_rhs else None
    return TrajectoryDataset(
        problem=problem.name, mu=mu, t=t, u=u, f=f,
        splits=make_splits(n_samples, seed + 1, val, test, relative_to), seed=seed,
        meta={"atol": atol, "rtol": rtol, "param_lo": problem.param_lo.tolist(), "param_hi": problem.param_hi.tolist()},
    )


def static_dataset(name, points, seed=0, val=0.1, test=0.1):
    """Point cloud (e.g. a sampled manifold) stored as one-snapshot trajectories."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    return TrajectoryDataset(
        problem=name, mu=np.zeros((n, 0)), t=np.zeros(1), u=points[:, None, :], f=None,
        splits=make_splits(n, seed + 1, val, test), seed=seed, meta={"static": True},
    )


def save_dataset(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    N = ds.dim
    cols = ["t"] + [f"u_{k + 1}" for k in range(N)]
    if ds.has_rhs:
        cols += [f"f_{k + 1}" for k in range(N)]
    for i in range(ds.n_samples):
        block = [ds.t[:, None], ds.u[i]] + ([ds.f[i]] if ds.has_rhs else [])
        np.savetxt(directory / f"traj_{i}.csv", np.hstack(block), fmt="%.17g",
                   delimiter=",", header=",".join(cols), comments="")
    manifest = {
        "problem": ds.problem,
        "seed": ds.seed,
        "dt_train": ds.dt,
        "T": ds.T,
        "n_samples": ds.n_samples,
        "n_time": len(ds.t),
        "store_rhs": ds.has_rhs,
        "splits": {k: np.asarray(v).tolist() for k, v in ds.splits.items()},
        "mu": ds.mu.tolist(),
        "meta": ds.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory):
    directory = Path(directory)
    try:
        doc = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read dataset manifest in {directory}: {exc}") from exc
    rows = [np.loadtxt(directory / f"traj_{i}.csv", delimiter=",", skiprows=1, ndmin=2)
            for i in range(doc["n_samples"])]
    data = np.stack(rows)
    t = data[0, :, 0]
    N = (data.shape[-1] - 1) // (2 if doc["store_rhs"] else 1)
    u = data[:, :, 1:1 + N]
    f = data[:, :, 1 + N:1 + 2 * N] if doc["store_rhs"] else None
    return TrajectoryDataset(
        problem=doc["problem"], mu=np.array(doc["mu"], dtype=float), t=t,
        u=np.ascontiguousarray(u), f=None if f is None else np.ascontiguousarray(f),
        splits={k: np.array(v, dtype=int) for k, v in doc["splits"].items()},
        seed=doc["seed"], meta=doc.get("meta", {}),
    )
