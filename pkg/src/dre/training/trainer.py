"""Training loops for the autoencoder-only, semi data-driven and fully data-driven strategies."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError
from ..integrators import get_scheme
from ..nn import AdamState, adam_step
from ..problems import get_problem
from ..reduction import Autoencoder, ReducedModel
from .losses import (
    LossSpec,
    autoencoder_pass,
    conservation_defect,
    loss_dissipativity,
    loss_orthogonality,
    residual_from_latent,
    semi_from_targets,
    semi_targets,
)

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "wall_time_s")


@dataclass
class TrainConfig:
    """Optimization settings.

    A minibatch is ``batch_size`` trajectories; ``windows`` optionally draws
    that many random time windows per batch instead of using every snapshot.
    ``lr_schedule`` lists ``(first_epoch, lr)`` pairs.
    """

    epochs: int = 100
    batch_size: int = 32
    lr_schedule: list = field(default_factory=lambda: [(0, 1e-3)])
    seed: int = 0
    windows: int | None = None
    val_windows: int | None = None

    def __post_init__(self):
        starts = [int(e) for e, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("lr schedule thresholds must start at 0 and increase")
        if any(not lr > 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")

    def lr_at(self, epoch):
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return float(lr)


@dataclass
class TrainResult:
    model: ReducedModel
    logs: dict
    best_epoch: dict


def fit_normalization(u, mode="standard"):
    """Per-component ``(mean, scale)`` from training snapshots."""
    flat = np.asarray(u).reshape(-1, np.shape(u)[-1])
    N = flat.shape[1]
    if mode == "none":
        return np.zeros(N), np.ones(N)
    if mode == "standard":
        mean, scale = flat.mean(0), flat.std(0)
    elif mode == "scale":
        mean, scale = np.zeros(N), np.abs(flat).max(0)
    else:
        raise ConfigError(f"unknown normalization {mode!r}")
    return mean, np.where(scale > 1e-12, scale, 1.0)


def build_autoencoder(ds, encoder, decoder, normalization="standard"):
    _, u_train, _ = ds.subset("train")
    mean, scale = fit_normalization(u_train, normalization)
    return Autoencoder(encoder, decoder, mean=mean, scale=scale)


def _param_box(ds):
    if "param_lo" in ds.meta:
        return np.array(ds.meta["param_lo"]), np.array(ds.meta["param_hi"])
    p = get_problem(ds.problem)
    return p.param_lo, p.param_hi


def _select(K, P, windows, rng):
    """Window ends and the sorted union of snapshot indices they touch."""
    ends = np.arange(P, K)
    if windows is not None and windows < ends.size:
        ends = np.sort(rng.choice(ends, size=windows, replace=False))
    times = np.unique(np.concatenate([ends - p for p in range(P + 1)]))
    return times, np.searchsorted(times, ends)


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def _optimize(nets, batch_loss, val_loss, n_train, config, label):
    """Adam over ``nets`` with best-validation restore; returns (log rows, best epoch)."""
    rng = np.random.default_rng(config.seed)
    states = [AdamState.zeros(net.n_params) for net in nets]
    best = (np.inf, -1, [net.params.copy() for net in nets])
    rows = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, config.batch_size):
            idx = np.sort(perm[start:start + config.batch_size])
            loss, grads = batch_loss(idx, rng)
            if not np.isfinite(loss):
                raise NumericError(f"{label}: non-finite training loss at epoch {epoch}")
            for net, st, g in zip(nets, states, grads):
                st.lr = lr
                adam_step(st, net.params, g)
            losses.append(loss)
        val = val_loss()
        if not np.isfinite(val):
            raise NumericError(f"{label}: non-finite validation loss at epoch {epoch}")
        if val < best[0]:
            best = (val, epoch, [net.params.copy() for net in nets])
        rows.append({
            "epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val,
            "lr": lr, "wall_time_s": round(time.perf_counter() - t0, 6),
        })
    for net, p in zip(nets, best[2]):
        net.params[:] = p
    return rows, best[1]


class _JointObjective:
    """Autoencoder terms, optionally plus residual/dissipativity terms for ``fn``."""

    def __init__(self, ae, fn, spec, u, mu_hat, dt, windows):
        self.ae, self.fn, self.spec = ae, fn, spec
        self.xn = ae.normalize(u)
        self.mu_hat = mu_hat
        self.dt = dt
        self.windows = windows
        self.scheme = get_scheme(spec.scheme)
        self.P = self.scheme.P if spec.weight("residual") else 0
        if spec.weight("residual") and fn is None:
            raise ConfigError("the residual term needs a reduced right-hand-side network")

    def nets(self):
        return [self.ae.encoder, self.ae.decoder] + ([self.fn] if self.fn is not None else [])

    def __call__(self, idx, rng, grad=True):
        ae, spec = self.ae, self.spec
        times, ends = _select(self.xn.shape[1], self.P, self.windows, rng)
        x = self.xn[idx][:, times]
        B, T, N = x.shape
        xf = x.reshape(-1, N)
        z, tz, y, ty = autoencoder_pass(ae, xf)
        d = y - xf
        M = len(xf)
        total = 0.0
        gy = np.zeros_like(d)
        w = spec.weight("autoencoder")
        if w:
            total += w * float(np.mean(np.sum(d * d, axis=1)))
            gy += w * 2 * d / M
        w = spec.weight("conservation")
        if w:
            vals, gd = conservation_defect(d, ae.scale, spec.conservation_mode)
            total += w * float(np.mean(vals))
            gy += w * gd / M
        grads = []
        if grad:
            g_dec, gz = ae.decoder.backward(ty, gy)
            g_enc, _ = ae.encoder.backward(tz, gz)
        w = spec.weight("orthogonality")
        if w:
            val, ge, gd_ = loss_orthogonality(ae, grad=True)
            total += w * val
            if grad:
                g_enc += w * ge
                g_dec += w * gd_
        if grad:
            grads = [g_enc, g_dec]
        if self.fn is not None:
            zl = z.reshape(B, T, -1)
            g_fn = np.zeros_like(self.fn.params)
            w = spec.weight("residual")
            if w:
                out = residual_from_latent(self.fn, zl, self.mu_hat[idx], ends, self.scheme, self.dt, grad)
                val, g = out if grad else (out, None)
                total += w * val
                if grad:
                    g_fn += w * g
            w = spec.weight("dissipativity")
            if w:
                val, g = loss_dissipativity(self.fn, zl, self.mu_hat[idx], spec.dissipativity_margin, grad=True)
                total += w * val
                g_fn += w * g
            if grad:
                grads.append(g_fn)
        return (total, grads) if grad else total


def _val_fn(objective, n_val, config):
    seed = config.seed + 7919

    def run():
        rng = np.random.default_rng(seed)
        return float(objective(np.arange(n_val), rng, grad=False))

    return run


def _model(ds, ae, fn, scheme, strategy):
    lo, hi = _param_box(ds) if fn is not None else (None, None)
    return ReducedModel(
        ae, fn, mu_lo=lo, mu_hi=hi,
        problem=ds.problem, dt_train=ds.dt, scheme=scheme, shift_mode="initial",
        meta={"strategy": strategy},
    )


def train_autoencoder(ds, ae, config, spec=None):
    """Fit the autoencoder alone (the exact right-hand-side strategy)."""
    spec = spec or LossSpec()
    if spec.weight("residual") or spec.weight("semi") or spec.weight("dissipativity"):
        raise ConfigError("autoencoder training takes only autoencoder-side terms")
    mu_t, u_t, _ = ds.subset("train")
    mu_v, u_v, _ = ds.subset("val")
    obj = _JointObjective(ae, None, spec, u_t, None, ds.dt, config.windows)
    val = _JointObjective(ae, None, spec, u_v, None, ds.dt, config.val_windows)
    rows, best = _optimize(obj.nets(), obj, _val_fn(val, len(u_v), config), len(u_t), config, "autoencoder")
    return TrainResult(_model(ds, ae, None, None, "exact-rhs"), {"autoencoder": rows}, {"autoencoder": best})


def train_semi(ds, ae, fn, config, config_rhs=None, spec=None):
    """Two phases: autoencoder on its own, then the reduced network on the frozen encoder's targets."""
    if not ds.has_rhs:
        raise ConfigError("semi data-driven training needs a dataset with stored right-hand sides")
    first = train_autoencoder(ds, ae, config, spec)
    config_rhs = config_rhs or config
    lo, hi = _param_box(ds)
    mu_t, u_t, f_t = ds.subset("train")
    mu_v, u_v, f_v = ds.subset("val")

    def prepared(mu, u, f):
        z, target = semi_targets(ae, u, f)
        S, K = u.shape[:2]
        mu_hat = (mu - lo) / (hi - lo)
        return z.reshape(S, K, -1), target.reshape(S, K, -1), mu_hat

    zt, tt, mt = prepared(mu_t, u_t, f_t)
    zv, tv, mv = prepared(mu_v, u_v, f_v)
    n = zt.shape[-1]

    def make(z, target, mu_hat, windows):
        def objective(idx, rng, grad=True):
            times, _ = _select(z.shape[1], 0, windows, rng)
            zz = z[idx][:, times].reshape(-1, n)
            tg = target[idx][:, times].reshape(-1, n)
            mm = np.repeat(mu_hat[idx], len(times), axis=0)
            out = semi_from_targets(fn, zz, tg, mm, grad)
            return (out[0], [out[1]]) if grad else out
        return objective

    rows, best = _optimize(
        [fn], make(zt, tt, mt, config_rhs.windows),
        _val_fn(make(zv, tv, mv, config_rhs.val_windows), len(u_v), config_rhs),
        len(u_t), config_rhs, "semi",
    )
    logs = dict(first.logs, rhs=rows)
    return TrainResult(_model(ds, ae, fn, None, "semi"), logs, dict(first.best_epoch, rhs=best))


def train_fully(ds, ae, fn, config, scheme="FE", spec=None):
    """Joint fit of autoencoder and reduced network on reconstruction plus scheme residual.

    The default residual weight ``1/dt_train^2`` puts the residual on the
    scale of a right-hand-side mismatch.
    """
    scheme = get_scheme(scheme)
    if not scheme.multistep:
        raise ConfigError(f"{scheme.name} cannot drive residual training")
    if spec is None:
        spec = LossSpec({"autoencoder": 1.0, "residual": 1.0 / ds.dt**2}, scheme=scheme.name)
    elif spec.scheme.upper() != scheme.name:
        spec = LossSpec(spec.weights, scheme.name, spec.conservation_mode, spec.dissipativity_margin)
    if not spec.weight("residual"):
        raise ConfigError("fully data-driven training needs the residual term")
    lo, hi = _param_box(ds)
    mu_t, u_t, _ = ds.subset("train")
    mu_v, u_v, _ = ds.subset("val")
    obj = _JointObjective(ae, fn, spec, u_t, (mu_t - lo) / (hi - lo), ds.dt, config.windows)
    val = _JointObjective(ae, fn, spec, u_v, (mu_v - lo) / (hi - lo), ds.dt, config.val_windows)
    rows, best = _optimize(obj.nets(), obj, _val_fn(val, len(u_v), config), len(u_t), config, "fully")
    return TrainResult(_model(ds, ae, fn, scheme.name, "fully"), {"fully": rows}, {"fully": best})
