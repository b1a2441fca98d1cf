"""Encoder/decoder pairs, the reduced right-hand side and reconstruction.

The latent coordinate seen by integrators is

    z = K_s * enc((u - mean) / scale) - shift

and the decoder inverts that reparameterization before evaluating the
decoder network.  ``shift`` is usually the encoded initial condition, so
every reduced trajectory starts from the origin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .integrators import FixedGrid, get_scheme, integrate_fixed
from .nn import Mlp, load_checkpoint, save_checkpoint

BUNDLE_VERSION = 1


def _apply(net, x):
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    y = net.forward(x.reshape(-1, x.shape[-1]))
    return y.reshape(lead + (net.out_dim,))


def _apply_jvp(net, x, v):
    x = np.asarray(x, dtype=np.float64)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
    lead = x.shape[:-1]
    y, dy = net.jvp(x.reshape(-1, x.shape[-1]), v.reshape(-1, v.shape[-1]))
    return y.reshape(lead + (net.out_dim,)), dy.reshape(lead + (net.out_dim,))


@dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    ks: float = 1.0
    shift: np.ndarray | None = None

    def __post_init__(self):
        N, n = self.encoder.in_dim, self.encoder.out_dim
        if self.decoder.in_dim != n or self.decoder.out_dim != N:
            raise ShapeError(
                f"encoder maps {N}->{n} but decoder maps {self.decoder.in_dim}->{self.decoder.out_dim}"
            )
        if n >= N:
            raise ShapeError(f"latent size {n} must be smaller than {N}")
        if not self.ks > 0:
            raise ValueError("scaling factor must be positive")
        self.mean = np.zeros(N) if self.mean is None else np.asarray(self.mean, dtype=float)
        self.scale = np.ones(N) if self.scale is None else np.asarray(self.scale, dtype=float)

    @property
    def N(self):
        return self.encoder.in_dim

    @property
    def n(self):
        return self.encoder.out_dim

    def normalize(self, u):
        return (np.asarray(u, dtype=float) - self.mean) / self.scale

    def denormalize(self, x):
        return np.asarray(x) * self.scale + self.mean

    def _shift(self):
        return 0.0 if self.shift is None else self.shift

    def encode(self, u):
        return self.ks * _apply(self.encoder, self.normalize(u)) - self._shift()

    def decode(self, z):
        raw = (np.asarray(z, dtype=float) + self._shift()) / self.ks
        return self.denormalize(_apply(self.decoder, raw))

    def unscaled_latent(self, z):
        """Raw encoder-output coordinates of a (scaled, shifted) latent point."""
        return (np.asarray(z, dtype=float) + self._shift()) / self.ks

    def encode_jvp(self, u, du):
        """``J_enc(u) du`` including normalization and scaling."""
        _, d = _apply_jvp(self.encoder, self.normalize(u), np.asarray(du) / self.scale)
        return self.ks * d

    def roundtrip(self, u):
        return self.decode(self.encode(u))

    def rescaled(self, ks):
        """Equivalent autoencoder with latent scale ``ks`` (the shift rescales too)."""
        shift = None if self.shift is None else self.shift * (ks / self.ks)
        return replace(self, ks=float(ks), shift=shift)

    def with_shift(self, shift):
        return replace(self, shift=None if shift is None else np.asarray(shift, dtype=float))


def encode(ae, u):
    return ae.encode(u)


def decode(ae, z):
    return ae.decode(z)


def shift_to_zero_initial(ae, u0):
    """Autoencoder whose latent frame puts ``encode(u0)`` at the origin.

    ``u0`` may be a batch of initial conditions; the shift then carries the
    same leading axes and applies row by row.
    """
    base = ae.with_shift(None)
    return ae.with_shift(base.encode(u0))


def exact_reduced_rhs(ae, rhs_N, z):
    """``F_n(z) = J_enc(decode(z)) rhs_N(decode(z))`` via a forward-mode product."""
    x = ae.decode(z)
    return ae.encode_jvp(x, rhs_N(x))


def reconstruct_trajectory(ae, z_traj):
    z_traj = np.asarray(z_traj, dtype=float)
    if z_traj.shape[0] == 0:
        return np.zeros((0,) + z_traj.shape[1:-1] + (ae.N,))
    return ae.decode(z_traj)


@dataclass
class ReducedModel:
    """Autoencoder plus a reduced right-hand side.

    With ``rhs_net`` unset the reduced dynamics are the exact ones obtained
    from the full right-hand side ``problem.rhs``; otherwise the network takes
    ``[raw latent, scaled mu]`` and its output is scaled by ``K_s``.
    """

    ae: Autoencoder
    rhs_net: Mlp | None = None
    mu_lo: np.ndarray | None = None
    mu_hi: np.ndarray | None = None
    problem: str = ""
    dt_train: float | None = None
    scheme: str | None = None
    shift_mode: str = "initial"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rhs_net is not None:
            p = 0 if self.mu_lo is None else np.size(self.mu_lo)
            if self.rhs_net.in_dim != self.ae.n + p or self.rhs_net.out_dim != self.ae.n:
                raise ShapeError(
                    f"reduced rhs network must map {self.ae.n + p}->{self.ae.n}, "
                    f"got {self.rhs_net.in_dim}->{self.rhs_net.out_dim}"
                )
        if self.shift_mode not in ("initial", "none"):
            raise ValueError(f"unknown shift mode {self.shift_mode!r}")

    @property
    def learned(self):
        return self.rhs_net is not None

    def scale_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.mu_lo is None:
            return mu[..., :0]
        return (mu - self.mu_lo) / (self.mu_hi - self.mu_lo)

    def learned_rhs(self, ae, z, mu):
        raw = ae.unscaled_latent(z)
        mu_hat = np.broadcast_to(self.scale_mu(mu), raw.shape[:-1] + (np.size(self.mu_lo),))
        return ae.ks * _apply(self.rhs_net, np.concatenate([raw, mu_hat], axis=-1))

    def latent_rhs(self, mu, ae=None, full_rhs=None):
        """Autonomous reduced right-hand side for parameters ``mu``."""
        ae = self.ae if ae is None else ae
        if self.learned:
            return lambda z: self.learned_rhs(ae, z, mu)
        if full_rhs is None:
            raise ConfigError("exact reduced dynamics need the full right-hand side")
        return lambda z: exact_reduced_rhs(ae, full_rhs, z)

    def frame(self, u0):
        """Autoencoder in the latent frame used to integrate from ``u0``."""
        if self.shift_mode == "initial":
            return shift_to_zero_initial(self.ae, u0)
        return self.ae.with_shift(None)

    def solve(self, problem, mu, grid, scheme="FE", *, ae=None, threshold=None):
        """Integrate the reduced system from ``encode(u0(mu))`` and reconstruct.

        Returns ``(z, u)`` with shapes ``(K+1, ..., n)`` and ``(K+1, ..., N)``.
        """
        mu = np.asarray(mu, dtype=float)
        u0 = problem.init(mu)
        ae = self.frame(u0) if ae is None else ae
        rhs = self.latent_rhs(mu, ae, problem.rhs_at(mu))
        kwargs = {} if threshold is None else {"threshold": threshold}
        z = integrate_fixed(rhs, ae.encode(u0), grid, get_scheme(scheme), **kwargs)
        return z, reconstruct_trajectory(ae, z)


# bundles

def save_bundle(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.ae.encoder, directory / "encoder.json")
    save_checkpoint(model.ae.decoder, directory / "decoder.json")
    manifest = {
        "format_version": BUNDLE_VERSION,
        "encoder": "encoder.json",
        "decoder": "decoder.json",
        "rhs": None,
        "n": model.ae.n,
        "N": model.ae.N,
        "K_s": model.ae.ks,
        "shift_mode": model.shift_mode,
        "problem": model.problem,
        "dt_train": model.dt_train,
        "scheme": model.scheme,
        "normalization": {"mean": model.ae.mean.tolist(), "scale": model.ae.scale.tolist()},
        "mu_box": None if model.mu_lo is None else [np.asarray(model.mu_lo).tolist(), np.asarray(model.mu_hi).tolist()],
        "meta": model.meta,
    }
    if model.rhs_net is not None:
        save_checkpoint(model.rhs_net, directory / "rhs.json")
        manifest["rhs"] = "rhs.json"
    (directory / "bundle.json").write_text(json.dumps(manifest, indent=2))
    return directory / "bundle.json"


def load_bundle(path):
    path = Path(path)
    manifest_path = path / "bundle.json" if path.is_dir() else path
    base = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read bundle {manifest_path}: {exc}") from exc
    if doc.get("format_version") != BUNDLE_VERSION:
        raise CheckpointError(f"unsupported bundle version {doc.get('format_version')!r}")
    norm = doc.get("normalization") or {}
    ae = Autoencoder(
        load_checkpoint(base / doc["encoder"]),
        load_checkpoint(base / doc["decoder"]),
        mean=norm.get("mean"),
        scale=norm.get("scale"),
        ks=doc.get("K_s", 1.0),
    )
    if ae.n != doc.get("n") or ae.N != doc.get("N"):
        raise CheckpointError("bundle n/N do not match the stored networks")
    rhs = load_checkpoint(base / doc["rhs"]) if doc.get("rhs") else None
    box = doc.get("mu_box")
    return ReducedModel(
        ae, rhs,
        mu_lo=None if box is None else np.array(box[0]),
        mu_hi=None if box is None else np.array(box[1]),
        problem=doc.get("problem", ""),
        dt_train=doc.get("dt_train"),
        scheme=doc.get("scheme"),
        shift_mode=doc.get("shift_mode", "initial"),
        meta=doc.get("meta", {}),
    )


def reduced_grid(dt, T):
    return FixedGrid.spanning(dt, T)
