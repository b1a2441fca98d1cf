"""Training objectives with hand-derived parameter gradients.

All terms are means over independent (trajectory, snapshot) entries, so a
batch can be shuffled or split without changing the value.  Snapshots enter
in the autoencoder's normalized coordinates, and the latent variable is the
raw encoder output (no scaling, no shift).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..integrators import get_scheme

TERMS = ("autoencoder", "semi", "residual", "conservation", "orthogonality", "dissipativity")


@dataclass
class LossSpec:
    """Active loss terms and their weights.

    ``conservation_mode`` selects between the componentwise form
    (``"componentwise"``) and the squared total-mass defect (``"total"``).
    """

    weights: dict = field(default_factory=lambda: {"autoencoder": 1.0})
    scheme: str = "FE"
    conservation_mode: str = "componentwise"
    dissipativity_margin: float = 0.0

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("at least one loss term must be active")
        for k, w in self.weights.items():
            if k not in TERMS:
                raise ConfigError(f"unknown loss term {k!r}")
            if not w > 0:
                raise ConfigError(f"weight of {k!r} must be positive")
        if self.conservation_mode not in ("componentwise", "total"):
            raise ConfigError(f"unknown conservation mode {self.conservation_mode!r}")

    def weight(self, name):
        return self.weights.get(name, 0.0)


def _flat(a):
    return a.reshape(-1, a.shape[-1])


# single terms, usable on their own

def autoencoder_pass(ae, xn):
    """Forward through encoder and decoder keeping tapes; ``xn`` normalized, shape (M, N)."""
    z, tz = ae.encoder.forward_tape(xn)
    y, ty = ae.decoder.forward_tape(z)
    return z, tz, y, ty


def loss_autoencoder(ae, u, grad=False):
    """Mean squared reconstruction error ``|x - dec(enc(x))|^2`` over snapshots."""
    xn = _flat(ae.normalize(u))
    z, tz, y, ty = autoencoder_pass(ae, xn)
    d = y - xn
    val = float(np.mean(np.sum(d * d, axis=1)))
    if not grad:
        return val
    g_dec, gz = ae.decoder.backward(ty, 2 * d / len(xn))
    g_enc, _ = ae.encoder.backward(tz, gz)
    return val, g_enc, g_dec


def conservation_defect(d, scale, mode):
    """Value and d(value)/d(d) per snapshot for a normalized residual ``d = y - x``."""
    orig = d * scale
    if mode == "componentwise":
        return np.sum(orig * orig, axis=1), 2 * orig * scale
    s = orig.sum(axis=1)
    return s * s, 2 * s[:, None] * scale


def loss_conservation(ae, u, mode="componentwise", grad=False):
    """Conservation penalty on reconstructed snapshots in physical units.

    The componentwise form is ``sum_k ([u]_k - [dec(enc(u))]_k)^2``; the
    ``"total"`` form squares the defect of the summed components.
    """
    xn = _flat(ae.normalize(u))
    z, tz, y, ty = autoencoder_pass(ae, xn)
    vals, gd = conservation_defect(y - xn, ae.scale, mode)
    val = float(np.mean(vals))
    if not grad:
        return val
    g_dec, gz = ae.decoder.backward(ty, gd / len(xn))
    g_enc, _ = ae.encoder.backward(tz, gz)
    return val, g_enc, g_dec


def semi_targets(ae, u, f):
    """Latent points and the targets ``J_enc(x) F(x)`` (raw encoder frame)."""
    xn = _flat(ae.normalize(u))
    fn = _flat(np.asarray(f) / ae.scale)
    return ae.encoder.jvp(xn, fn)


def loss_semi(ae, fn_net, u, f, mu_hat, grad=False):
    """Mean ``|J_enc F - N(enc(u), mu)|^2`` with the autoencoder frozen."""
    if f is None:
        raise ConfigError("the semi data-driven loss needs stored right-hand-side snapshots")
    z, target = semi_targets(ae, u, f)
    mu_flat = _flat(np.broadcast_to(mu_hat, np.shape(u)[:-1] + (np.shape(mu_hat)[-1],)))
    return semi_from_targets(fn_net, z, target, mu_flat, grad)


def semi_from_targets(fn_net, z, target, mu_flat, grad=False):
    inp = np.concatenate([z, mu_flat], axis=1)
    if not grad:
        d = fn_net.forward(inp) - target
        return float(np.mean(np.sum(d * d, axis=1)))
    out, tape = fn_net.forward_tape(inp)
    d = out - target
    g, _ = fn_net.backward(tape, 2 * d / len(d))
    return float(np.mean(np.sum(d * d, axis=1))), g


def window_ends(K, P):
    """Admissible newest-snapshot indices of residual windows (P+1 consecutive snapshots)."""
    return np.arange(P, K)


def residual_from_latent(fn_net, z, mu_hat, ends, scheme, dt, grad=False):
    """Scheme residual on latent snapshots ``z`` of shape (B, T, n).

    ``ends`` index the newest snapshot of each window along the T axis; the
    window members are ``ends - p`` for ``p = 0..P``.  ``z`` is a constant
    here: only the reduced right-hand-side network receives a gradient.
    """
    scheme = get_scheme(scheme)
    if not scheme.multistep:
        raise ConfigError(f"{scheme.name} is multi-stage and has no residual form")
    alpha, beta = np.asarray(scheme.alpha), np.asarray(scheme.beta)
    B, T, n = z.shape
    ends = np.asarray(ends)
    if ends.size == 0:
        return (0.0, np.zeros_like(fn_net.params)) if grad else 0.0
    if ends.min() < scheme.P:
        raise ValueError("window reaches before the first snapshot")
    need = np.unique(np.concatenate([ends - p for p in range(1, scheme.P + 1) if beta[p]]))
    pos = np.full(T, -1)
    pos[need] = np.arange(need.size)
    mu_b = np.broadcast_to(np.asarray(mu_hat)[:, None, :], (B, need.size, np.shape(mu_hat)[-1]))
    inp = np.concatenate([z[:, need], mu_b], axis=2).reshape(-1, n + mu_b.shape[-1])
    if grad:
        g_out, tape = fn_net.forward_tape(inp)
    else:
        g_out = fn_net.forward(inp)
    g_out = g_out.reshape(B, need.size, n)
    r = np.zeros((B, ends.size, n))
    for p in range(scheme.P + 1):
        if alpha[p]:
            r += alpha[p] * z[:, ends - p]
        if beta[p]:
            r -= dt * beta[p] * g_out[:, pos[ends - p]]
    count = B * ends.size
    val = float(np.sum(r * r) / count)
    if not grad:
        return val
    gr = 2 * r / count
    g_g = np.zeros_like(g_out)
    for p in range(1, scheme.P + 1):
        if beta[p]:
            np.add.at(g_g, (slice(None), pos[ends - p]), -dt * beta[p] * gr)
    g, _ = fn_net.backward(tape, g_g.reshape(-1, n))
    return val, g


def loss_residual(ae, fn_net, u, mu_hat, scheme, dt, ends=None, grad=False):
    """Residual of the time scheme on encoded trajectories ``u`` of shape (B, K, N).

    Encoder outputs are treated as constants, so with ``grad=True`` only the
    gradient for ``fn_net`` is returned.
    """
    u = np.asarray(u)
    B, K, N = u.shape
    scheme = get_scheme(scheme)
    z = _flat_apply(ae.encoder, ae.normalize(u))
    if ends is None:
        ends = window_ends(K, scheme.P)
    return residual_from_latent(fn_net, z, mu_hat, ends, scheme, dt, grad)


def _flat_apply(net, x):
    return net.forward(_flat(x)).reshape(x.shape[:-1] + (net.out_dim,))


def orthogonality_matrices(ae):
    if not (ae.encoder.is_linear() and ae.decoder.is_linear()):
        raise ConfigError("the orthogonality penalty needs a linear encoder and decoder")
    return ae.encoder.linear_map(), ae.decoder.linear_map()


def orthogonality_value(E, D):
    """``|(E^T E) D - E^T|_F^2`` for encoder Jacobian ``E`` (n x N) and decoder ``D`` (N x n)."""
    r = E.T @ E @ D - E.T
    return float(np.sum(r * r))


def _linear_chain_grads(net, g_map):
    """Distribute d(loss)/d(M) over the factors of ``M = W_L ... W_1``."""
    g = np.zeros_like(net.params)
    mats = [net.weight(i) for i in range(len(net.layers))]
    for i, s in enumerate(net._slots):
        left = np.eye(mats[-1].shape[0])
        for w in reversed(mats[i + 1:]):
            left = left @ w
        right = np.eye(mats[0].shape[1])
        for w in mats[:i]:
            right = w @ right
        g[s.w] = (left.T @ g_map @ right.T).ravel()
    return g


def loss_orthogonality(ae, grad=False):
    E, D = orthogonality_matrices(ae)
    A = E.T @ E
    r = A @ D - E.T
    val = float(np.sum(r * r))
    if not grad:
        return val
    g_D = 2 * A @ r
    g_A = 2 * r @ D.T
    g_E = E @ (g_A + g_A.T) - 2 * r.T
    return val, _linear_chain_grads(ae.encoder, g_E), _linear_chain_grads(ae.decoder, g_D)


def dissipativity_from_outputs(a, b, fa, fb, margin=0.0):
    """Hinge on one-sided quotients ``<f(a)-f(b), a-b> / |a-b|^2`` of sampled pairs."""
    diff = a - b
    nrm2 = np.sum(diff * diff, axis=1)
    keep = nrm2 > 0
    q = np.where(keep, np.sum((fa - fb) * diff, axis=1) / np.where(keep, nrm2, 1.0), -np.inf)
    active = q - margin > 0
    m = max(int(keep.sum()), 1)
    val = float(np.sum(np.where(active, q - margin, 0.0)) / m)
    coef = np.where(active, 1.0, 0.0)[:, None] * diff / np.where(keep, nrm2, 1.0)[:, None] / m
    return val, coef, -coef


def loss_dissipativity(fn_net, z, mu_hat, margin=0.0, grad=False):
    """Penalty on consecutive latent pairs of each trajectory in ``z`` (B, T, n)."""
    B, T, n = z.shape
    mu_b = np.broadcast_to(np.asarray(mu_hat)[:, None, :], (B, T, np.shape(mu_hat)[-1]))
    inp = np.concatenate([z, mu_b], axis=2).reshape(-1, n + mu_b.shape[-1])
    out, tape = fn_net.forward_tape(inp)
    out = out.reshape(B, T, n)
    a, b = z[:, 1:].reshape(-1, n), z[:, :-1].reshape(-1, n)
    val, ga, gb = dissipativity_from_outputs(a, b, out[:, 1:].reshape(-1, n), out[:, :-1].reshape(-1, n), margin)
    if not grad:
        return val
    g_out = np.zeros((B, T, n))
    g_out[:, 1:] += ga.reshape(B, T - 1, n)
    g_out[:, :-1] += gb.reshape(B, T - 1, n)
    g, _ = fn_net.backward(tape, g_out.reshape(-1, n))
    return val, g
