"""Small dense feed-forward networks with hand-written derivatives.

Everything is batched along the leading axis and uses the row-vector
convention ``y = x @ W.T + b`` with ``W`` of shape ``(out, in)``.  All
trainable numbers of a network live in one flat float64 vector; layers hold
slice views into it, so an optimizer can update the vector in place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericError, ShapeError

KINDS = ("linear", "affine")
ACTIVATIONS = ("identity", "prelu", "elu")
PRELU_INIT = 0.25
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        kind = self.kind.lower()
        act = self.activation.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if int(self.in_dim) < 1 or int(self.out_dim) < 1:
            raise ShapeError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "activation", act)
        object.__setattr__(self, "in_dim", int(self.in_dim))
        object.__setattr__(self, "out_dim", int(self.out_dim))

    @property
    def has_bias(self):
        return self.kind == "affine"

    def weight_count(self):
        return self.in_dim * self.out_dim + (self.out_dim if self.has_bias else 0)


def count_params(layers, prelu="shared"):
    """Number of trainable scalars for a layer list.

    ``prelu="shared"`` counts one slope for the whole network (the convention
    that reproduces the published parameter tables); ``"per_layer"`` counts
    one slope per PReLU site.
    """
    if isinstance(layers, Mlp):
        return layers.n_params
    layers = list(layers)
    total = sum(l.weight_count() for l in layers)
    n_prelu = sum(l.activation == "prelu" for l in layers)
    if prelu == "shared":
        return total + (1 if n_prelu else 0)
    if prelu == "per_layer":
        return total + n_prelu
    raise ValueError(f"unknown prelu mode {prelu!r}")


@dataclass
class _Slots:
    w: slice
    b: slice | None
    a: int | None


@dataclass
class Tape:
    """Intermediate values of a forward pass, consumed by :meth:`Mlp.backward`."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    squeeze: bool = False


class Mlp:
    """Feed-forward chain of Linear/Affine layers with optional activations."""

    def __init__(self, layers, params=None, *, prelu="shared", seed=0):
        layers = [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in layers]
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} "
                    f"produces {layers[i - 1].out_dim}"
                )
        if prelu not in ("shared", "per_layer"):
            raise ValueError(f"unknown prelu mode {prelu!r}")
        self.layers = tuple(layers)
        self.prelu = prelu
        self._slots = self._layout()
        self.n_params = count_params(layers, prelu)
        if params is None:
            self.params = self._init_params(seed)
        else:
            params = np.array(params, dtype=np.float64).ravel()
            if params.size != self.n_params:
                raise ShapeError(f"expected {self.n_params} parameters, got {params.size}")
            self.params = params

    def _layout(self):
        slots = []
        pos = 0
        for l in self.layers:
            w = slice(pos, pos + l.in_dim * l.out_dim)
            pos = w.stop
            b = None
            if l.has_bias:
                b = slice(pos, pos + l.out_dim)
                pos = b.stop
            a = None
            if l.activation == "prelu" and self.prelu == "per_layer":
                a = pos
                pos += 1
            slots.append(_Slots(w, b, a))
        if self.prelu == "shared" and any(l.activation == "prelu" for l in self.layers):
            for l, s in zip(self.layers, slots):
                if l.activation == "prelu":
                    s.a = pos
        return slots

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        p = np.zeros(count_params(self.layers, self.prelu))
        for l, s in zip(self.layers, self._slots):
            gain = np.sqrt(2.0 / (1.0 + PRELU_INIT**2)) if l.activation == "prelu" else 1.0
            bound = gain * np.sqrt(3.0 / l.in_dim)
            p[s.w] = rng.uniform(-bound, bound, size=l.in_dim * l.out_dim)
            if s.a is not None:
                p[s.a] = PRELU_INIT
        return p

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def weight(self, i):
        l = self.layers[i]
        return self.params[self._slots[i].w].reshape(l.out_dim, l.in_dim)

    def bias(self, i):
        s = self._slots[i].b
        return None if s is None else self.params[s]

    def slope(self, i):
        a = self._slots[i].a
        return None if a is None else self.params[a]

    def copy(self):
        return Mlp(self.layers, self.params.copy(), prelu=self.prelu)

    def is_linear(self):
        return all(l.kind == "linear" and l.activation == "identity" for l in self.layers)

    def linear_map(self):
        """Matrix ``M`` with ``forward(x) = x @ M.T`` for a purely linear net."""
        if not self.is_linear():
            raise ValueError("network is not purely linear")
        m = self.weight(0)
        for i in range(1, len(self.layers)):
            m = self.weight(i) @ m
        return m

    # evaluation

    def _as_batch(self, x, dim):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != dim:
            raise ShapeError(f"expected input of width {dim}, got shape {np.shape(x)}")
        return x, squeeze

    def _act(self, i, z):
        act = self.layers[i].activation
        if act == "identity":
            return z
        if act == "elu":
            return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
        return np.where(z >= 0, z, self.params[self._slots[i].a] * z)

    def _dact(self, i, z):
        act = self.layers[i].activation
        if act == "elu":
            return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
        return np.where(z >= 0, 1.0, self.params[self._slots[i].a])

    def _affine(self, i, y):
        z = y @ self.weight(i).T
        b = self.bias(i)
        return z if b is None else z + b

    def _raise_nonfinite(self, x):
        y = x
        for i in range(len(self.layers)):
            y = self._act(i, self._affine(i, y))
            if not np.all(np.isfinite(y)):
                raise NumericError(f"non-finite value produced by layer {i}", layer=i)
        raise NumericError("non-finite network input", layer=None)

    def forward(self, x):
        y, squeeze = self._as_batch(x, self.in_dim)
        x0 = y
        for i in range(len(self.layers)):
            y = self._act(i, self._affine(i, y))
        if not np.all(np.isfinite(y)):
            self._raise_nonfinite(x0)
        return y[0] if squeeze else y

    __call__ = forward

    def forward_tape(self, x):
        """Forward pass that also records what :meth:`backward` needs."""
        y, squeeze = self._as_batch(x, self.in_dim)
        x0 = y
        tape = Tape(squeeze=squeeze)
        for i in range(len(self.layers)):
            tape.inputs.append(y)
            z = self._affine(i, y)
            tape.pre.append(z)
            y = self._act(i, z)
        if not np.all(np.isfinite(y)):
            self._raise_nonfinite(x0)
        return (y[0] if squeeze else y), tape

    def backward(self, tape, gy):
        """Reverse pass.

        ``gy`` is d(loss)/d(output) with the output's shape.  Returns the
        gradient w.r.t. the flat parameter vector and w.r.t. the input.
        """
        g = np.asarray(gy, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        grad = np.zeros_like(self.params)
        for i in reversed(range(len(self.layers))):
            l, s, z = self.layers[i], self._slots[i], tape.pre[i]
            if l.activation != "identity":
                if l.activation == "prelu":
                    grad[s.a] += np.sum(g * np.where(z >= 0, 0.0, z))
                g = g * self._dact(i, z)
            grad[s.w] += (g.T @ tape.inputs[i]).ravel()
            if s.b is not None:
                grad[s.b] += g.sum(axis=0)
            g = g @ self.weight(i)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {i}", layer=i)
        return grad, (g[0] if tape.squeeze else g)

    def jvp(self, x, v):
        """Return ``(forward(x), J(x) v)`` by forward-mode differentiation."""
        y, squeeze = self._as_batch(x, self.in_dim)
        dy, _ = self._as_batch(v, self.in_dim)
        dy = np.broadcast_to(dy, y.shape)
        for i in range(len(self.layers)):
            z = self._affine(i, y)
            dz = dy @ self.weight(i).T
            if self.layers[i].activation != "identity":
                dz = dz * self._dact(i, z)
            y, dy = self._act(i, z), dz
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(dy))):
            raise NumericError("non-finite value in Jacobian-vector product")
        if squeeze:
            return y[0], dy[0]
        return y, dy

    def input_jvp(self, x, v):
        """Directional derivative ``J(x) v`` of the network w.r.t. its input.

        At a PReLU kink the right-branch slope (1) is used.
        """
        return self.jvp(x, v)[1]

    def jacobian(self, x):
        """Dense input Jacobian at a single point, shape ``(out, in)``."""
        x = np.asarray(x, dtype=np.float64).ravel()
        eye = np.eye(self.in_dim)
        _, cols = self.jvp(np.broadcast_to(x, eye.shape), eye)
        return cols.T

    def grad_params(self, x, loss_tail):
        """Gradient of ``loss_tail(forward(x))`` w.r.t. the parameters.

        ``loss_tail`` maps the output to ``(loss, dloss/doutput)``.
        """
        y, tape = self.forward_tape(x)
        loss, gy = loss_tail(y)
        grad, _ = self.backward(tape, gy)
        return float(loss), grad

    # serialization

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "prelu": self.prelu,
            "layers": [
                {"kind": l.kind, "in": l.in_dim, "out": l.out_dim, "activation": l.activation}
                for l in self.layers
            ],
            "params": [float(p) for p in self.params],
        }

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise CheckpointError("checkpoint must be a JSON object")
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format_version {doc.get('format_version')!r}")
        raw = doc.get("layers")
        if not isinstance(raw, list) or not raw:
            raise CheckpointError("checkpoint has no layers")
        layers = []
        for i, entry in enumerate(raw):
            try:
                layers.append(
                    LayerSpec(entry["kind"], int(entry["in"]), int(entry["out"]), entry["activation"])
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CheckpointError(f"layer {i}: {exc}") from exc
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise CheckpointError(
                    f"layer {i}: input dim {layers[i].in_dim} does not match "
                    f"previous output dim {layers[i - 1].out_dim}"
                )
        prelu = doc.get("prelu", "shared")
        params = doc.get("params")
        expected = count_params(layers, prelu)
        if not isinstance(params, list) or len(params) != expected:
            raise CheckpointError(f"expected {expected} params, found {len(params or [])}")
        return cls(layers, params, prelu=prelu)


def save_checkpoint(net, path):
    path = Path(path)
    path.write_text(json.dumps(net.to_dict()))
    return path


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    return Mlp.from_dict(doc)


# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3):
        return cls(np.zeros(n), np.zeros(n), lr=lr)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# architecture presets

def stack(rows):
    """Expand ``(repeat, kind, in, out, activation)`` rows into layer specs."""
    out = []
    for repeat, kind, i, o, act in rows:
        out.extend(LayerSpec(kind, i, o, act) for _ in range(repeat))
    return out


def _presets():
    p = {}
    p["test1-linear/encoder"] = stack([(1, "linear", 3, 2, "identity")])
    p["test1-linear/decoder"] = stack([(1, "linear", 2, 3, "identity")])
    p["test1-nonlinear/encoder"] = stack([(1, "linear", 3, 2, "identity")])
    p["test1-nonlinear/decoder"] = stack([
        (1, "linear", 2, 3, "prelu"),
        (1, "affine", 3, 30, "prelu"),
        (8, "affine", 30, 30, "prelu"),
        (1, "affine", 30, 3, "prelu"),
        (1, "affine", 3, 3, "identity"),
    ])
    p["sir/encoder"] = p["test1-nonlinear/encoder"]
    p["sir/decoder"] = p["test1-nonlinear/decoder"]
    # the printed first layer (3x3) does not chain into the 9-wide block
    p["sir/rhs"] = stack([
        (1, "affine", 3, 9, "prelu"),
        (8, "affine", 9, 9, "prelu"),
        (1, "affine", 9, 3, "prelu"),
        (1, "affine", 3, 2, "identity"),
    ])
    # widths use N=19 where the printed tables carry 20
    p["chemistry/encoder"] = stack([
        (1, "affine", 19, 21, "elu"),
        (5, "affine", 21, 21, "elu"),
        (1, "linear", 21, 3, "elu"),
    ])
    p["chemistry/decoder"] = stack([
        (1, "linear", 3, 20, "prelu"),
        (1, "affine", 20, 21, "prelu"),
        (7, "affine", 21, 21, "prelu"),
        (1, "affine", 21, 20, "prelu"),
        (1, "affine", 20, 19, "identity"),
    ])
    p["chemistry/rhs"] = stack([
        (1, "affine", 5, 20, "prelu"),
        (5, "affine", 20, 20, "prelu"),
        (1, "affine", 20, 3, "prelu"),
        (1, "affine", 3, 3, "identity"),
    ])
    return p


ARCHITECTURES = _presets()

# totals printed in the published architecture tables, for delta reports
PUBLISHED_COUNTS = {
    "test1-linear/encoder": 6,
    "test1-linear/decoder": 6,
    "test1-nonlinear/encoder": 6,
    "test1-nonlinear/decoder": 7672,
    "sir/rhs": 785,
    "chemistry/encoder": 2814,
    "chemistry/decoder": 4412,
    "chemistry/rhs": 2289,
}


def architecture(name, *, prelu="shared", seed=0):
    try:
        layers = ARCHITECTURES[name]
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None
    return Mlp(layers, prelu=prelu, seed=seed)


def count_report(prelu="shared"):
    """Computed vs published parameter counts for every preset with a table entry."""
    rows = []
    for name, published in PUBLISHED_COUNTS.items():
        got = count_params(ARCHITECTURES[name], prelu)
        rows.append({"name": name, "computed": got, "published": published, "delta": got - published})
    return rows


def mlp(sizes, activation="elu", *, last="identity", kind="affine", prelu="shared", seed=0):
    """Convenience builder: ``sizes=[in, h1, ..., out]``."""
    layers = []
    for k in range(len(sizes) - 1):
        act = last if k == len(sizes) - 2 else activation
        layers.append(LayerSpec(kind, sizes[k], sizes[k + 1], act))
    return Mlp(layers, prelu=prelu, seed=seed)
