"""Networks used by the priors and surrogates, plus Adam and checkpoint I/O.

Models are frozen dataclasses describing *structure*; parameters live in
plain pytrees (lists of ``(W, b)`` tuples, dicts of those) so everything can
be passed through ``jax.jit``/``jax.grad`` directly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Any

import jax
import jax.numpy as jnp
import numpy as np

__all__ = [
    "ACTIVATIONS",
    "Mlp",
    "GenI",
    "GenII",
    "LatentScalar",
    "DeepONet",
    "AdamState",
    "NonFiniteGradient",
    "adam_init",
    "adam_update",
    "adam_step",
    "train_deeponet",
    "generator_d2x",
    "cast_params",
    "save_checkpoint",
    "load_checkpoint",
]

LEAKY_SLOPE = 0.2


def _leaky_relu(z):
    return jnp.where(z > 0, z, LEAKY_SLOPE * z)


ACTIVATIONS = {
    "tanh": jnp.tanh,
    "sin": jnp.sin,
    "leaky_relu": _leaky_relu,
    "identity": lambda z: z,
}


def cast_params(params, dtype):
    return jax.tree_util.tree_map(lambda p: jnp.asarray(p, dtype=dtype), params)


@dataclass(frozen=True)
class Mlp:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``."""

    widths: tuple[int, ...]
    activation: str = "tanh"
    out_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        for a in (self.activation, self.out_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def init(self, key, dtype=jnp.float64):
        """Glorot-uniform weights, zero biases."""
        params = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            key, sub = jax.random.split(key)
            lim = np.sqrt(6.0 / (a + b))
            W = jax.random.uniform(sub, (a, b), dtype=dtype, minval=-lim, maxval=lim)
            params.append((W, jnp.zeros((b,), dtype=dtype)))
        return params

    def __call__(self, params, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Mlp expects {self.n_in} inputs, got trailing dim {x.shape[-1]}")
        act = ACTIVATIONS[self.activation]
        for W, b in params[:-1]:
            x = act(x @ W + b)
        W, b = params[-1]
        return ACTIVATIONS[self.out_activation](x @ W + b)

    def to_config(self) -> dict:
        return {"type": "Mlp", "widths": list(self.widths), "activation": self.activation,
                "out_activation": self.out_activation}


def _hidden(width: int, depth: int) -> tuple[int, ...]:
    return (width,) * depth


@dataclass(frozen=True)
class GenI:
    """``G(x; xi) = g(x) . (xi + h*(xi))`` -- basis net times residual latent net.

    With ``basis_scale=c`` the basis net's first layer is initialized with
    weights ``U(-c/r, c/r)`` and biases ``U(-c, c) - W . centre`` for the
    coordinate box ``[lo, hi]`` (half-widths ``r``), so the initial features
    already oscillate across the domain.  ``None`` keeps Glorot throughout.
    """

    basis: Mlp
    residual: Mlp
    basis_scale: float | None = None
    lo: tuple | None = None
    hi: tuple | None = None

    @classmethod
    def build(cls, coord_dim: int, latent_dim: int, width=64, depth=2,
              basis_activation="tanh", residual_activation="tanh", basis_scale=None, lo=None, hi=None):
        lo = (-1.0,) * coord_dim if lo is None else tuple(float(v) for v in lo)
        hi = (1.0,) * coord_dim if hi is None else tuple(float(v) for v in hi)
        return cls(
            Mlp((coord_dim, *_hidden(width, depth), latent_dim), basis_activation),
            Mlp((latent_dim, *_hidden(width, depth), latent_dim), residual_activation),
            basis_scale, lo, hi,
        )

    def __post_init__(self):
        if self.basis.n_out != self.residual.n_in or self.residual.n_out != self.residual.n_in:
            raise ValueError("GenI needs basis output dim == latent dim == residual output dim")

    @property
    def latent_dim(self) -> int:
        return self.residual.n_in

    @property
    def coord_dim(self) -> int:
        return self.basis.n_in

    def init(self, key, dtype=jnp.float64):
        k1, k2 = jax.random.split(key)
        basis = self.basis.init(k1, dtype)
        if self.basis_scale is not None:
            c = float(self.basis_scale)
            lo = np.asarray(self.lo if self.lo is not None else (-1.0,) * self.coord_dim)
            hi = np.asarray(self.hi if self.hi is not None else (1.0,) * self.coord_dim)
            centre, half = (hi + lo) / 2, (hi - lo) / 2
            kw, kb = jax.random.split(jax.random.fold_in(k1, 1))
            W0, b0 = basis[0]
            W = jax.random.uniform(kw, W0.shape, dtype, -c, c) / jnp.asarray(half, dtype)[:, None]
            b = jax.random.uniform(kb, b0.shape, dtype, -c, c) - jnp.asarray(centre, dtype) @ W
            basis = [(W, b)] + list(basis[1:])
        return {"basis": basis, "residual": self.residual.init(k2, dtype)}

    def latent_features(self, params, xi):
        return xi + self.residual(params["residual"], xi)

    def basis_values(self, params, x):
        return self.basis(params["basis"], x)

    def __call__(self, params, x, xi):
        """Values for every (latent, coordinate) pair: ``(batch, n_points)``."""
        if xi.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension {xi.shape[-1]} != {self.latent_dim}")
        return self.latent_features(params, xi) @ self.basis_values(params, x).T

    def to_config(self) -> dict:
        return {"type": "GenI", "basis": self.basis.to_config(), "residual": self.residual.to_config(),
                "basis_scale": self.basis_scale, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class GenII:
    """A single Mlp on the concatenation ``(x, xi)``."""

    net: Mlp
    coord_dim: int = 1

    @classmethod
    def build(cls, coord_dim: int, latent_dim: int, width=64, depth=2, activation="tanh"):
        return cls(Mlp((coord_dim + latent_dim, *_hidden(width, depth), 1), activation), coord_dim)

    @property
    def latent_dim(self) -> int:
        return self.net.n_in - self.coord_dim

    def init(self, key, dtype=jnp.float64):
        return {"net": self.net.init(key, dtype)}

    def __call__(self, params, x, xi):
        if xi.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension {xi.shape[-1]} != {self.latent_dim}")
        b, n = xi.shape[0], x.shape[0]
        pairs = jnp.concatenate(
            [jnp.broadcast_to(x[None], (b, n, x.shape[1])),
             jnp.broadcast_to(xi[:, None, :], (b, n, xi.shape[1]))], axis=-1)
        return self.net(params["net"], pairs)[..., 0]

    def to_config(self) -> dict:
        return {"type": "GenII", "net": self.net.to_config(), "coord_dim": self.coord_dim}


@dataclass(frozen=True)
class LatentScalar:
    """Scalar generator ``xi -> lo + (hi - lo) * sigmoid(net(xi))``.

    With ``lo=1, hi=2`` this is the fractional-order map ``1 + 1/(1+exp(-a))``.
    """

    net: Mlp
    lo: float = 1.0
    hi: float = 2.0

    @classmethod
    def build(cls, latent_dim: int, width=64, depth=2, lo=1.0, hi=2.0):
        return cls(Mlp((latent_dim, *_hidden(width, depth), 1), "tanh"), lo, hi)

    @property
    def latent_dim(self) -> int:
        return self.net.n_in

    def init(self, key, dtype=jnp.float64):
        return {"net": self.net.init(key, dtype)}

    def __call__(self, params, xi):
        a = self.net(params["net"], xi)[..., 0]
        return self.lo + (self.hi - self.lo) * jax.nn.sigmoid(a)

    def to_config(self) -> dict:
        return {"type": "LatentScalar", "net": self.net.to_config(), "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class DeepONet:
    """Branch/trunk operator surrogate; prediction is ``sum_j b_j t_j``.

    Trunk coordinates are mapped affinely from ``[lo, hi]`` to ``[-1, 1]``.
    """

    branch: Mlp
    trunk: Mlp
    lo: tuple[float, ...] = (-1.0,)
    hi: tuple[float, ...] = (1.0,)

    @classmethod
    def build(cls, n_sensors: int, coord_dim: int, p: int, branch=(64, 2), trunk=(64, 3),
              lo=None, hi=None, n_scalars: int = 0):
        lo = (-1.0,) * coord_dim if lo is None else tuple(float(v) for v in lo)
        hi = (1.0,) * coord_dim if hi is None else tuple(float(v) for v in hi)
        return cls(
            Mlp((n_sensors + n_scalars, *_hidden(*branch), p), "tanh"),
            Mlp((coord_dim, *_hidden(*trunk), p), "tanh", out_activation="tanh"),
            lo, hi,
        )

    def __post_init__(self):
        if self.branch.n_out != self.trunk.n_out:
            raise ValueError("branch and trunk must have the same output width p")

    @property
    def n_inputs(self) -> int:
        return self.branch.n_in

    def init(self, key, dtype=jnp.float64):
        k1, k2 = jax.random.split(key)
        return {"branch": self.branch.init(k1, dtype), "trunk": self.trunk.init(k2, dtype)}

    def normalize(self, x):
        lo = jnp.asarray(self.lo, dtype=x.dtype)
        hi = jnp.asarray(self.hi, dtype=x.dtype)
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    def branch_out(self, params, f):
        return self.branch(params["branch"], f)

    def trunk_out(self, params, x):
        return self.trunk(params["trunk"], self.normalize(x))

    def __call__(self, params, f, x):
        """``f``: ``(batch, n_inputs)``, ``x``: ``(n_points, dim)`` -> ``(batch, n_points)``."""
        if f.shape[-1] != self.n_inputs:
            raise ValueError(f"branch expects {self.n_inputs} inputs, got {f.shape[-1]}")
        return self.branch_out(params, f) @ self.trunk_out(params, x).T

    def to_config(self) -> dict:
        return {"type": "DeepONet", "branch": self.branch.to_config(), "trunk": self.trunk.to_config(),
                "lo": list(self.lo), "hi": list(self.hi)}


def generator_d2x(gen, params, x, xi, method: str = "exact", h: float = 1e-3, bounds=(-1.0, 1.0)):
    """Second derivative in the (first) spatial coordinate, shape ``(batch, n)``.

    ``method="fd"`` uses the three-point stencil with step ``h`` (a one-sided
    four-point stencil at points within ``h`` of ``bounds``); ``"exact"``
    nests forward-mode AD.
    """
    if method == "fd":
        lo, hi = bounds
        xc = x[:, 0]
        # inside: central three-point; within h of a bound: second-order one-sided four-point
        side = jnp.where(xc - h < lo - 1e-12, 1.0, jnp.where(xc + h > hi + 1e-12, -1.0, 0.0))
        step = jnp.where(side == 0.0, 1.0, side) * h

        def at(k):
            return gen(params, x.at[:, 0].add(k * step), xi)

        g0 = gen(params, x, xi)
        central = (at(1) - 2.0 * g0 + at(-1)) / h**2
        onesided = (2.0 * g0 - 5.0 * at(1) + 4.0 * at(2) - at(3)) / h**2
        return jnp.where(side[None, :] == 0.0, central, onesided)
    if method != "exact":
        raise ValueError(f"unknown derivative method {method!r}")
    if isinstance(gen, GenI):
        def basis_point(p):
            return gen.basis_values(params, p[None])[0]

        d2 = jax.vmap(jax.jacfwd(jax.jacfwd(basis_point)))(x)[:, :, 0, 0]  # (n, d)
        return gen.latent_features(params, xi) @ d2.T

    def scalar(p, z):
        return gen(params, p[None], z[None])[0, 0]

    d2 = jax.vmap(lambda z: jax.vmap(lambda p: jax.hessian(scalar)(p, z)[0, 0])(x))(xi)
    return d2


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: Any
    v: Any
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class NonFiniteGradient(FloatingPointError):
    pass


jax.tree_util.register_pytree_node(
    AdamState,
    lambda s: ((s.m, s.v, s.t), (s.lr, s.beta1, s.beta2, s.eps)),
    lambda aux, ch: AdamState(ch[0], ch[1], ch[2], *aux),
)


def adam_init(params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, jax.tree_util.tree_map(jnp.zeros_like, params), 0, lr, beta1, beta2, eps)


def adam_update(state: AdamState, params, grads):
    """Bias-corrected Adam step; pure, jit-friendly.  Returns ``(params, state)``."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    c1 = 1 - b1**t
    c2 = 1 - b2**t

    def upd(p, m, v):
        step = state.lr * (m / c1) / (jnp.sqrt(v / c2) + state.eps)
        return p - step.astype(p.dtype)

    params = jax.tree_util.tree_map(upd, params, m, v)
    return params, AdamState(m, v, t, state.lr, b1, b2, state.eps)


def adam_step(state: AdamState, params, grads):
    """Checked Adam step: raises :class:`NonFiniteGradient` instead of updating."""
    leaves = jax.tree_util.tree_leaves(grads)
    if not all(bool(jnp.all(jnp.isfinite(g))) for g in leaves):
        raise NonFiniteGradient("non-finite gradient; Adam step rejected")
    return adam_update(state, params, grads)


# --- DeepONet training ------------------------------------------------------


def train_deeponet(model: DeepONet, params, inputs, coords, targets, steps: int, lr=1e-3,
                   batch_size=64, seed=0, log_every=100, beta1=0.9, beta2=0.999,
                   dtype=jnp.float32):
    """Fit ``model`` by MSE on ``targets[i, j] ~ model(inputs[i], coords[j])``.

    Returns ``(params, history)`` where history is a list of
    ``(step, mean training MSE over the logging window)``.  Raises
    ``FloatingPointError`` if the loss diverges (MSE > 1e3 or non-finite).
    """
    inputs = jnp.asarray(inputs, dtype)
    coords = jnp.asarray(coords, dtype)
    targets = jnp.asarray(targets, dtype)
    if inputs.shape[0] == 0:
        raise ValueError("empty dataset")
    if targets.shape != (inputs.shape[0], coords.shape[0]):
        raise ValueError("targets must be (n_samples, n_points)")
    n = inputs.shape[0]
    bs = min(batch_size, n)
    params = cast_params(params, dtype)
    opt = adam_init(params, lr, beta1, beta2)

    def loss_fn(p, f, u):
        return jnp.mean((model(p, f, coords) - u) ** 2)

    def one(carry, key):
        p, s = carry
        idx = jax.random.choice(key, n, (bs,), replace=False) if bs < n else jnp.arange(n)
        loss, g = jax.value_and_grad(loss_fn)(p, inputs[idx], targets[idx])
        p, s = adam_update(s, p, g)
        return (p, s), loss

    @jax.jit
    def chunk(p, s, key):
        (p, s), losses = jax.lax.scan(one, (p, s), jax.random.split(key, log_every))
        return p, s, jnp.mean(losses)

    key = jax.random.PRNGKey(seed)
    history = []
    done = 0
    while done < steps:
        key, sub = jax.random.split(key)
        params, opt, mse = chunk(params, opt, sub)
        done += log_every
        mse = float(mse)
        history.append((done, mse))
        if not np.isfinite(mse) or mse > 1e3:
            raise FloatingPointError(f"DeepONet training diverged at step {done}: MSE={mse}")
    return params, history


# --- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"FPCKPT01"
_CKPT_VERSION = 1


def _model_from_config(cfg: dict):
    kind = cfg["type"]
    if kind == "Mlp":
        return Mlp(tuple(cfg["widths"]), cfg["activation"], cfg["out_activation"])
    if kind == "GenI":
        box = [tuple(cfg[k]) if cfg.get(k) is not None else None for k in ("lo", "hi")]
        return GenI(_model_from_config(cfg["basis"]), _model_from_config(cfg["residual"]), cfg.get("basis_scale"), *box)
    if kind == "GenII":
        return GenII(_model_from_config(cfg["net"]), cfg["coord_dim"])
    if kind == "LatentScalar":
        return LatentScalar(_model_from_config(cfg["net"]), cfg["lo"], cfg["hi"])
    if kind == "DeepONet":
        return DeepONet(_model_from_config(cfg["branch"]), _model_from_config(cfg["trunk"]),
                        tuple(cfg["lo"]), tuple(cfg["hi"]))
    raise ValueError(f"unknown model type {kind!r}")


def save_checkpoint(path, model, params, extra: dict | None = None) -> None:
    """Write magic, version, JSON header (variant, widths, activations), float64 LE params."""
    leaves, treedef = jax.tree_util.tree_flatten(params)
    header = {
        "variant": type(model).__name__,
        "model": model.to_config(),
        "shapes": [list(np.shape(l)) for l in leaves],
        "extra": extra or {},
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(hb)))
        fh.write(hb)
        for leaf in leaves:
            fh.write(np.ascontiguousarray(np.asarray(leaf), dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, params, extra)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    model = _model_from_config(header["model"])
    template = model.init(jax.random.PRNGKey(0))
    treedef = jax.tree_util.tree_structure(template)
    flat = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    leaves, pos = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        leaves.append(jnp.asarray(flat[pos:pos + size].reshape(shape), dtype=jnp.float64))
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: parameter payload size mismatch")
    return model, jax.tree_util.tree_unflatten(treedef, leaves), header.get("extra", {})
