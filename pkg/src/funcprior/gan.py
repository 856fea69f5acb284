"""Functional priors trained as Wasserstein GANs with gradient penalty.

A prior model bundles one or more latent generators that share the same
latent draw, the way physics enters (none, PINN residuals, or a frozen
operator surrogate) and the snapshot layout.  ``fake_snapshot`` produces rows
with exactly the layout of the real :class:`~funcprior.stochastic.SnapshotSet`.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import autodiff as ad
from .nets import (GenI, LatentScalar, Mlp, adam_init, adam_update, cast_params,
                   generator_d2x, save_checkpoint)
from .physics import PdeProblem
from .stochastic import Block, Kernel, SnapshotSet

__all__ = [
    "Discriminator",
    "PriorModel",
    "DataPrior",
    "PinnPrior",
    "OperatorPrior",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "fake_snapshot",
    "discriminator_loss",
    "generator_loss",
    "gradient_penalty",
    "penalty_graph",
    "train_prior",
    "covariance_mse",
    "write_loss_history",
]

_NORM_EPS = 1e-12  # keeps d||g||/dg finite when g = 0


@dataclass(frozen=True)
class Discriminator:
    net: Mlp

    @classmethod
    def build(cls, n_columns: int, width: int = 128, depth: int = 3):
        return cls(Mlp((n_columns, *(width,) * depth, 1), "leaky_relu"))

    @property
    def n_columns(self) -> int:
        return self.net.n_in

    def init(self, key, dtype=jnp.float64):
        return self.net.init(key, dtype)

    def __call__(self, params, rows):
        return self.net(params, rows)[..., 0]


# --- prior models -----------------------------------------------------------


class PriorModel:
    """Base class: generators sharing one latent input plus a snapshot layout.

    Subclasses define ``components`` (name -> generator), ``variables`` and
    ``evaluate(params, xi, var, coords) -> (batch, n)``.
    """

    mode = "none"
    components: dict
    blocks: list

    @property
    def latent_dim(self) -> int:
        dims = {g.latent_dim for g in self.components.values()}
        if len(dims) != 1:
            raise ValueError(f"generators disagree on latent dimension: {dims}")
        return dims.pop()

    @property
    def n_columns(self) -> int:
        return sum(b.size for b in self.blocks)

    def init(self, key, dtype=jnp.float64):
        keys = jax.random.split(key, len(self.components))
        return {name: g.init(k, dtype) for (name, g), k in zip(sorted(self.components.items()), keys)}

    def evaluate(self, params, xi, var, coords):
        raise NotImplementedError

    def check_layout(self, real: SnapshotSet):
        ok = len(real.blocks) == len(self.blocks) and all(
            a.name == b.name and a.coords.shape == b.coords.shape and np.allclose(a.coords, b.coords)
            for a, b in zip(real.blocks, self.blocks)
        )
        if not ok:
            raise ValueError(
                f"layout mismatch: real {[(b.name, b.size) for b in real.blocks]} "
                f"vs model {[(b.name, b.size) for b in self.blocks]}"
            )

    def with_blocks(self, blocks):
        return replace(self, blocks=list(blocks))

    def sample(self, params, var, coords, n, seed=0):
        """Prior draws of one variable, float64 numpy ``(n, len(coords))``."""
        xi = jax.random.normal(jax.random.PRNGKey(seed), (n, self.latent_dim), jnp.float64)
        params = cast_params(params, jnp.float64)
        coords = np.asarray(coords, dtype=np.float64)
        coords = coords[:, None] if coords.ndim == 1 else coords
        return np.asarray(self.evaluate(params, xi, var, jnp.asarray(coords)))


@dataclass
class DataPrior(PriorModel):
    """Purely data-driven prior for a single field ``u``."""

    gen: object
    blocks: list
    var: str = "u"
    mode = "none"

    @property
    def components(self):
        return {self.var: self.gen}

    @property
    def variables(self):
        return (self.var,)

    def evaluate(self, params, xi, var, coords):
        if var != self.var:
            raise KeyError(f"unknown variable {var!r}; this prior models {self.var!r}")
        return self.gen(params[self.var], coords, xi)


@dataclass
class PinnPrior(PriorModel):
    """``u`` (and optionally the reaction rate ``k``) from generators; ``f`` via the PDE.

    ``f = D u'' - k u^3`` and ``b`` is ``u`` at boundary sensors.
    """

    u_gen: object
    problem: PdeProblem
    blocks: list
    k_gen: object = None
    d2_method: str = "exact"
    h: float = 1e-3
    mode = "pinn"

    @property
    def components(self):
        out = {"u": self.u_gen}
        if self.k_gen is not None:
            out["k"] = self.k_gen
        return out

    @property
    def variables(self):
        return ("u", "f", "b", "k")

    def evaluate(self, params, xi, var, coords):
        if var in ("u", "b"):
            return self.u_gen(params["u"], coords, xi)
        if var == "k":
            if self.k_gen is None:
                return jnp.full((xi.shape[0], coords.shape[0]), self.problem.k_r, dtype=coords.dtype)
            return self.k_gen(params["k"], coords, xi)
        if var == "f":
            u = self.u_gen(params["u"], coords, xi)
            d2u = generator_d2x(self.u_gen, params["u"], coords, xi, self.d2_method, self.h,
                                self.problem.bounds)
            k = self.problem.k_r if self.k_gen is None else self.k_gen(params["k"], coords, xi)
            return self.problem.D * d2u - k * u**3
        raise KeyError(f"unknown variable {var!r}")


@dataclass
class OperatorPrior(PriorModel):
    """Input function (and optional scalar) from generators; output via a frozen DeepONet.

    ``field_gen`` generates ``field`` (e.g. ``f`` or ``logk``); the surrogate
    reads it at ``branch_coords`` (followed by the scalar, if any) and
    predicts ``output`` at arbitrary coordinates.  ``exp_alias`` names a
    variable reported as ``exp(field)`` (``k`` for a log-conductivity field).
    """

    field_gen: object
    field: str
    branch_coords: np.ndarray
    surrogate: object
    surrogate_params: object
    output: str
    blocks: list
    scalar_gen: LatentScalar | None = None
    scalar: str | None = None
    exp_alias: str | None = None
    mode = "deeponet"

    @property
    def components(self):
        out = {self.field: self.field_gen}
        if self.scalar_gen is not None:
            out[self.scalar] = self.scalar_gen
        return out

    @property
    def variables(self):
        names = [self.field, self.output]
        if self.scalar:
            names.append(self.scalar)
        if self.exp_alias:
            names.append(self.exp_alias)
        return tuple(names)

    def branch_input(self, params, xi):
        bc = jnp.asarray(self.branch_coords, dtype=xi.dtype)
        f = self.field_gen(params[self.field], bc, xi)
        if self.scalar_gen is not None:
            f = jnp.concatenate([f, self.scalar_gen(params[self.scalar], xi)[:, None]], axis=1)
        return f

    def evaluate(self, params, xi, var, coords):
        if var == self.field:
            return self.field_gen(params[self.field], coords, xi)
        if var == self.exp_alias:
            return jnp.exp(self.field_gen(params[self.field], coords, xi))
        if var == self.scalar and self.scalar_gen is not None:
            a = self.scalar_gen(params[self.scalar], xi)
            return jnp.broadcast_to(a[:, None], (xi.shape[0], coords.shape[0]))
        if var == self.output:
            sp = cast_params(self.surrogate_params, xi.dtype)
            sp = jax.tree_util.tree_map(jax.lax.stop_gradient, sp)
            return self.surrogate(sp, self.branch_input(params, xi), coords)
        raise KeyError(f"unknown variable {var!r}")


def fake_snapshot(model: PriorModel, params, xi, key=None):
    """Generated rows ``(batch, n_columns)`` in the model's block order.

    Blocks with ``noise_std > 0`` get i.i.d. Gaussian noise drawn from ``key``
    (matching noisy historical data).
    """
    cols = []
    for i, blk in enumerate(model.blocks):
        coords = jnp.asarray(blk.coords, dtype=xi.dtype)
        vals = model.evaluate(params, xi, blk.name, coords)
        if blk.noise_std > 0:
            if key is None:
                raise ValueError(f"block {blk.name!r} is noisy; a PRNG key is required")
            vals = vals + blk.noise_std * jax.random.normal(jax.random.fold_in(key, i), vals.shape, vals.dtype)
        cols.append(vals)
    return jnp.concatenate(cols, axis=1)


# --- losses -----------------------------------------------------------------


def gradient_penalty(disc, rho, interp):
    """``mean((||grad_T D(T)|| - 1)^2)`` over the rows of ``interp``."""
    g = jax.vmap(jax.grad(lambda t: disc(rho, t[None])[0]))(interp)
    norm = jnp.sqrt(jnp.sum(g * g, axis=1) + _NORM_EPS)
    return jnp.mean((norm - 1.0) ** 2)


def discriminator_loss(disc, rho, real, fake, lam=0.1, key=None, eps=None):
    """``E[D(fake)] - E[D(real)] + lam * E[(||grad D(T_hat)|| - 1)^2]``.

    ``T_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per
    pair (drawn from ``key`` unless given).  Returns ``(loss, penalty)``.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {real.shape} and fake {fake.shape} batches differ")
    if eps is None:
        eps = jax.random.uniform(key, (real.shape[0], 1), real.dtype)
    eps = jnp.reshape(eps, (real.shape[0], 1))
    interp = eps * real + (1.0 - eps) * fake
    pen = gradient_penalty(disc, rho, interp)
    loss = jnp.mean(disc(rho, fake)) - jnp.mean(disc(rho, real)) + lam * pen
    return loss, pen


def generator_loss(disc, rho, fake):
    return -jnp.mean(disc(rho, fake))


def penalty_graph(layers, interp, activation="leaky_relu", slope=0.2):
    """Gradient-penalty term as an :mod:`funcprior.autodiff` expression.

    ``layers`` is a list of ``(W, b)`` numpy arrays (last layer linear to one
    output).  The input gradient is emitted as a differentiable expression so
    that ``ad.gradient`` on the result performs double backpropagation.
    Returns ``(penalty_expr, parameter_exprs)``.
    """
    interp = np.asarray(interp, dtype=np.float64)
    T = ad.placeholder("T_hat", interp.shape)
    params, h = [], T
    for i, (W, b) in enumerate(layers):
        We, be = ad.parameter(f"W{i}", W), ad.parameter(f"b{i}", b)
        params += [We, be]
        h = ad.affine(h, We, be)
        if i < len(layers) - 1:
            h = ad.leaky_relu(h, slope) if activation == "leaky_relu" else getattr(ad, activation)(h)
    # rows are independent, so the input gradient of the summed output holds every row's gradient
    g = ad.input_gradient(ad.reduce_sum(h), "T_hat")
    norm = ad.sqrt(ad.reduce_sum(ad.square(g), axis=1) + _NORM_EPS)
    return ad.reduce_mean(ad.square(norm - 1.0)), params


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 40_000
    batch_size: int = 64
    lam: float = 0.1
    ratio: int = 5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    seed: int = 0
    log_every: int = 500
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    disc_width: int = 128
    disc_depth: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("gradient-penalty weight must be non-negative")
        if self.ratio < 1:
            raise ValueError("discriminator/generator ratio must be at least 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch size >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")


@dataclass
class TrainResult:
    params: dict
    disc: Discriminator
    disc_params: list
    history: list = field(default_factory=list)  # (step, L_G, L_D, penalty)


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the last finite parameters."""

    def __init__(self, message, last_good, history):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


def _finite(tree) -> bool:
    return all(bool(np.all(np.isfinite(np.asarray(l)))) for l in jax.tree_util.tree_leaves(tree))


def train_prior(model: PriorModel, real: SnapshotSet, cfg: TrainConfig, params=None,
                disc_params=None) -> TrainResult:
    """Alternate ``cfg.ratio`` discriminator steps with one generator step.

    All randomness comes from ``cfg.seed``: per step, separate streams feed
    the real-batch indices, latent draws, interpolation weights and noise.
    Returned parameters are float64.
    """
    model.check_layout(real)
    if real.n_rows == 0:
        raise ValueError("empty training set")
    dtype = jnp.dtype(cfg.dtype)
    key = jax.random.PRNGKey(cfg.seed)
    k_gen, k_disc, k_loop = jax.random.split(key, 3)
    if params is None:
        params = model.init(k_gen)
    disc = Discriminator.build(model.n_columns, cfg.disc_width, cfg.disc_depth)
    if disc_params is None:
        disc_params = disc.init(k_disc)
    if cfg.steps == 0:
        return TrainResult(params, disc, disc_params, [])

    eta = cast_params(params, dtype)
    rho = cast_params(disc_params, dtype)
    data = jnp.asarray(real.data, dtype)
    n, bs, d = real.n_rows, cfg.batch_size, model.latent_dim
    opt_g = adam_init(eta, cfg.lr, cfg.beta1, cfg.beta2)
    opt_d = adam_init(rho, cfg.lr, cfg.beta1, cfg.beta2)

    def d_step(carry, k):
        eta, rho, opt_d = carry
        k_idx, k_xi, k_eps, k_noise = jax.random.split(k, 4)
        batch = data[jax.random.randint(k_idx, (bs,), 0, n)]
        xi = jax.random.normal(k_xi, (bs, d), dtype)
        fake = jax.lax.stop_gradient(fake_snapshot(model, eta, xi, k_noise))

        def loss(r):
            return discriminator_loss(disc, r, batch, fake, cfg.lam, k_eps)

        (ld, pen), g = jax.value_and_grad(loss, has_aux=True)(rho)
        rho, opt_d = adam_update(opt_d, rho, g)
        return (eta, rho, opt_d), (ld, pen)

    def g_step(eta, rho, opt_g, k):
        k_xi, k_noise = jax.random.split(k)
        xi = jax.random.normal(k_xi, (bs, d), dtype)

        def loss(e):
            return generator_loss(disc, rho, fake_snapshot(model, e, xi, k_noise))

        lg, g = jax.value_and_grad(loss)(eta)
        eta, opt_g = adam_update(opt_g, eta, g)
        return eta, opt_g, lg

    def iteration(carry, step):
        eta, rho, opt_g, opt_d = carry
        k = jax.random.fold_in(k_loop, step)
        kd, kg = jax.random.split(k)
        (eta, rho, opt_d), (ld, pen) = jax.lax.scan(d_step, (eta, rho, opt_d), jax.random.split(kd, cfg.ratio))
        eta, opt_g, lg = g_step(eta, rho, opt_g, kg)
        return (eta, rho, opt_g, opt_d), (lg, ld[-1], pen[-1])

    @jax.jit
    def chunk(carry, steps):
        carry, (lg, ld, pen) = jax.lax.scan(iteration, carry, steps)
        return carry, jnp.mean(lg), jnp.mean(ld), jnp.mean(pen)

    history = []
    carry = (eta, rho, opt_g, opt_d)
    last_good = (params, disc_params)
    done = 0
    while done < cfg.steps:
        size = min(cfg.log_every, cfg.steps - done)
        carry, lg, ld, pen = chunk(carry, jnp.arange(done, done + size))
        done += size
        row = (done, float(lg), float(ld), float(pen))
        history.append(row)
        if not (np.isfinite(row[1:]).all() and _finite(carry[0]) and _finite(carry[1])):
            raise TrainingDiverged(f"non-finite GAN loss at step {done}", last_good, history)
        last_good = (cast_params(carry[0], jnp.float64), cast_params(carry[1], jnp.float64))
        if cfg.checkpoint_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            _write_checkpoint(cfg.checkpoint_dir, model, last_good[0], done)
    eta, rho = last_good
    return TrainResult(eta, disc, rho, history)


def _write_checkpoint(directory, model, params, step):
    os.makedirs(directory, exist_ok=True)
    for name, gen in model.components.items():
        save_checkpoint(os.path.join(directory, f"{name}_step{step}.ckpt"), gen, params[name], {"step": step})


def write_loss_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_G", "L_D", "penalty"])
        for step, lg, ld, pen in history:
            w.writerow([step, repr(lg), repr(ld), repr(pen)])


# --- diagnostics ------------------------------------------------------------


def covariance_mse(model: PriorModel, params, reference, coords, n_samples=10_000, seed=0,
                   var="u", relative=False) -> float:
    """Mean squared difference between generated and reference covariance matrices.

    ``reference`` is a :class:`Kernel` or an explicit covariance matrix.  With
    ``relative=True`` the value is divided by ``mean(C**2)``.
    """
    if n_samples < 1000:
        raise ValueError("covariance diagnostics need at least 1000 samples")
    coords = np.asarray(coords, dtype=np.float64)
    coords = coords[:, None] if coords.ndim == 1 else coords
    C = reference(coords) if isinstance(reference, Kernel) else np.asarray(reference, dtype=np.float64)
    draws = model.sample(params, var, coords, n_samples, seed)
    C_hat = np.cov(draws, rowvar=False)
    mse = float(np.mean((C_hat - C) ** 2))
    return mse / float(np.mean(C**2)) if relative else mse
