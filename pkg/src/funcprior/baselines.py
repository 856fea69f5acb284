"""Comparison methods: Gaussian-process regression and model-agnostic meta-learning."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import jax
import jax.flatten_util
import jax.numpy as jnp
import numpy as np
from scipy import linalg, optimize

from .nets import Mlp, adam_init, adam_update, cast_params
from .stochastic import JITTER_MAX

__all__ = [
    "GprModel",
    "gpr_fit",
    "gpr_predict",
    "gpr_log_marginal",
    "gpr_save",
    "gpr_load",
    "MamlConfig",
    "MamlResult",
    "AdaptResult",
    "mse_loss",
    "maml_inner_step",
    "maml_outer_grad",
    "maml_train",
    "maml_adapt",
    "sine_task_sampler",
]

NOISE_FLOOR = 1e-12


# --- Gaussian-process regression -------------------------------------------


def _se(a, b, ell, s2):
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return s2 * np.exp(-0.5 * d2 / ell**2)


def _coords(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


@dataclass
class GprModel:
    lengthscale: float
    signal_var: float
    noise_var: float
    x: np.ndarray
    y: np.ndarray
    chol: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)
    jitter: float = 0.0

    def to_dict(self) -> dict:
        return {"kernel": "squared-exponential", "lengthscale": self.lengthscale,
                "signal_var": self.signal_var, "noise_var": self.noise_var,
                "x": self.x.tolist(), "y": self.y.tolist()}


def _factor(x, ell, s2, noise):
    K = _se(x, x, ell, s2) + noise * np.eye(len(x))
    jitter = 0.0
    while True:
        try:
            return linalg.cholesky(K + jitter * np.eye(len(x)), lower=True), jitter
        except linalg.LinAlgError:
            jitter = 1e-10 * max(s2, 1.0) if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX * max(s2, 1.0):
                raise linalg.LinAlgError("GP Gram matrix is not positive definite even with jitter")


def gpr_log_marginal(x, y, ell, s2, noise) -> float:
    """Log marginal likelihood ``log N(y | 0, K + noise I)``."""
    x, y = _coords(x), np.asarray(y, dtype=np.float64)
    L, _ = _factor(x, ell, s2, noise)
    a = linalg.cho_solve((L, True), y)
    return float(-0.5 * y @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


def _neg_lml_and_grad(theta, x, y):
    ell, s2, noise = np.exp(theta)
    noise = max(noise, NOISE_FLOOR)
    n = len(y)
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    Kf = s2 * np.exp(-0.5 * d2 / ell**2)
    try:
        L, jit = _factor(x, ell, s2, noise)
    except linalg.LinAlgError:
        return 1e25, np.zeros(3)
    a = linalg.cho_solve((L, True), y)
    lml = -0.5 * y @ a - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    W = np.outer(a, a) - Kinv
    dK = (Kf * d2 / ell**2, Kf, noise * np.eye(n))  # derivatives w.r.t. log-hyperparameters
    grad = np.array([0.5 * np.sum(W * d) for d in dK])
    return -lml, -grad


def gpr_fit(points, values, optimize_hyper: bool = True, lengthscale=0.2, signal_var=1.0,
            noise_var=1e-6, restarts: int = 8, seed=0) -> GprModel:
    """Exact GP regression with a squared-exponential kernel.

    With ``optimize_hyper`` the log marginal likelihood is maximized from the
    given hyperparameters plus ``restarts`` random log-space starts; the best
    optimum is kept.  Fixed hyperparameters may use ``noise_var=0`` for exact
    interpolation; optimized noise is floored at ``1e-12``.
    """
    x, y = _coords(points), np.asarray(values, dtype=np.float64).ravel()
    if len(np.unique(x, axis=0)) != len(x):
        raise ValueError("training points must be distinct")
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    if optimize_hyper:
        rng = np.random.default_rng(seed)
        starts = [np.log([lengthscale, signal_var, max(noise_var, NOISE_FLOOR)])]
        for _ in range(restarts):
            starts.append(np.array([rng.uniform(-3, 1), rng.uniform(-2, 2), rng.uniform(-10, -2)]))
        bounds = [(-6.0, 3.0), (-8.0, 5.0), (math.log(NOISE_FLOOR), 2.0)]
        best = None
        for s0 in starts:
            res = optimize.minimize(_neg_lml_and_grad, s0, args=(x, y), jac=True,
                                    method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        lengthscale, signal_var, noise_var = (float(v) for v in np.exp(best.x))
        noise_var = max(noise_var, NOISE_FLOOR)
    L, jit = _factor(x, lengthscale, signal_var, noise_var)
    alpha = linalg.cho_solve((L, True), y)
    return GprModel(lengthscale, signal_var, noise_var, x, y, L, alpha, jit)


def gpr_predict(model: GprModel, x_star):
    """Posterior mean and std of the latent function at ``x_star``."""
    xs = _coords(x_star)
    Ks = _se(xs, model.x, model.lengthscale, model.signal_var)
    mean = Ks @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = model.signal_var - np.sum(v * v, axis=0)
    # below n * eps * s2 the difference is rounding noise of the subtraction
    floor = len(model.y) * np.finfo(np.float64).eps * model.signal_var
    return mean, np.sqrt(np.where(var > floor, var, 0.0))


def gpr_save(model: GprModel, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def gpr_load(path) -> GprModel:
    with open(path) as fh:
        d = json.load(fh)
    return gpr_fit(d["x"], d["y"], optimize_hyper=False, lengthscale=d["lengthscale"],
                   signal_var=d["signal_var"], noise_var=d["noise_var"])


# --- MAML -------------------------------------------------------------------


@dataclass(frozen=True)
class MamlConfig:
    alpha: float = 0.01
    beta: float = 0.001
    k_inner: int = 20
    width: int = 40
    depth: int = 2
    meta_steps: int = 10_000
    meta_batch: int = 25
    outer: str = "sgd"
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.outer not in ("adam", "sgd"):
            raise ValueError(f"unknown outer optimizer {self.outer!r}")
        if self.k_inner < 1:
            raise ValueError("K must be at least 1")

    def network(self) -> Mlp:
        return Mlp((1, *(self.width,) * self.depth, 1), "tanh")


@dataclass
class MamlResult:
    model: Mlp
    params: list
    history: list  # (step, mean outer loss)


def mse_loss(apply, params, x, y):
    return jnp.mean((apply(params, x)[..., 0] - y) ** 2)


def maml_inner_step(apply, params, x, y, alpha):
    g = jax.grad(lambda p: mse_loss(apply, p, x, y))(params)
    return jax.tree_util.tree_map(lambda p, gi: p - alpha * gi, params, g)


def maml_outer_grad(apply, params, tasks, alpha):
    """Gradient of ``sum_i L_outer(theta - alpha grad L_inner(theta))``, differentiated exactly.

    ``tasks`` is ``(x_in, y_in, x_out, y_out)`` with a leading task axis.
    """
    def meta_loss(p):
        def one(xi, yi, xo, yo):
            return mse_loss(apply, maml_inner_step(apply, p, xi, yi, alpha), xo, yo)

        return jnp.sum(jax.vmap(one)(*tasks))

    return jax.value_and_grad(meta_loss)(params)


def sine_task_sampler(n_points=30, amp_range=(1.0, 3.0), freq_range=(2.0, 12.0)):
    """Sine tasks ``A sin(w x)`` on ``n_points`` equidistant points in [-1, 1] (jax, traceable)."""
    grid = jnp.linspace(-1.0, 1.0, n_points)

    def sample(key, n_tasks):
        ka, kw = jax.random.split(key)
        A = jax.random.uniform(ka, (n_tasks, 1), minval=amp_range[0], maxval=amp_range[1])
        w = jax.random.uniform(kw, (n_tasks, 1), minval=freq_range[0], maxval=freq_range[1])
        return jnp.broadcast_to(grid, (n_tasks, n_points)), A * jnp.sin(w * grid)

    return sample


def _split_tasks(key, x, y, k):
    """Random K/remaining split per task (inner/outer sets)."""
    n_tasks, n = x.shape
    perms = jax.vmap(lambda kk: jax.random.permutation(kk, n))(jax.random.split(key, n_tasks))
    take = jax.vmap(lambda a, idx: a[idx])
    xs, ys = take(x, perms), take(y, perms)
    return xs[:, :k, None], ys[:, :k], xs[:, k:, None], ys[:, k:]


def maml_train(task_sampler, cfg: MamlConfig, params=None, model: Mlp | None = None) -> MamlResult:
    """Exact second-order MAML; the outer step has size ``beta`` (Adam or plain gradient).

    ``task_sampler(key, n_tasks) -> (x, y)`` of shape ``(n_tasks, n_points)``.
    """
    model = model or cfg.network()
    key = jax.random.PRNGKey(cfg.seed)
    k_init, k_loop = jax.random.split(key)
    if params is None:
        params = model.init(k_init, jnp.float64)
    params = cast_params(params, jnp.float64)
    if cfg.meta_steps == 0:
        return MamlResult(model, params, [])

    def one(carry, step):
        p, opt = carry
        ks, kp = jax.random.split(jax.random.fold_in(k_loop, step))
        x, y = task_sampler(ks, cfg.meta_batch)
        if cfg.k_inner >= x.shape[1]:
            raise ValueError("K must leave points for the outer loss")
        loss, g = maml_outer_grad(model, p, _split_tasks(kp, x, y, cfg.k_inner), cfg.alpha)
        if cfg.outer == "adam":
            p, opt = adam_update(opt, p, g)
        else:
            p = jax.tree_util.tree_map(lambda a, b: a - cfg.beta * b, p, g)
        return (p, opt), loss / cfg.meta_batch

    @jax.jit
    def chunk(carry, steps):
        return jax.lax.scan(one, carry, steps)

    carry = (params, adam_init(params, cfg.beta))
    history, done = [], 0
    while done < cfg.meta_steps:
        size = min(cfg.log_every, cfg.meta_steps - done)
        carry, losses = chunk(carry, jnp.arange(done, done + size))
        params = carry[0]
        done += size
        m = float(jnp.mean(losses))
        if not np.isfinite(m):
            raise FloatingPointError(f"MAML meta-loss became non-finite at step {done}")
        history.append((done, m))
    q = len(history) // 4
    if q >= 2:
        tail = [h[1] for h in history[-q:]]
        if tail[-1] > tail[0] * 1.05:
            warnings.warn("MAML meta-loss rose over the final quarter of training", RuntimeWarning)
    return MamlResult(model, params, history)


@dataclass
class AdaptResult:
    params: list
    losses: list
    adam_steps: int
    lbfgs_losses: list
    converged: bool


def maml_adapt(model: Mlp, params, x, y, adam_lr=1e-3, adam_cap=20_000, switch_loss=1e-3,
               lbfgs_cap=2_000, tol=1e-8) -> AdaptResult:
    """Fit a new task: Adam until the loss drops below ``switch_loss``, then L-BFGS.

    The quasi-Newton phase stops when consecutive losses differ by less
    than ``tol``.  ``converged`` is False if a cap was hit first.
    """
    x = jnp.asarray(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    y = jnp.asarray(np.asarray(y, dtype=np.float64).ravel())
    if x.shape[0] == 0:
        raise ValueError("no adaptation data")
    params = cast_params(params, jnp.float64)
    vg = jax.jit(jax.value_and_grad(lambda p: mse_loss(model, p, x, y)))
    loss0 = float(vg(params)[0])
    losses = [loss0]
    if loss0 < switch_loss:
        return AdaptResult(params, losses, 0, [], True)

    opt = adam_init(params, adam_lr)

    @jax.jit
    def adam_chunk(p, s):
        def body(c, _):
            p, s = c
            l, g = jax.value_and_grad(lambda q: mse_loss(model, q, x, y))(p)
            p, s = adam_update(s, p, g)
            return (p, s), l

        (p, s), ls = jax.lax.scan(body, (p, s), None, length=100)
        return p, s, ls

    steps = 0
    converged = True
    while losses[-1] >= switch_loss:
        if steps >= adam_cap:
            converged = False
            break
        params, opt, ls = adam_chunk(params, opt)
        steps += 100
        losses.append(float(vg(params)[0]))
        if not np.isfinite(losses[-1]):
            raise FloatingPointError("adaptation diverged")

    flat, unravel = jax.flatten_util.ravel_pytree(params)

    def fun(v):
        l, g = vg(unravel(jnp.asarray(v)))
        return float(l), np.asarray(jax.flatten_util.ravel_pytree(g)[0], dtype=np.float64)

    lb = [losses[-1]]
    res = optimize.minimize(fun, np.asarray(flat), jac=True, method="L-BFGS-B",
                            callback=lambda v: lb.append(fun(v)[0]),
                            options={"maxiter": lbfgs_cap, "ftol": tol, "gtol": 0.0})
    params = unravel(jnp.asarray(res.x))
    converged = converged and res.nit < lbfgs_cap
    losses.extend(lb[1:])
    return AdaptResult(params, losses, steps, lb, converged)
