"""Latent-space posterior estimation: likelihood, HMC, NUTS and pushforward statistics.

Everything here runs in float64.  A :class:`LatentTarget` turns a prior model,
its trained parameters and a list of observations into a potential energy
``U(xi) = -log p(xi | data)`` with a jitted gradient; the samplers only ever
see that potential.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .nets import cast_params

__all__ = [
    "Observation",
    "observations",
    "IdentityPrior",
    "LatentTarget",
    "log_likelihood",
    "log_posterior",
    "leapfrog",
    "SamplerConfig",
    "DualAveraging",
    "PosteriorDraws",
    "sample_hmc",
    "sample_nuts",
    "sample",
    "split_rhat",
    "effective_sample_size",
    "mc_standard_error",
    "pushforward",
    "coverage",
    "write_draws_csv",
    "write_grid_stats_csv",
    "write_summary_json",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Observation:
    var: str
    coord: tuple
    value: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"observation noise must be positive, got {self.sigma}")
        object.__setattr__(self, "coord", tuple(float(c) for c in np.atleast_1d(self.coord)))


def observations(var, coords, values, sigma) -> list[Observation]:
    coords = np.asarray(coords, dtype=np.float64)
    coords = coords[:, None] if coords.ndim == 1 else coords
    values = np.asarray(values, dtype=np.float64).ravel()
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), values.shape)
    return [Observation(var, tuple(c), float(v), float(s)) for c, v, s in zip(coords, values, sig)]


def _group(data):
    groups = {}
    for ob in data:
        groups.setdefault(ob.var, []).append(ob)
    out = {}
    for var, obs in groups.items():
        out[var] = (
            np.array([o.coord for o in obs], dtype=np.float64),
            np.array([o.value for o in obs], dtype=np.float64),
            np.array([o.sigma for o in obs], dtype=np.float64),
        )
    return out


@dataclass
class IdentityPrior:
    """``u(x; xi) = xi_0`` for every ``x``: the conjugate-Gaussian test model."""

    latent_dim: int = 1
    variables = ("u",)

    def evaluate(self, params, xi, var, coords):
        if var != "u":
            raise KeyError(f"unknown variable {var!r}")
        return jnp.broadcast_to(xi[:, :1], (xi.shape[0], coords.shape[0]))


def _check_vars(model, groups):
    known = getattr(model, "variables", None)
    for var in groups:
        if known is not None and var not in known:
            raise KeyError(f"unknown variable tag {var!r}; model provides {tuple(known)}")


def _loglik_fn(model, params, groups):
    def ll(xi):
        total = 0.0
        for var, (coords, vals, sig) in groups.items():
            pred = model.evaluate(params, xi[None], var, jnp.asarray(coords))[0]
            total = total + jnp.sum(-0.5 * jnp.log(2 * jnp.pi * sig**2) - (pred - vals) ** 2 / (2 * sig**2))
        return total

    return ll


def log_likelihood(model, params, xi, data) -> float:
    """Independent Gaussian log-likelihood of ``data`` given latent ``xi``."""
    groups = _group(data)
    _check_vars(model, groups)
    if not groups:
        return 0.0
    params = cast_params(params, jnp.float64) if params is not None else None
    return float(_loglik_fn(model, params, groups)(jnp.asarray(xi, jnp.float64)))


def log_posterior(model, params, xi, data) -> float:
    """Log-likelihood plus ``-||xi||^2 / 2`` (normalizing constants of the prior dropped)."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (model.latent_dim,):
        raise ValueError(f"latent vector must have shape ({model.latent_dim},), got {xi.shape}")
    return log_likelihood(model, params, xi, data) - 0.5 * float(xi @ xi)


class LatentTarget:
    """Potential ``U(xi) = -log p(xi | data)`` with a jitted float64 gradient."""

    def __init__(self, model, params, data):
        self.model = model
        self.params = cast_params(params, jnp.float64) if params is not None else None
        self.data = list(data)
        self.dim = model.latent_dim
        groups = _group(self.data)
        _check_vars(model, groups)
        ll = _loglik_fn(model, self.params, groups) if groups else (lambda xi: 0.0)

        def U(xi):
            return 0.5 * jnp.dot(xi, xi) - ll(xi)

        self._vg = jax.jit(jax.value_and_grad(U))
        self.n_grad = 0

    def value_and_grad(self, xi):
        self.n_grad += 1
        v, g = self._vg(jnp.asarray(xi, jnp.float64))
        return float(v), np.asarray(g)

    def potential(self, xi) -> float:
        return self.value_and_grad(xi)[0]

    def grad(self, xi):
        return self.value_and_grad(xi)[1]


def leapfrog(q, p, eps, n_steps, grad_U):
    """Kick-drift-kick integration with unit mass.

    Returns ``(q, p, ok)``; ``ok`` is False if a non-finite gradient or state
    appeared (the trajectory is stopped there).
    """
    q = np.array(q, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    if n_steps == 0:
        return q, p, True
    if eps <= 0:
        raise ValueError("step size must be positive")
    g = grad_U(q)
    for _ in range(n_steps):
        p = p - 0.5 * eps * g
        q = q + eps * p
        g = grad_U(q)
        p = p - 0.5 * eps * g
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(q))):
            return q, p, False
    return q, p, True


# --- samplers ---------------------------------------------------------------


@dataclass
class SamplerConfig:
    method: str = "nuts"
    n_samples: int = 1000
    burn_in: int = 2000
    step_size: float = 1.0
    n_leapfrog: int = 10
    target_accept: float = 0.6
    adapt: bool = True
    max_depth: int = 10
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    jitter: float = 0.2
    seed: int = 0
    init: list | None = None

    def __post_init__(self):
        if self.method not in ("hmc", "nuts"):
            raise ValueError(f"unknown sampler {self.method!r}")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")
        if self.step_size <= 0 or self.n_samples < 1 or self.burn_in < 0:
            raise ValueError("invalid sampler budget or step size")

    @classmethod
    def hmc(cls, **kw):
        kw.setdefault("target_accept", 0.65)
        kw.setdefault("step_size", 0.1)
        return cls(method="hmc", **kw)


class DualAveraging:
    """Step-size adaptation toward a target mean acceptance statistic."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_stat) -> float:
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


@dataclass
class PosteriorDraws:
    samples: np.ndarray
    method: str
    step_size: float
    accept_rate: float
    burn_in: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def summary(self) -> dict:
        return {
            "method": self.method,
            "n_draws": int(self.n),
            "burn_in": int(self.burn_in),
            "step_size": float(self.step_size),
            "accept_rate": float(self.accept_rate),
            "seed": int(self.seed),
            **self.meta,
        }


def _initial(target, cfg):
    if cfg.init is not None:
        q = np.asarray(cfg.init, dtype=np.float64)
        if q.shape != (target.dim,):
            raise ValueError("initial state has the wrong dimension")
        return q
    return np.zeros(target.dim)


def sample_hmc(target: LatentTarget, cfg: SamplerConfig) -> PosteriorDraws:
    """Metropolis-corrected HMC with a fixed number of leapfrog steps.

    With ``cfg.adapt`` the step size is tuned by dual averaging during burn-in
    toward ``cfg.target_accept`` and then frozen.
    """
    rng = np.random.default_rng(cfg.seed)
    q = _initial(target, cfg)
    U, g = target.value_and_grad(q)
    eps = cfg.step_size
    da = DualAveraging(eps, cfg.target_accept, cfg.gamma, cfg.t0, cfg.kappa) if cfg.adapt else None
    cache = {}

    def grad_U(x):
        v, gr = target.value_and_grad(x)
        cache["U"] = v
        return gr

    out = np.empty((cfg.n_samples, target.dim))
    accepted, divergent = 0.0, 0
    for it in range(cfg.burn_in + cfg.n_samples):
        p0 = rng.standard_normal(target.dim)
        # jittered step breaks the periodic trajectories that bias fixed-length HMC
        e = eps * (1.0 + cfg.jitter * (2.0 * rng.uniform() - 1.0))
        q1, p1, ok = leapfrog(q, p0, e, cfg.n_leapfrog, grad_U)
        if ok:
            H0 = U + 0.5 * p0 @ p0
            H1 = cache["U"] + 0.5 * p1 @ p1
            a = 1.0 if H1 <= H0 else math.exp(H0 - H1)
            a = a if np.isfinite(a) else 0.0
        else:
            a = 0.0
            divergent += 1
        if rng.uniform() < a:
            q, U = q1, cache["U"]
        if it < cfg.burn_in:
            if da is not None:
                eps = da.update(a)
                if it == cfg.burn_in - 1:
                    eps = da.final
        else:
            accepted += a
            out[it - cfg.burn_in] = q
    rate = accepted / cfg.n_samples
    if rate < 0.05:
        warnings.warn(f"HMC acceptance {rate:.3f} after burn-in (step {eps:.3g}, "
                      f"{cfg.n_leapfrog} leapfrog steps, {divergent} divergent)", RuntimeWarning)
    return PosteriorDraws(out, "hmc", eps, rate, cfg.burn_in, cfg.seed,
                          {"n_leapfrog": cfg.n_leapfrog, "divergent": divergent, "jitter": cfg.jitter,
                           "target_accept": cfg.target_accept})


_DELTA_MAX = 1000.0


class _Tree:
    __slots__ = ("qm", "pm", "gm", "qp", "pp", "gp", "q", "U", "g", "n", "s", "alpha", "n_alpha")


def sample_nuts(target: LatentTarget, cfg: SamplerConfig) -> PosteriorDraws:
    """No-U-Turn sampler with slice sampling inside the trajectory tree.

    Step size starts at ``cfg.step_size`` and is adapted by dual averaging
    toward ``cfg.target_accept`` during burn-in, then frozen.
    """
    rng = np.random.default_rng(cfg.seed)
    q = _initial(target, cfg)
    U, g = target.value_and_grad(q)
    eps = cfg.step_size
    da = DualAveraging(eps, cfg.target_accept, cfg.gamma, cfg.t0, cfg.kappa) if cfg.adapt else None

    def step(q, p, g, e):
        p = p - 0.5 * e * g
        q = q + e * p
        U1, g1 = target.value_and_grad(q)
        p = p - 0.5 * e * g1
        return q, p, U1, g1

    def build(q, p, g, log_u, v, j, e, H0):
        t = _Tree()
        if j == 0:
            q1, p1, U1, g1 = step(q, p, g, v * e)
            H1 = U1 + 0.5 * p1 @ p1
            if not np.isfinite(H1):
                H1 = np.inf
            t.qm = t.qp = t.q = q1
            t.pm = t.pp = p1
            t.gm = t.gp = t.g = g1
            t.U = U1
            t.n = int(log_u <= -H1)
            t.s = int(log_u < _DELTA_MAX - H1)
            t.alpha = math.exp(min(0.0, H0 - H1)) if np.isfinite(H1) else 0.0
            t.n_alpha = 1
            return t
        t = build(q, p, g, log_u, v, j - 1, e, H0)
        if t.s:
            if v == -1:
                t2 = build(t.qm, t.pm, t.gm, log_u, v, j - 1, e, H0)
                t.qm, t.pm, t.gm = t2.qm, t2.pm, t2.gm
            else:
                t2 = build(t.qp, t.pp, t.gp, log_u, v, j - 1, e, H0)
                t.qp, t.pp, t.gp = t2.qp, t2.pp, t2.gp
            if t2.n > 0 and rng.uniform() < t2.n / max(t.n + t2.n, 1):
                t.q, t.U, t.g = t2.q, t2.U, t2.g
            t.alpha += t2.alpha
            t.n_alpha += t2.n_alpha
            dq = t.qp - t.qm
            t.s = int(t2.s and dq @ t.pm >= 0 and dq @ t.pp >= 0)
            t.n += t2.n
        return t

    out = np.empty((cfg.n_samples, target.dim))
    accept_sum, depth_hits, depths = 0.0, 0, []
    for it in range(cfg.burn_in + cfg.n_samples):
        p0 = rng.standard_normal(target.dim)
        H0 = U + 0.5 * p0 @ p0
        log_u = -H0 - rng.exponential()
        qm = qp = q
        pm = pp = p0
        gm = gp = g
        j, n, s = 0, 1, 1
        alpha, n_alpha = 0.0, 1
        while s:
            v = -1 if rng.uniform() < 0.5 else 1
            if v == -1:
                t = build(qm, pm, gm, log_u, v, j, eps, H0)
                qm, pm, gm = t.qm, t.pm, t.gm
            else:
                t = build(qp, pp, gp, log_u, v, j, eps, H0)
                qp, pp, gp = t.qp, t.pp, t.gp
            if t.s and rng.uniform() < min(1.0, t.n / n):
                q, U, g = t.q, t.U, t.g
            n += t.n
            dq = qp - qm
            s = int(t.s and dq @ pm >= 0 and dq @ pp >= 0)
            alpha, n_alpha = t.alpha, t.n_alpha
            j += 1
            if j >= cfg.max_depth:
                if s:
                    depth_hits += 1
                break
        stat = alpha / n_alpha
        if it < cfg.burn_in:
            if da is not None:
                eps = da.update(stat)
                if it == cfg.burn_in - 1:
                    eps = da.final
        else:
            accept_sum += stat
            depths.append(j)
            out[it - cfg.burn_in] = q
    if depth_hits > 0.1 * (cfg.burn_in + cfg.n_samples):
        warnings.warn(f"NUTS hit the maximum tree depth {cfg.max_depth} in {depth_hits} iterations",
                      RuntimeWarning)
    return PosteriorDraws(out, "nuts", eps, accept_sum / cfg.n_samples, cfg.burn_in, cfg.seed,
                          {"tree_sampling": "slice", "max_depth": cfg.max_depth,
                           "max_depth_hits": depth_hits, "mean_depth": float(np.mean(depths)),
                           "target_accept": cfg.target_accept})


def sample(target: LatentTarget, cfg: SamplerConfig) -> PosteriorDraws:
    return sample_nuts(target, cfg) if cfg.method == "nuts" else sample_hmc(target, cfg)


def effective_sample_size(x) -> float:
    """Autocorrelation-based ESS of a 1-D chain (Geyer initial positive sequence)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    x = x - x.mean()
    var = x @ x / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def mc_standard_error(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std() / math.sqrt(effective_sample_size(x)))


def split_rhat(chains) -> np.ndarray:
    """Split-R-hat per coordinate for ``chains`` of shape ``(n_chains, n_draws, dim)``."""
    chains = np.asarray(chains, dtype=np.float64)
    half = chains.shape[1] // 2
    parts = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    return np.sqrt(((n - 1) / n * W + B / n) / W)


# --- pushforward ------------------------------------------------------------


def coverage(mean, std, truth, k) -> float:
    """Fraction of points with ``|mean - truth| <= k * std``."""
    err = np.abs(np.asarray(mean) - np.asarray(truth))
    return float(np.mean(err <= k * np.asarray(std)))


def pushforward(model, params, draws, grid: dict, truth: dict | None = None, batch=250) -> dict:
    """Pointwise posterior mean/std of each variable in ``grid`` (var -> coords).

    Returns var -> dict(mean, std[, coverage_1, coverage_2]).  ``draws`` is a
    :class:`PosteriorDraws` or an array of latent samples.
    """
    xi_all = draws.samples if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=np.float64)
    if xi_all.shape[0] == 0:
        raise ValueError("no posterior draws")
    params = cast_params(params, jnp.float64) if params is not None else None
    truth = truth or {}
    out = {}
    for var, coords in grid.items():
        coords = np.asarray(coords, dtype=np.float64)
        coords = coords[:, None] if coords.ndim == 1 else coords
        fn = jax.jit(lambda xi, c=jnp.asarray(coords), v=var: model.evaluate(params, xi, v, c))
        vals = np.concatenate([np.asarray(fn(jnp.asarray(xi_all[i:i + batch])))
                               for i in range(0, xi_all.shape[0], batch)])
        # shifting by one draw keeps identical draws at exactly zero spread
        centred = vals - vals[0]
        mean = vals[0] + centred.mean(axis=0)
        std = centred.std(axis=0)
        rec = {"mean": mean, "std": std}
        if var in truth:
            t = np.asarray(truth[var], dtype=np.float64)
            rec["coverage_1"] = coverage(mean, std, t, 1)
            rec["coverage_2"] = coverage(mean, std, t, 2)
            rec["rmse"] = float(np.sqrt(np.mean((mean - t) ** 2)))
        out[var] = rec
    return out


# --- output files -----------------------------------------------------------


def write_draws_csv(path, draws: PosteriorDraws):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"xi_{i}" for i in range(draws.samples.shape[1])])
        for row in draws.samples:
            w.writerow([repr(float(v)) for v in row])


def write_grid_stats_csv(path, coords, stats: dict):
    """Columns: coordinates (x[, y]) then ``<var>_mean, <var>_std`` per variable."""
    coords = np.asarray(coords, dtype=np.float64)
    coords = coords[:, None] if coords.ndim == 1 else coords
    names = ["x", "y", "z"][:coords.shape[1]]
    header = list(names)
    cols = [coords[:, i] for i in range(coords.shape[1])]
    for var, rec in stats.items():
        header += [f"{var}_mean", f"{var}_std"]
        cols += [np.broadcast_to(rec["mean"], coords.shape[:1]), np.broadcast_to(rec["std"], coords.shape[:1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def write_summary_json(path, draws: PosteriorDraws, config: SamplerConfig | None = None, extra=None):
    doc = draws.summary()
    if config is not None:
        doc["config"] = asdict(config)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
