"""PDE residual builders and numerical solvers used as data oracles.

Three systems are covered:

* diffusion-reaction  ``D u'' - k_r u^3 = f`` on [-1, 1], ``u(+-1) = 0``;
* the fractional variant with a Riesz derivative of order ``alpha`` in (1, 2];
* 2-D Darcy flow ``div(K grad h) = 0`` on the unit square.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "PdeProblem",
    "DIFFUSION_REACTION",
    "FRACTIONAL",
    "DARCY",
    "ManufacturedSolution",
    "manufactured_source",
    "inverse_reaction_rate",
    "RieszOperator",
    "gl_weights",
    "riesz_matrix",
    "NewtonFailure",
    "solve_diffusion_reaction",
    "solve_darcy_2d",
    "darcy_boundary_flux",
    "alpha_from_normal",
    "alpha_prior_sample",
    "pinn_generators",
    "write_operator_dataset",
    "read_operator_dataset",
    "write_operator_dataset_csv",
]


@dataclass(frozen=True)
class PdeProblem:
    kind: str
    D: float = 0.01
    k_r: float | None = 0.2
    alpha: float = 2.0
    bounds: tuple = (-1.0, 1.0)
    dirichlet: tuple = (0.0, 0.0)
    neumann: tuple = ()
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in ("diffusion-reaction", "fractional-diffusion-reaction", "darcy-2d"):
            raise ValueError(f"unknown problem kind {self.kind!r}")


DIFFUSION_REACTION = PdeProblem("diffusion-reaction", D=0.01, k_r=0.2)
FRACTIONAL = PdeProblem("fractional-diffusion-reaction", D=0.05, k_r=1.0, alpha=1.5)
DARCY = PdeProblem("darcy-2d", D=1.0, k_r=None, bounds=((0.0, 1.0), (0.0, 1.0)),
                   dirichlet=(1.0, 0.0), neumann=("bottom", "top"))


@dataclass
class ManufacturedSolution:
    """``u = (x^2 - 1) sum_i [w_{2i-1} sin(i pi x) + w_{2i} cos(i pi x)]``, i = 1..4."""

    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.shape != (8,):
            raise ValueError("need exactly 8 coefficients")

    @classmethod
    def random(cls, rng) -> "ManufacturedSolution":
        return cls(rng.uniform(0.0, 1.0, size=8))

    def _series(self, x):
        x = np.asarray(x, dtype=np.float64)
        s = np.zeros_like(x)
        ds = np.zeros_like(x)
        dds = np.zeros_like(x)
        for i in range(1, 5):
            a, b = self.omega[2 * i - 2], self.omega[2 * i - 1]
            k = i * np.pi
            sn, cs = np.sin(k * x), np.cos(k * x)
            s += a * sn + b * cs
            ds += k * (a * cs - b * sn)
            dds += -k * k * (a * sn + b * cs)
        return s, ds, dds

    def u(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x**2 - 1) * self._series(x)[0]

    def d2u(self, x):
        x = np.asarray(x, dtype=np.float64)
        s, ds, dds = self._series(x)
        return 2 * s + 4 * x * ds + (x**2 - 1) * dds


def inverse_reaction_rate(u):
    """Reaction rate of the inverse problem, ``0.4 exp(-u)``."""
    return 0.4 * np.exp(-np.asarray(u))


def manufactured_source(ms: ManufacturedSolution, x, k_r: float | Callable = 0.2, D: float = 0.01):
    """``f = D u'' - k_r(u) u^3`` with ``u''`` from the closed form."""
    u = ms.u(x)
    k = k_r(u) if callable(k_r) else k_r
    return D * ms.d2u(x) - k * u**3


# --- fractional operator ----------------------------------------------------


@dataclass
class RieszOperator:
    alpha: float
    x: np.ndarray  # all N grid points including the two boundary nodes
    matrix: np.ndarray  # (N-2, N-2), acts on interior values with u(+-1) = 0

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    def apply(self, u_full):
        """Apply to values on the full grid (boundary entries ignored, taken as 0)."""
        return self.matrix @ np.asarray(u_full)[1:-1]


def gl_weights(alpha: float, n: int) -> np.ndarray:
    """Grunwald-Letnikov weights ``(-1)^k binom(alpha, k)`` for k < n."""
    g = np.empty(n)
    g[0] = 1.0
    for k in range(1, n):
        g[k] = g[k - 1] * (1.0 - (alpha + 1.0) / k)
    return g


def riesz_matrix(alpha: float, N: int, bounds=(-1.0, 1.0)) -> RieszOperator:
    """Shifted Grunwald-Letnikov discretization of the Riesz derivative.

    ``d^alpha u ~ -(A_L + A_R) u / (2 cos(alpha pi / 2) h^alpha)`` where
    ``A_L``/``A_R`` are the left/right shifted GL sums.  At ``alpha = 2``
    this is exactly the three-point second difference.
    """
    if not (1.0 < alpha <= 2.0):
        raise ValueError(f"alpha must lie in (1, 2], got {alpha}")
    if N < 8:
        raise ValueError("need N >= 8 grid points")
    x = np.linspace(bounds[0], bounds[1], N)
    h = x[1] - x[0]
    n = N - 2
    g = gl_weights(alpha, n + 2)
    # interior index i (0-based) is grid node i+1; A_L[i, j] = g[i - j + 1] for j <= i + 1
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    kl = i - j + 1
    AL = np.where(kl >= 0, g[np.clip(kl, 0, n + 1)], 0.0)
    AR = AL.T.copy()
    coef = -1.0 / (2.0 * np.cos(alpha * np.pi / 2.0) * h**alpha)
    return RieszOperator(alpha, x, coef * (AL + AR))


class NewtonFailure(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def _second_difference(N: int, bounds=(-1.0, 1.0)) -> RieszOperator:
    x = np.linspace(bounds[0], bounds[1], N)
    h = x[1] - x[0]
    n = N - 2
    A = (np.diag(-2.0 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) / h**2
    return RieszOperator(2.0, x, A)


def solve_diffusion_reaction(f_interior, alpha: float = 2.0, D: float = 0.01, k_r=0.2, N: int | None = None,
                             operator: RieszOperator | None = None, tol=1e-10, max_iter=50, u0=None):
    """Solve ``D d^alpha u - k_r(u) u^3 = f`` with ``u(+-1) = 0`` by damped Newton.

    ``f_interior`` holds f at the N-2 interior nodes.  ``alpha = 2`` uses the
    standard second difference.  Returns u on all N nodes.
    """
    f = np.asarray(f_interior, dtype=np.float64)
    if operator is None:
        N = f.shape[0] + 2 if N is None else N
        operator = _second_difference(N) if alpha == 2.0 else riesz_matrix(alpha, N)
    A = D * operator.matrix
    n = A.shape[0]
    if f.shape != (n,):
        raise ValueError(f"f must have {n} interior values")

    if callable(k_r):
        def react(u):
            return k_r(u) * u**3

        def dreact(u):
            eps = 1e-7
            dk = (k_r(u + eps) - k_r(u - eps)) / (2 * eps)
            return dk * u**3 + 3 * k_r(u) * u**2
    else:
        def react(u):
            return k_r * u**3

        def dreact(u):
            return 3 * k_r * u**2

    def resid(u):
        return A @ u - react(u) - f

    u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=np.float64)[1:-1].copy()
    r = resid(u)
    rn = np.max(np.abs(r))
    for _ in range(max_iter):
        if rn < tol:
            break
        J = A - np.diag(dreact(u))
        du = np.linalg.solve(J, -r)
        lam = 1.0
        while True:
            cand = u + lam * du
            rc = resid(cand)
            rcn = np.max(np.abs(rc))
            if rcn < rn or lam <= 1e-4:
                break
            lam *= 0.5
        u, r, rn = cand, rc, rcn
    if not rn < tol:
        raise NewtonFailure(f"Newton did not converge: residual {rn:.3e}", rn)
    return np.concatenate([[0.0], u, [0.0]])


# --- Darcy ------------------------------------------------------------------


def _darcy_system(K):
    K = np.asarray(K, dtype=np.float64)
    ny, nx = K.shape
    hx = 1.0 / (nx - 1)
    hy = 1.0 / (ny - 1)
    # harmonic face conductivities
    kx = 2 * K[:, 1:] * K[:, :-1] / (K[:, 1:] + K[:, :-1])  # (ny, nx-1)
    ky = 2 * K[1:, :] * K[:-1, :] / (K[1:, :] + K[:-1, :])  # (ny-1, nx)
    # dual-cell extents: half cells on the zero-flux rows
    wy = np.full(ny, hy)
    wy[0] = wy[-1] = hy / 2
    wx = np.full(nx, hx)
    wx[0] = wx[-1] = hx / 2
    return K, kx, ky, wx, wy, hx, hy


def solve_darcy_2d(K, left: float = 1.0, right: float = 0.0, tol=1e-10) -> np.ndarray:
    """Vertex-centred finite-volume solve of ``div(K grad h) = 0`` on [0,1]^2.

    ``K`` is given at the ``(ny, nx)`` grid nodes (row index = y).  Dirichlet
    ``h = left`` at x = 0 and ``h = right`` at x = 1, zero flux at y = 0, 1.
    Face conductivities are harmonic means of the adjacent nodes.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2:
        raise ValueError("K must be a 2-D nodal array")
    if not np.all(K > 0) or not np.all(np.isfinite(K)):
        raise ValueError("conductivity must be positive and finite")
    K, kx, ky, wx, wy, hx, hy = _darcy_system(K)
    ny, nx = K.shape
    nu = nx - 2  # unknown columns
    idx = np.arange(ny * nu).reshape(ny, nu)
    rows, cols, vals = [], [], []
    rhs = np.zeros(ny * nu)
    for j in range(ny):
        for i in range(1, nx - 1):
            p = idx[j, i - 1]
            diag = 0.0
            # x-faces: conductance = k_face * (dual height) / hx
            for di, kf in ((-1, kx[j, i - 1]), (1, kx[j, i])):
                c = kf * wy[j] / hx
                diag += c
                ii = i + di
                if ii == 0:
                    rhs[p] += c * left
                elif ii == nx - 1:
                    rhs[p] += c * right
                else:
                    rows.append(p)
                    cols.append(idx[j, ii - 1])
                    vals.append(-c)
            for dj in (-1, 1):
                jj = j + dj
                if 0 <= jj < ny:
                    c = ky[min(j, jj), i] * wx[i] / hy
                    diag += c
                    rows.append(p)
                    cols.append(idx[jj, i - 1])
                    vals.append(-c)
            rows.append(p)
            cols.append(p)
            vals.append(diag)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(ny * nu, ny * nu))
    sol = spla.spsolve(A.tocsc(), rhs)
    res = np.max(np.abs(A @ sol - rhs)) / max(1.0, np.max(np.abs(rhs)))
    if not np.all(np.isfinite(sol)) or res > tol:
        raise np.linalg.LinAlgError(f"Darcy linear solve failed (residual {res:.2e})")
    h = np.empty((ny, nx))
    h[:, 0] = left
    h[:, -1] = right
    h[:, 1:-1] = sol.reshape(ny, nu)
    return h


def darcy_boundary_flux(K, h):
    """Total flux ``-K dh/dx`` leaving through x=0 (negated) and x=1, as ``(q_left, q_right)``."""
    K, kx, ky, wx, wy, hx, hy = _darcy_system(K)
    h = np.asarray(h)
    q_left = np.sum(kx[:, 0] * wy * (h[:, 0] - h[:, 1]) / hx)
    q_right = np.sum(kx[:, -1] * wy * (h[:, -2] - h[:, -1]) / hx)
    return q_left, q_right


# --- fractional order prior -------------------------------------------------


def alpha_from_normal(a):
    """``alpha = 1 + 1 / (1 + exp(-a))``."""
    return 1.0 + 1.0 / (1.0 + np.exp(-np.asarray(a, dtype=np.float64)))


def alpha_prior_sample(n: int, seed=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return alpha_from_normal(np.random.default_rng(seed).standard_normal(n))


# --- physics-informed generators --------------------------------------------


def pinn_generators(u_gen, problem: PdeProblem, k_gen=None, d2_method: str = "exact", h: float = 1e-3):
    """Build ``(u, f, b)`` field functions from a latent generator.

    Each returned function maps ``(params, x, xi)`` to a ``(batch, n)`` array.
    ``params`` is ``{"u": ...}`` (plus ``"k"`` when ``k_gen`` models an
    unknown reaction-rate field sharing the latent input).  ``f`` applies
    ``D u'' - k u^3`` with ``u''`` from :func:`funcprior.nets.generator_d2x`;
    ``b`` evaluates ``u`` (the caller passes boundary coordinates).
    """
    from .nets import generator_d2x

    if problem.kind != "diffusion-reaction":
        raise ValueError(
            f"PINN encoding supports diffusion-reaction only; use an operator surrogate for {problem.kind}"
        )
    if k_gen is None and problem.k_r is None:
        raise ValueError("forward problem needs a known k_r")

    def u_fn(params, x, xi):
        return u_gen(params["u"], x, xi)

    def k_fn(params, x, xi):
        if k_gen is None:
            return problem.k_r * np.ones((1, x.shape[0]))
        return k_gen(params["k"], x, xi)

    def f_fn(params, x, xi):
        u = u_fn(params, x, xi)
        d2u = generator_d2x(u_gen, params["u"], x, xi, method=d2_method, h=h, bounds=problem.bounds)
        k = k_gen(params["k"], x, xi) if k_gen is not None else problem.k_r
        return problem.D * d2u - k * u**3

    return u_fn, f_fn, u_fn, k_fn


# --- operator datasets ------------------------------------------------------

_OPDATA_MAGIC = b"FPOPDS01"


def write_operator_dataset(path, kind: str, grid: dict, inputs, outputs, scalars=None) -> None:
    """Binary dataset: magic, JSON header (kind, grid spec, counts), float64 LE rows.

    Each row is ``(inputs[i], scalars[i]?, outputs[i])``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    n = inputs.shape[0]
    sc = np.zeros((n, 0)) if scalars is None else np.asarray(scalars, dtype=np.float64).reshape(n, -1)
    header = {"kind": kind, "grid": grid, "samples": n, "n_inputs": inputs.shape[1],
              "n_scalars": sc.shape[1], "n_outputs": outputs.shape[1]}
    hb = json.dumps(header).encode()
    rows = np.concatenate([inputs, sc, outputs], axis=1)
    with open(path, "wb") as fh:
        fh.write(_OPDATA_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def read_operator_dataset(path):
    """Returns ``(header, inputs, scalars, outputs)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _OPDATA_MAGIC:
        raise ValueError(f"{path}: not an operator dataset")
    (hlen,) = struct.unpack("<I", raw[8:12])
    h = json.loads(raw[12:12 + hlen].decode())
    width = h["n_inputs"] + h["n_scalars"] + h["n_outputs"]
    rows = np.frombuffer(raw[12 + hlen:], dtype="<f8").reshape(h["samples"], width).astype(np.float64)
    a, b = h["n_inputs"], h["n_inputs"] + h["n_scalars"]
    return h, rows[:, :a], rows[:, a:b], rows[:, b:]


def write_operator_dataset_csv(path, inputs, outputs, scalars=None) -> None:
    inputs = np.asarray(inputs)
    outputs = np.asarray(outputs)
    n = inputs.shape[0]
    sc = np.zeros((n, 0)) if scalars is None else np.asarray(scalars).reshape(n, -1)
    cols = ([f"in[{i}]" for i in range(inputs.shape[1])] + [f"scalar[{i}]" for i in range(sc.shape[1])]
            + [f"out[{i}]" for i in range(outputs.shape[1])])
    rows = np.concatenate([inputs, sc, outputs], axis=1)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
