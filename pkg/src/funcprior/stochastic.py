"""Historical-data generation: Gaussian random fields, task families and snapshots.

Everything here is plain numpy and pure given ``(seed, arguments)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Kernel",
    "as_coords",
    "sample_gp",
    "kl_expansion",
    "sample_kl",
    "TaskSample",
    "sample_sine_tasks",
    "Block",
    "SnapshotSet",
    "assemble_snapshots",
    "sliding_windows",
    "synthetic_riser_field",
    "write_snapshots_csv",
    "read_snapshots_csv",
    "write_snapshots_bin",
    "read_snapshots_bin",
    "grid_2d",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-6


def as_coords(points) -> np.ndarray:
    """Return points as a float64 ``(n, dim)`` array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None]
    return pts


def grid_2d(nx: int, ny: int | None = None, lo=(0.0, 0.0), hi=(1.0, 1.0)) -> np.ndarray:
    """Uniform node grid flattened row-major over ``(y, x)``; columns are ``(x, y)``."""
    ny = nx if ny is None else ny
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential covariance with one length scale per axis."""

    lengthscales: tuple[float, ...] = (0.2,)
    variance: float = 1.0

    def __post_init__(self):
        ls = self.lengthscales
        if np.isscalar(ls):
            object.__setattr__(self, "lengthscales", (float(ls),))
        if any(l <= 0 for l in self.lengthscales) or self.variance <= 0:
            raise ValueError("length scales and variance must be positive")

    def __call__(self, a, b=None) -> np.ndarray:
        a = as_coords(a)
        b = a if b is None else as_coords(b)
        ls = np.broadcast_to(np.asarray(self.lengthscales, dtype=np.float64), (a.shape[1],))
        diff = (a[:, None, :] - b[None, :, :]) / ls
        return self.variance * np.exp(-0.5 * np.sum(diff**2, axis=-1))

    gram = __call__


def _cholesky_with_jitter(K: np.ndarray) -> np.ndarray:
    jitter = JITTER_START
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"Cholesky failed even with jitter {JITTER_MAX:g}; Gram matrix is not positive definite"
    )


def sample_gp(kernel: Kernel, points, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` zero-mean GP realizations at ``points`` (rows are draws)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = as_coords(points)
    L = _cholesky_with_jitter(kernel(pts))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, pts.shape[0]))
    return z @ L.T


def kl_expansion(kernel: Kernel, grid, terms: int | None = None):
    """Discrete Karhunen-Loeve basis of the Gram matrix on ``grid``.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order (clipped at zero) and eigenvectors as columns.
    """
    pts = as_coords(grid)
    n = pts.shape[0]
    terms = n if terms is None else int(terms)
    if terms > n:
        raise ValueError(f"terms={terms} exceeds grid size {n}")
    if terms < 1:
        raise ValueError("terms must be >= 1")
    lam, vec = np.linalg.eigh(kernel(pts))
    order = np.argsort(lam)[::-1][:terms]
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order]
    # fix sign so results do not depend on LAPACK conventions
    signs = np.sign(vec[np.argmax(np.abs(vec), axis=0), np.arange(terms)])
    return lam, vec * signs


def sample_kl(eigenvalues, eigenvectors, n: int, seed=None) -> np.ndarray:
    """Field samples ``F = sum_k sqrt(lam_k) z_k phi_k`` as rows."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, len(eigenvalues)))
    return (z * np.sqrt(eigenvalues)) @ eigenvectors.T


@dataclass
class TaskSample:
    amplitude: float
    frequency: float
    x: np.ndarray
    values: np.ndarray


def sample_sine_tasks(n: int, sensors=None, seed=None, amp_range=(1.0, 3.0), freq_range=(2.0, 12.0)):
    """Sine tasks ``A sin(w x)`` with A ~ U(amp_range), w ~ U(freq_range)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.linspace(-1.0, 1.0, 30) if sensors is None else np.asarray(sensors, dtype=np.float64)
    rng = np.random.default_rng(seed)
    A = rng.uniform(*amp_range, size=n)
    w = rng.uniform(*freq_range, size=n)
    return [TaskSample(float(a), float(om), x, a * np.sin(om * x)) for a, om in zip(A, w)]


@dataclass
class Block:
    """One variable's sensor block inside a snapshot row."""

    name: str
    coords: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        self.coords = as_coords(self.coords)

    @property
    def size(self) -> int:
        return self.coords.shape[0]


@dataclass
class SnapshotSet:
    """Realizations (rows) of concatenated sensor blocks (columns)."""

    blocks: list[Block]
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.n_columns:
            raise ValueError(
                f"data has shape {self.data.shape}, layout needs {self.n_columns} columns"
            )

    @property
    def n_columns(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out

    def block(self, name: str) -> np.ndarray:
        return self.data[:, self.slices()[name]]

    def layout(self):
        return [(b.name, b.coords) for b in self.blocks]

    def same_layout(self, other: "SnapshotSet") -> bool:
        if len(self.blocks) != len(other.blocks):
            return False
        return all(
            a.name == b.name and a.coords.shape == b.coords.shape and np.array_equal(a.coords, b.coords)
            for a, b in zip(self.blocks, other.blocks)
        )


def assemble_snapshots(blocks: dict, noise: dict | None = None, seed=None) -> SnapshotSet:
    """Stack per-variable realizations into snapshot rows ``(U, F, B, ...)``.

    ``blocks`` maps name -> ``(coords, values)`` with ``values`` of shape
    ``(M, n_sensors)``; the dict order is the column order.  ``noise`` maps
    name -> std of i.i.d. Gaussian noise added to that block.
    """
    noise = noise or {}
    counts = {name: np.asarray(v).shape[0] for name, (_, v) in blocks.items()}
    if len(set(counts.values())) != 1:
        raise ValueError(f"mismatched realization counts across blocks: {counts}")
    rng = np.random.default_rng(seed)
    layout, cols = [], []
    for name, (coords, values) in blocks.items():
        values = np.asarray(values, dtype=np.float64)
        blk = Block(name, coords, float(noise.get(name, 0.0)))
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != blk.size:
            raise ValueError(f"block {name!r}: {values.shape[1]} values for {blk.size} sensors")
        if blk.noise_std > 0:
            values = values + blk.noise_std * rng.standard_normal(values.shape)
        layout.append(blk)
        cols.append(values)
    return SnapshotSet(layout, np.concatenate(cols, axis=1))


def sliding_windows(field, sensor_x, dt: float, window_span: float, stride: float,
                    reads_per_window: int, t0: float = 0.0) -> SnapshotSet:
    """Cut a sensor time series into spatio-temporal snapshots.

    ``field`` has shape ``(n_sensors, n_reads)`` sampled every ``dt``.  Each
    window covers ``window_span`` (inclusive of both ends), windows start every
    ``stride`` and ``reads_per_window`` equidistant reads are kept per sensor.
    Coordinates are ``(x, t_local)`` with ``t_local`` starting at 0, ordered
    sensor-major.
    """
    field = np.asarray(field, dtype=np.float64)
    n_sensors, n_reads = field.shape
    span = int(round(window_span / dt))
    step = int(round(stride / dt))
    if step < 1:
        raise ValueError("stride must be at least one read interval")
    if span > n_reads - 1:
        raise ValueError(
            f"window of {window_span} s is longer than the series ({(n_reads - 1) * dt} s)"
        )
    n_windows = (n_reads - 1 - span) // step + 1
    picks = np.round(np.linspace(0, span, reads_per_window)).astype(int)
    starts = np.arange(n_windows) * step
    idx = starts[:, None] + picks[None, :]
    data = field[:, idx]  # (sensors, windows, reads)
    data = np.transpose(data, (1, 0, 2)).reshape(n_windows, n_sensors * reads_per_window)
    xs = np.repeat(np.asarray(sensor_x, dtype=np.float64), reads_per_window)
    ts = np.tile(picks * dt, n_sensors)
    blk = Block("u", np.column_stack([xs, ts]))
    meta = {"window_start": (t0 + starts * dt).tolist(), "reads_in_window": span + 1}
    return SnapshotSet([blk], data, meta)


# Synthetic stand-in for the riser displacement: three standing modes with
# slowly modulated amplitudes.
RISER_MODES = (
    # amplitude, frequency [Hz], phase, modulation depth, modulation period [s]
    (1.0, 0.42, 0.3, 0.35, 23.0),
    (0.6, 0.85, 1.7, 0.50, 31.0),
    (0.3, 1.30, 4.1, 0.60, 17.0),
)


def synthetic_riser_field(x, t) -> np.ndarray:
    """Displacement ``u(x, t)`` on the outer product of ``x`` and ``t``."""
    x = np.asarray(x, dtype=np.float64)[:, None]
    t = np.asarray(t, dtype=np.float64)[None, :]
    u = np.zeros((x.shape[0], t.shape[1]))
    for k, (a, f, phi, depth, period) in enumerate(RISER_MODES, start=1):
        amp = a * (1.0 + depth * np.sin(2 * np.pi * t / period + k))
        u += amp * np.sin(k * np.pi * x) * np.cos(2 * np.pi * f * t + phi)
    return u


# --- file formats -----------------------------------------------------------

_SNAP_MAGIC = b"FPSNAP01"


def _layout_header(s: SnapshotSet) -> dict:
    return {
        "blocks": [
            {"name": b.name, "dim": int(b.coords.shape[1]), "noise_std": b.noise_std,
             "coords": b.coords.ravel().tolist()}
            for b in s.blocks
        ],
        "rows": s.n_rows,
        "meta": s.meta,
    }


def _layout_from_header(h: dict) -> list[Block]:
    return [
        Block(b["name"], np.asarray(b["coords"], dtype=np.float64).reshape(-1, b["dim"]), b["noise_std"])
        for b in h["blocks"]
    ]


def write_snapshots_csv(s: SnapshotSet, path) -> None:
    """CSV with ``#``-prefixed layout header; floats use round-trip precision."""
    buf = io.StringIO()
    buf.write("# funcprior snapshot csv v1\n")
    for b in s.blocks:
        coords = ";".join(repr(float(c)) for c in b.coords.ravel())
        buf.write(f"# block,{b.name},{b.size},{b.coords.shape[1]},{b.noise_std!r},{coords}\n")
    if s.meta:
        buf.write("# meta," + json.dumps(s.meta) + "\n")
    names = [f"{b.name}[{i}]" for b in s.blocks for i in range(b.size)]
    buf.write(",".join(names) + "\n")
    for row in s.data:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_snapshots_csv(path) -> SnapshotSet:
    blocks, meta, rows = [], {}, []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# funcprior snapshot csv"):
        raise ValueError(f"{path}: not a snapshot CSV")
    body = []
    for line in lines[1:]:
        if line.startswith("# block,"):
            _, name, n, dim, noise, coords = line.split(",", 5)
            c = np.array([float(v) for v in coords.split(";")], dtype=np.float64)
            blocks.append(Block(name, c.reshape(int(n), int(dim)), float(noise)))
        elif line.startswith("# meta,"):
            meta = json.loads(line[len("# meta,"):])
        else:
            body.append(line)
    for line in body[1:]:
        if line:
            rows.append([float(v) for v in line.split(",")])
    ncol = sum(b.size for b in blocks)
    data = np.array(rows, dtype=np.float64).reshape(-1, ncol)
    return SnapshotSet(blocks, data, meta)


def write_snapshots_bin(s: SnapshotSet, path) -> None:
    """Binary form: magic, JSON header length (u32 LE), header, float64 LE rows."""
    header = json.dumps(_layout_header(s)).encode()
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(s.data, dtype="<f8").tobytes())


def read_snapshots_bin(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _SNAP_MAGIC:
        raise ValueError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    h = json.loads(raw[12:12 + hlen].decode())
    blocks = _layout_from_header(h)
    ncol = sum(b.size for b in blocks)
    data = np.frombuffer(raw[12 + hlen:], dtype="<f8").reshape(h["rows"], ncol).astype(np.float64)
    return SnapshotSet(blocks, data, h.get("meta", {}))
