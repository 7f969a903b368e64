"""Optimal quadratic quantizers of the standard Gaussian N(0, I_d).

A quantizer is a finite set of points y_1..y_M with the probabilities p_i of
their Voronoi cells. Brownian increments over a step of length h are replaced
by ``sqrt(h) * y_{nearest(dB / sqrt(h))}``, which turns every conditional
expectation of the backward scheme into a finite weighted sum.

Training is a randomized Lloyd iteration on a fixed antithetic Monte Carlo
sample, followed by a competitive-learning (CLVQ) refinement on fresh draws.
Points are kept in mirror pairs (y, -y) throughout so the trained grid is
exactly centered, like the Gaussian itself.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtri

WEIGHT_SUM_TOL = 1e-12


class QuantizerError(ValueError):
    """Invalid quantizer contents (weights, duplicates, shape)."""


class QuantizerFormatError(QuantizerError):
    """Malformed quantizer file."""

    def __init__(self, message: str, line: int, field: str):
        super().__init__(f"line {line}, {field}: {message}")
        self.line = line
        self.field = field


@dataclass(frozen=True)
class TrainingSchedule:
    """Sample sizes and step sizes used by :func:`train`.

    ``n_train`` and ``n_weights`` count antithetic *pairs*, so the effective
    sample sizes are twice as large. During CLVQ the winning point moves with
    gain ``clvq_gain / (c_i + k_i)``, where c_i is its Lloyd cell count and
    k_i the number of refinement updates it has already received, so each
    point keeps a running mean over all samples it has seen.
    """

    n_train: int = 250_000
    lloyd_max_iter: int = 1000
    lloyd_tol: float = 1e-5
    clvq_steps: int = 50_000
    clvq_gain: float = 1.0
    n_weights: int = 500_000

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class QuantizerGrid:
    dimension: int
    points: np.ndarray  # (M, d)
    weights: np.ndarray  # (M,)
    distortion2: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        pts.setflags(write=False)
        w.setflags(write=False)
        self.validate()

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def validate(self) -> None:
        d = self.dimension
        if d < 1:
            raise QuantizerError("dimension must be positive")
        if self.points.ndim != 2 or self.points.shape[1] != d:
            raise QuantizerError(f"points must have shape (M, {d}), got {self.points.shape}")
        if self.weights.shape != (self.points.shape[0],):
            raise QuantizerError("one weight per point is required")
        if self.size < 1:
            raise QuantizerError("a quantizer needs at least one point")
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.weights)):
            raise QuantizerError("points and weights must be finite")
        if np.any(self.weights <= 0):
            raise QuantizerError("every weight must be positive")
        total = math.fsum(self.weights)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise QuantizerError(f"weights sum to {total!r}, expected 1")
        if len(np.unique(self.points, axis=0)) != self.size:
            raise QuantizerError("points must be pairwise distinct")
        if not self.distortion2 >= 0:
            raise QuantizerError("distortion2 must be nonnegative")

    def mean(self) -> np.ndarray:
        """Weighted mean sum_i p_i y_i; zero for a centered grid."""
        return self.weights @ self.points

    def __eq__(self, other):
        if not isinstance(other, QuantizerGrid):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
            and self.distortion2 == other.distortion2
        )

    __hash__ = None


def nearest_indices(grid: QuantizerGrid, v: np.ndarray) -> np.ndarray:
    """Brute-force nearest grid point for each row of ``v``.

    Ties go to the lowest index (``argmin`` returns the first minimum).
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if grid.dimension == 1 and v.shape[-1] != 1:
        v = v.reshape(-1, 1)
    out = np.empty(v.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // grid.size)
    for s in range(0, v.shape[0], step):
        diff = v[s : s + step, None, :] - grid.points[None, :, :]
        out[s : s + step] = np.argmin(np.einsum("nmd,nmd->nm", diff, diff), axis=1)
    return out


def nearest(grid: QuantizerGrid, v) -> tuple[int, np.ndarray]:
    """Index and coordinates of the grid point closest to the vector ``v``."""
    v = np.asarray(v, dtype=float).reshape(1, grid.dimension)
    i = int(nearest_indices(grid, v)[0])
    return i, grid.points[i]


def scaled_increment(grid: QuantizerGrid, h: float, w) -> np.ndarray:
    """Quantized Brownian increment ``sqrt(h) * G(w / sqrt(h))``.

    ``w`` may be a single vector or an (n, d) batch.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    w = np.asarray(w, dtype=float)
    sq = math.sqrt(h)
    batch = np.atleast_2d(w).reshape(-1, grid.dimension)
    out = sq * grid.points[nearest_indices(grid, batch / sq)]
    return out.reshape(w.shape) if w.ndim > 1 else out.reshape(grid.dimension)


def _assign(points: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Fast nearest-point assignment for training and Monte Carlo.

    Exact ties have probability zero under continuous samples, so the
    tie-break here is irrelevant; the public :func:`nearest` is the reference.
    """
    if points.shape[1] == 1:
        order = np.argsort(points[:, 0], kind="stable")
        sorted_pts = points[order, 0]
        mids = 0.5 * (sorted_pts[1:] + sorted_pts[:-1])
        return order[np.searchsorted(mids, samples[:, 0], side="left")]
    _, idx = cKDTree(points).query(samples, k=1)
    return idx


def _symmetric_init(rng: np.random.Generator, d: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    # asymptotically optimal point density for N(0, I_d) is the N(0, (d+2)/d I_d) density;
    # in 1-D its quantiles are used directly, in higher dimension random draws
    scale = math.sqrt((d + 2) / d)
    k = m // 2
    if d == 1:
        half = scale * ndtri((m - np.arange(k) - 0.5) / m).reshape(-1, 1)
    else:
        half = rng.normal(scale=scale, size=(k, d))
    parts = [np.zeros((m % 2, d)), half, -half]
    points = np.concatenate(parts)
    mirror = np.concatenate([np.arange(m % 2), np.arange(k) + m % 2 + k, np.arange(k) + m % 2])
    return points, mirror


def _symmetrize(points: np.ndarray, mirror: np.ndarray) -> np.ndarray:
    return 0.5 * (points - points[mirror])


def _lloyd(points, mirror, samples, max_iter, tol):
    """Batch centroid iterations; returns the points and their final cell counts."""
    m = points.shape[0]
    prev = math.inf
    for _ in range(max_iter):
        idx = _assign(points, samples)
        counts = np.bincount(idx, minlength=m)
        sums = np.stack(
            [np.bincount(idx, weights=samples[:, j], minlength=m) for j in range(points.shape[1])],
            axis=1,
        )
        occupied = counts > 0
        new = points.copy()
        new[occupied] = sums[occupied] / counts[occupied, None]
        for i in np.flatnonzero(~occupied):
            # stranded in the far tail: pull onto the closest sample
            new[i] = samples[np.argmin(np.sum((samples - points[i]) ** 2, axis=1))]
        new = _symmetrize(new, mirror)
        dist = float(np.mean(np.sum((samples - points[idx]) ** 2, axis=1)))
        points = new
        if occupied.all() and prev - dist <= tol * dist:
            break
        prev = dist
    return points, np.bincount(_assign(points, samples), minlength=m)


def _clvq(points, mirror, counts, rng, schedule: TrainingSchedule):
    if schedule.clvq_steps <= 0:
        return points
    points = points.copy()
    seen = counts.astype(float).copy()
    draws = rng.standard_normal((schedule.clvq_steps, points.shape[1]))
    for xi in draws:
        i = int(np.argmin(np.sum((points - xi) ** 2, axis=1)))
        j = mirror[i]
        if j == i:
            continue  # the center point of an odd grid stays at the origin
        seen[i] += 1.0
        seen[j] += 1.0
        points[i] += schedule.clvq_gain / seen[i] * (xi - points[i])
        points[j] = -points[i]
    return _symmetrize(points, mirror)


def _canonical_order(points: np.ndarray) -> np.ndarray:
    # lexicographic, first coordinate most significant
    return np.lexsort(points.T[::-1])


def train(dimension: int, M: int, seed: int, schedule: TrainingSchedule | None = None) -> QuantizerGrid:
    """Train an M-point quadratic quantizer of N(0, I_dimension).

    Deterministic in ``(dimension, M, seed, schedule)``.
    """
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    if M < 1:
        raise ValueError("M must be >= 1")
    schedule = schedule or TrainingSchedule()
    if M > 2 * schedule.n_train:
        raise ValueError(f"M={M} exceeds the training sample size {2 * schedule.n_train}")

    ss = np.random.SeedSequence(seed)
    init_ss, train_ss, clvq_ss, weight_ss = ss.spawn(4)
    d = dimension
    if M == 1:
        points, mirror = np.zeros((1, d)), np.zeros(1, dtype=np.int64)
    else:
        points, mirror = _symmetric_init(np.random.default_rng(init_ss), d, M)
        half = np.random.default_rng(train_ss).standard_normal((schedule.n_train, d))
        samples = np.concatenate([half, -half])
        points, counts = _lloyd(points, mirror, samples, schedule.lloyd_max_iter, schedule.lloyd_tol)
        points = _clvq(points, mirror, counts, np.random.default_rng(clvq_ss), schedule)

    half = np.random.default_rng(weight_ss).standard_normal((schedule.n_weights, d))
    wsamples = np.concatenate([half, -half])
    idx = _assign(points, wsamples)
    counts = np.bincount(idx, minlength=M).astype(float)
    if np.any(counts == 0):
        raise QuantizerError("empty Voronoi cell after training; increase n_weights")
    weights = counts / counts.sum()
    distortion2 = float(np.mean(np.sum((wsamples - points[idx]) ** 2, axis=1)))

    order = _canonical_order(points)
    return QuantizerGrid(d, points[order], weights[order], distortion2)


def distortion(grid: QuantizerGrid, p: float = 2.0, samples: int = 200_000, seed: int = 0) -> float:
    """Monte Carlo estimate of the L^p quantization error ||Z - G(Z)||_p."""
    if p < 1:
        raise ValueError("p must be >= 1")
    z = np.random.default_rng(seed).standard_normal((samples, grid.dimension))
    err = np.linalg.norm(z - grid.points[_assign(grid.points, z)], axis=1)
    return float(np.mean(err**p) ** (1.0 / p))


def cell_means(grid: QuantizerGrid, samples: int = 400_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo conditional means E[Z | Z in cell i] and cell counts.

    A stationary grid has ``cell_means(grid)[0] ~= grid.points``.
    """
    z = np.random.default_rng(seed).standard_normal((samples, grid.dimension))
    idx = _assign(grid.points, z)
    counts = np.bincount(idx, minlength=grid.size)
    sums = np.stack(
        [np.bincount(idx, weights=z[:, j], minlength=grid.size) for j in range(grid.dimension)],
        axis=1,
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    return means, counts


# --- persistence ---------------------------------------------------------


def save(grid: QuantizerGrid, path) -> None:
    path = Path(path)
    lines = [f"{grid.dimension} {grid.size}"]
    for y, p in zip(grid.points, grid.weights):
        lines.append(" ".join(f"{v:.17g}" for v in (*y, p)))
    lines.append(f"distortion2 {grid.distortion2:.17g}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_float(tok: str, line: int, field: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise QuantizerFormatError(f"not a number: {tok!r}", line, field) from None


def load(path) -> QuantizerGrid:
    raw = Path(path).read_text().splitlines()
    lines = [(n + 1, ln.split()) for n, ln in enumerate(raw) if ln.strip()]
    if not lines:
        raise QuantizerFormatError("empty file", 1, "header")
    lineno, head = lines[0]
    if len(head) != 2:
        raise QuantizerFormatError("expected 'd M'", lineno, "header")
    try:
        d, m = int(head[0]), int(head[1])
    except ValueError:
        raise QuantizerFormatError("d and M must be integers", lineno, "header") from None
    if d < 1 or m < 1:
        raise QuantizerFormatError("d and M must be positive", lineno, "header")
    if len(lines) != m + 2:
        raise QuantizerFormatError(
            f"expected {m} point lines and a distortion line, found {len(lines) - 1} lines",
            lines[-1][0],
            "body",
        )
    pts = np.empty((m, d))
    w = np.empty(m)
    for i, (lineno, toks) in enumerate(lines[1 : m + 1]):
        if len(toks) != d + 1:
            raise QuantizerFormatError(f"expected {d + 1} values, got {len(toks)}", lineno, f"point {i}")
        for j in range(d):
            pts[i, j] = _parse_float(toks[j], lineno, f"y_{j + 1}")
        w[i] = _parse_float(toks[d], lineno, "weight")
    lineno, tail = lines[-1]
    if len(tail) != 2 or tail[0] != "distortion2":
        raise QuantizerFormatError("expected 'distortion2 <value>'", lineno, "distortion2")
    dist = _parse_float(tail[1], lineno, "distortion2")
    return QuantizerGrid(d, pts, w, dist)


def default_cache_dir() -> Path:
    env = os.environ.get("QFBSDE_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "qfbsde"


def cache_path(dimension: int, M: int, seed: int, schedule: TrainingSchedule, cache_dir=None) -> Path:
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    return root / f"gauss_d{dimension}_M{M}_s{seed}_{schedule.digest()}.txt"


def get_quantizer(
    dimension: int,
    M: int,
    seed: int = 0,
    schedule: TrainingSchedule | None = None,
    cache_dir=None,
) -> QuantizerGrid:
    """Load a cached grid or train and cache it."""
    schedule = schedule or TrainingSchedule()
    path = cache_path(dimension, M, seed, schedule, cache_dir)
    if path.exists():
        return load(path)
    grid = train(dimension, M, seed, schedule)
    save(grid, path)
    return grid
