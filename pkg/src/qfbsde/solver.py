"""Backward dynamic programming on quantized transitions.

Every step runs over the nodes x of slice k and reads only slice k+1:

1. ``T0 = sigma(x, u_{k+1}(x)) g``                         (g: quantized increment)
2. ``vhat_k(x) = E[v_{k+1}(Pi_{k+1}(x + T0))]``             (only if b depends on z)
3. ``T = b(x, u_{k+1}(x), vhat_k(x)) h + T0``
4. ``v_k(x) = h^-1 E[u_{k+1}(Pi_{k+1}(x + T)) g]``
5. ``u_k(x) = E[u_{k+1}(Pi_{k+1}(x + T))] + h f(x, u_{k+1}(x), v_k(x))``

Expectations are exact finite sums over the quantizer points. The "simple"
variant uses ``v_{k+1}(x)`` in both b and f; the pure-backward variant is
the full scheme restricted to drift-free problems; the differentiated
variant propagates (u, grad u) jointly.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .grid import GridSpec, SpatialGrid, interp1d
from .problems import DifferentiatedProblem, Problem
from .quantizer import QuantizerGrid


class Variant(str, Enum):
    FULL = "full"
    SIMPLE = "simple"
    PURE_BACKWARD = "pure_backward"
    DIFFERENTIATED = "differentiated"


class NumericalAbort(RuntimeError):
    """A non-finite value appeared during the backward sweep."""

    def __init__(self, k: int, node: int, coords):
        super().__init__(f"non-finite value at slice k={k}, node {node}, x={np.asarray(coords).tolist()}")
        self.k = k
        self.node = node
        self.coords = coords


class VariantMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    T: float
    N: int
    grid: GridSpec
    quantizer: QuantizerGrid
    variant: Variant = Variant.FULL
    t0: float = 0.0
    store_all_slices: bool = False
    keep: tuple[int, ...] = ()
    interpolation: str = "nearest"
    threads: int = 1
    chunk_size: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")
        if self.quantizer.dimension != self.grid.dimension:
            raise ValueError("quantizer and grid dimensions differ")
        if self.interpolation not in ("nearest", "linear1d"):
            raise ValueError("interpolation must be 'nearest' or 'linear1d'")
        if self.interpolation == "linear1d" and self.grid.dimension != 1:
            raise NotImplementedError("linear interpolation is only available in dimension 1")

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.N + 1)

    def regime(self) -> dict:
        """Convergence-regime flags: delta^2 < h, M^(-2/d) < h, rho >= 1."""
        h, d = self.h, self.grid.dimension
        return {
            "delta2_lt_h": self.grid.delta**2 < h,
            "quantizer_lt_h": self.quantizer.size ** (-2.0 / d) < h,
            "rho_ge_1": self.grid.periodic or self.grid.rho >= 1,
        }

    def retained(self) -> set[int]:
        if self.store_all_slices:
            return set(range(self.N + 1))
        return {0, self.N, *(k for k in self.keep if 0 <= k <= self.N)}


@dataclass
class Solution:
    config: SolverConfig
    problem_name: str
    ubar: dict = field(default_factory=dict)
    vbar: dict = field(default_factory=dict)
    vhat: dict = field(default_factory=dict)
    wbar: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    evaluations: int = 0
    clamped: int = 0

    @property
    def times(self) -> np.ndarray:
        return self.config.times

    @property
    def slices(self) -> list[int]:
        return sorted(self.ubar)

    def grid(self, k: int) -> SpatialGrid:
        return self.config.grid.slice_grid(k)

    def coords(self, k: int) -> np.ndarray:
        return self.grid(k).coords

    def has_all_slices(self) -> bool:
        return len(self.ubar) == self.config.N + 1

    def index_of_time(self, t: float) -> int:
        k = int(round((t - self.config.t0) / self.config.h))
        if not 0 <= k <= self.config.N or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a time of the mesh")
        return k


def _run_chunks(n: int, chunk: int, threads: int, fn) -> None:
    parts = [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fn, parts))
    else:
        for sl in parts:
            fn(sl)


def _gather(values: np.ndarray, grid: SpatialGrid, targets: np.ndarray, interpolation: str) -> np.ndarray:
    if interpolation == "linear1d":
        return interp1d(values, grid, targets[..., 0])
    return values[grid.locate(targets)]


def _noise(sig: np.ndarray, quantizer: QuantizerGrid, h: float) -> np.ndarray:
    # sigma(x) g for every quantizer point: (n, M, d)
    return math.sqrt(h) * np.einsum("nij,mj->nmi", sig, quantizer.points)


def expect_over_quantizer(
    field_values: np.ndarray,
    grid_next: SpatialGrid,
    x: np.ndarray,
    drift: np.ndarray,
    diff: np.ndarray,
    h: float,
    quantizer: QuantizerGrid,
    weighted: bool = False,
    interpolation: str = "nearest",
) -> np.ndarray:
    """Finite-sum expectation over the quantized increment.

    Returns ``sum_i p_i F(Pi(x + drift h + diff sqrt(h) y_i))`` for every row of
    ``x``; with ``weighted=True`` each term is multiplied by ``sqrt(h) y_i``
    (the increment itself), giving an (n, d) result.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (n, d))
    diff = np.broadcast_to(np.asarray(diff, dtype=float), (n, d, d))
    tgt = x[:, None, :] + (drift * h)[:, None, :] + _noise(diff, quantizer, h)
    vals = _gather(np.asarray(field_values, dtype=float), grid_next, tgt, interpolation)
    p = quantizer.weights
    if weighted:
        return math.sqrt(h) * np.einsum("nm,m,md->nd", vals, p, quantizer.points)
    if vals.ndim == 3:
        return np.einsum("nmd,m->nd", vals, p)
    return vals @ p


def _check_finite(k: int, grid: SpatialGrid, *arrays) -> None:
    for a in arrays:
        bad = ~np.isfinite(a)
        if bad.ndim > 1:
            bad = bad.any(axis=tuple(range(1, bad.ndim)))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericalAbort(k, i, grid.coords[i])


def solve(problem: Problem, config: SolverConfig) -> Solution:
    """Run the backward sweep for the configured variant."""
    if config.variant is Variant.DIFFERENTIATED:
        if not isinstance(problem, DifferentiatedProblem):
            raise VariantMismatch("the differentiated variant needs a DifferentiatedProblem")
        return solve_differentiated(problem, config)
    if isinstance(problem, DifferentiatedProblem):
        raise VariantMismatch("a DifferentiatedProblem can only be solved with the differentiated variant")
    if problem.dimension != config.grid.dimension:
        raise ValueError("problem and grid dimensions differ")
    for msg in config.grid.regime_warnings(config.h):
        warnings.warn(msg, stacklevel=2)

    started = time.perf_counter()
    variant = config.variant
    h = config.h
    q = config.quantizer
    p, Y = q.weights, q.points
    sqh = math.sqrt(h)
    keep = config.retained()
    sol = Solution(config, problem.name)

    grid_next = config.grid.slice_grid(config.N)
    xN = grid_next.coords
    U1 = np.asarray(problem.H(xN), dtype=float).copy()
    V1 = problem.terminal_v(xN, config.grid.delta)
    _check_finite(config.N, grid_next, U1, V1)

    if variant is Variant.PURE_BACKWARD:
        drift = problem.b(xN, U1, V1)
        if np.any(drift != 0):
            raise VariantMismatch("the pure-backward variant requires a zero drift")

    sol.ubar[config.N] = U1
    sol.vbar[config.N] = V1
    need_vhat = variant is Variant.FULL and problem.drift_depends_on_z
    d = problem.dimension

    for k in range(config.N - 1, -1, -1):
        grid_k = config.grid.slice_grid(k)
        xk = grid_k.coords
        n = grid_k.size
        self_idx = grid_next.locate(xk)
        u1x = U1[self_idx]
        v1x = V1[self_idx]
        vhat = np.empty((n, d)) if need_vhat else None
        ubar = np.empty(n)
        vbar = np.empty((n, d))

        def pass_a(sl):
            x = xk[sl]
            noise = _noise(problem.sigma(x, u1x[sl]), q, h)
            vals = _gather(V1, grid_next, x[:, None, :] + noise, config.interpolation)
            vhat[sl] = np.einsum("nmd,m->nd", vals, p)

        def pass_b(sl):
            x = xk[sl]
            noise = _noise(problem.sigma(x, u1x[sl]), q, h)
            vdrift = vhat[sl] if need_vhat else v1x[sl]
            drift = np.asarray(problem.b(x, u1x[sl], vdrift), dtype=float)
            tgt = x[:, None, :] + (drift * h)[:, None, :] + noise
            vals = _gather(U1, grid_next, tgt, config.interpolation)
            vb = ((vals * p) @ Y) / sqh
            vbar[sl] = vb
            zf = v1x[sl] if variant is Variant.SIMPLE else vb
            ubar[sl] = vals @ p + h * np.asarray(problem.f(x, u1x[sl], zf), dtype=float)

        if need_vhat:
            _run_chunks(n, config.chunk_size, config.threads, pass_a)
        _run_chunks(n, config.chunk_size, config.threads, pass_b)
        sol.evaluations += n * q.size * (2 if need_vhat else 1)
        _check_finite(k, grid_k, ubar, vbar, *(() if vhat is None else (vhat,)))

        if k in keep:
            sol.ubar[k] = ubar
            sol.vbar[k] = vbar
            if need_vhat:
                sol.vhat[k] = vhat
        U1, V1, grid_next = ubar, vbar, grid_k

    sol.wall_seconds = time.perf_counter() - started
    return sol


def solve_simple(problem: Problem, config: SolverConfig) -> Solution:
    return solve(problem, _with_variant(config, Variant.SIMPLE))


def solve_pure_backward(problem: Problem, config: SolverConfig) -> Solution:
    return solve(problem, _with_variant(config, Variant.PURE_BACKWARD))


def _with_variant(config: SolverConfig, variant: Variant) -> SolverConfig:
    from dataclasses import replace

    return replace(config, variant=variant)


def solve_differentiated(problem: DifferentiatedProblem, config: SolverConfig) -> Solution:
    """Joint sweep for (u, w = grad u); both fields use predictors from slice k+1.

    Negative ``u`` under the square root of the diffusion is clamped to zero
    by the problem's sigma; the number of such node evaluations is recorded
    in ``Solution.clamped``.
    """
    if problem.dimension != config.grid.dimension:
        raise ValueError("problem and grid dimensions differ")
    started = time.perf_counter()
    h = config.h
    q = config.quantizer
    p = q.weights
    keep = config.retained()
    sol = Solution(config, problem.name)

    grid_next = config.grid.slice_grid(config.N)
    xN = grid_next.coords
    U1 = np.asarray(problem.H(xN), dtype=float).copy()
    W1 = np.asarray(problem.H_w(xN), dtype=float).reshape(xN.shape)
    _check_finite(config.N, grid_next, U1, W1)
    sol.ubar[config.N] = U1
    sol.wbar[config.N] = W1
    sol.vbar[config.N] = np.einsum("ni,nij->nj", W1, problem.sigma(xN, U1))

    for k in range(config.N - 1, -1, -1):
        grid_k = config.grid.slice_grid(k)
        xk = grid_k.coords
        n = grid_k.size
        self_idx = grid_next.locate(xk)
        u1x, w1x = U1[self_idx], W1[self_idx]
        ubar = np.empty(n)
        wbar = np.empty_like(w1x)

        def step(sl):
            x = xk[sl]
            u, w = u1x[sl], w1x[sl]
            noise = _noise(problem.sigma(x, u), q, h)
            tgt_u = x[:, None, :] + (np.asarray(problem.drift_u(x, u, w)) * h)[:, None, :] + noise
            tgt_w = x[:, None, :] + (np.asarray(problem.drift_w(x, u, w)) * h)[:, None, :] + noise
            eu = _gather(U1, grid_next, tgt_u, config.interpolation) @ p
            ew = np.einsum("nmd,m->nd", _gather(W1, grid_next, tgt_w, config.interpolation), p)
            ubar[sl] = eu + h * problem.driver_u(x, u, w)
            wbar[sl] = ew + h * problem.driver_w(x, u, w)

        _run_chunks(n, config.chunk_size, config.threads, step)
        sol.evaluations += 2 * n * q.size
        sol.clamped += int(np.count_nonzero(u1x < 0))
        _check_finite(k, grid_k, ubar, wbar)
        if k in keep:
            sol.ubar[k] = ubar
            sol.wbar[k] = wbar
            sol.vbar[k] = np.einsum("ni,nij->nj", wbar, problem.sigma(xk, ubar))
        U1, W1, grid_next = ubar, wbar, grid_k

    sol.wall_seconds = time.perf_counter() - started
    return sol
