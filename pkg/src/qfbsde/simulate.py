"""Discrete forward chain (X, Y, Z) driven by a computed solution.

``X_{k+1} = Pi_{k+1}(X_k + T(t_k, X_k))`` with the same transition the
solver used, ``Y_k = u(t_k, X_k)`` and ``Z_k = v(t_k, X_k)`` read from the
solution tables. The stopping index ``tau`` is the first step whose
pre-projection point leaves the slice domain; ``N + 1`` stands for +inf.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .problems import Problem
from .quantizer import QuantizerGrid, nearest_indices
from .solver import Solution, Variant

PATH_BLOCK = 1024  # paths per RNG stream; fixed so results never depend on scheduling


class MissingSlices(ValueError):
    pass


@dataclass
class PathEnsemble:
    x0: np.ndarray
    seed: int
    node_index: np.ndarray  # (P, N+1) flat node index in slice k
    X: np.ndarray  # (P, N+1, d)
    Y: np.ndarray  # (P, N+1)
    Z: np.ndarray  # (P, N+1, d)
    tau: np.ndarray  # (P,), N+1 means never stopped
    increments: np.ndarray  # (P, N, d) Gaussian draws
    quantized: np.ndarray  # (P, N, d) their quantized versions
    transition_norm: np.ndarray  # (P, N) |T(t_k, X_k)|
    jump_excess: np.ndarray  # (P, N) |X_{k+1} - X_k| - |T| - delta

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1] - 1

    def stopped(self) -> np.ndarray:
        return self.tau <= self.N


def _tables(solution: Solution):
    if not solution.has_all_slices():
        raise MissingSlices("path simulation needs every slice; solve with store_all_slices=True")
    if solution.config.variant is Variant.DIFFERENTIATED:
        raise NotImplementedError("path simulation is defined for the single-field variants")


def _target(problem, solution, k, idx_k, idx_next, x, y):
    """Pre-projection point ``x + T(t_k, x)`` for unscaled quantizer points ``y``.

    The floating-point operations mirror the backward sweep so that both land
    on the same node even at projection ties.
    """
    cfg = solution.config
    u1 = solution.ubar[k + 1][idx_next]
    if k in solution.vhat:
        vz = solution.vhat[k][idx_k]
    else:
        vz = solution.vbar[k + 1][idx_next]
    drift = np.asarray(problem.b(x, u1, vz), dtype=float)
    noise = math.sqrt(cfg.h) * np.einsum("nij,nj->ni", problem.sigma(x, u1), y)
    return x + drift * cfg.h + noise


def simulate(
    solution: Solution,
    problem: Problem,
    quantizer: QuantizerGrid,
    x0,
    n_paths: int,
    seed: int,
) -> PathEnsemble:
    """Simulate ``n_paths`` trajectories from the node ``x0`` of the initial slice."""
    _tables(solution)
    cfg = solution.config
    N, h, d = cfg.N, cfg.h, cfg.grid.dimension
    grids = [solution.grid(k) for k in range(N + 1)]
    x0 = np.asarray(x0, dtype=float).reshape(d)
    grids[0].node_of(x0)  # raises unless x0 is a node of slice 0

    node_index = np.empty((n_paths, N + 1), dtype=np.int64)
    X = np.empty((n_paths, N + 1, d))
    tau = np.full(n_paths, N + 1, dtype=np.int64)
    increments = np.empty((n_paths, N, d))
    quantized = np.empty((n_paths, N, d))
    tnorm = np.empty((n_paths, N))
    excess = np.empty((n_paths, N))
    sqh = math.sqrt(h)

    root = np.random.SeedSequence(seed)
    for b, start in enumerate(range(0, n_paths, PATH_BLOCK)):
        sl = slice(start, min(start + PATH_BLOCK, n_paths))
        n = sl.stop - sl.start
        rng = np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(b,)))
        dB = sqh * rng.standard_normal((n, N, d))
        y = quantizer.points[nearest_indices(quantizer, (dB / sqh).reshape(-1, d))].reshape(n, N, d)
        increments[sl], quantized[sl] = dB, sqh * y
        x = np.broadcast_to(x0, (n, d)).copy()
        idx = grids[0].locate(x)
        X[sl, 0], node_index[sl, 0] = x, idx
        t_loc = np.full(n, N + 1, dtype=np.int64)
        for k in range(N):
            idx_next_self = grids[k + 1].locate(x)
            pre = _target(problem, solution, k, idx, idx_next_self, x, y[:, k])
            step = pre - x
            left = ~grids[k + 1].contains(pre)
            t_loc[(t_loc == N + 1) & left] = k + 1
            idx = grids[k + 1].locate(pre)
            x_new = grids[k + 1].coords[idx]
            jump = np.linalg.norm(grids[k + 1].displacement(x, x_new), axis=1)
            tnorm[sl, k] = np.linalg.norm(step, axis=1)
            excess[sl, k] = jump - tnorm[sl, k] - cfg.grid.delta
            x = x_new
            X[sl, k + 1], node_index[sl, k + 1] = x, idx
        tau[sl] = t_loc

    Y = np.stack([solution.ubar[k][node_index[:, k]] for k in range(N + 1)], axis=1)
    Z = np.stack([solution.vbar[k][node_index[:, k]] for k in range(N + 1)], axis=1)
    return PathEnsemble(x0, seed, node_index, X, Y, Z, tau, increments, quantized, tnorm, excess)


def _driver_z(solution: Solution, k: int, idx_k, idx_next):
    """The z argument the sweep gave the driver at step k."""
    if solution.config.variant is Variant.SIMPLE:
        return solution.vbar[k + 1][idx_next]
    return solution.vbar[k][idx_k]


def path_payoffs(ensemble: PathEnsemble, solution: Solution, problem: Problem) -> np.ndarray:
    """``H(X_N) + h sum_i f(X_{i-1}, u(t_i, X_{i-1}), Z_{i-1})`` per path."""
    cfg = solution.config
    pay = np.asarray(problem.H(ensemble.X[:, -1]), dtype=float).copy()
    for k in range(cfg.N):
        x = ensemble.X[:, k]
        idx_k = ensemble.node_index[:, k]
        idx_next = solution.grid(k + 1).locate(x)
        u1 = solution.ubar[k + 1][idx_next]
        pay += cfg.h * np.asarray(problem.f(x, u1, _driver_z(solution, k, idx_k, idx_next)), dtype=float)
    return pay


def feynman_kac_residual(ensemble: PathEnsemble, solution: Solution, problem: Problem) -> tuple[float, float]:
    """Monte Carlo mean of payoff minus ``u(0, x0)``, and its standard error."""
    pay = path_payoffs(ensemble, solution, problem)
    u0 = solution.ubar[0][solution.grid(0).node_of(ensemble.x0)]
    se = float(pay.std(ddof=1) / math.sqrt(pay.size)) if pay.size > 1 else math.inf
    return float(pay.mean() - u0), se


def exhaustive_expectation(solution: Solution, problem: Problem, quantizer: QuantizerGrid, x0) -> float:
    """Exact expected payoff by enumerating all M^N quantized outcome sequences."""
    _tables(solution)
    cfg = solution.config
    M, N, d = quantizer.size, cfg.N, cfg.grid.dimension
    if M**N > 1_000_000:
        raise ValueError("too many outcome sequences to enumerate")
    grids = [solution.grid(k) for k in range(N + 1)]
    x0 = np.asarray(x0, dtype=float).reshape(1, d)
    total = 0.0
    for seq in itertools.product(range(M), repeat=N):
        x = x0
        idx = grids[0].locate(x)
        prob, pay = 1.0, 0.0
        for k, i in enumerate(seq):
            idx_next = grids[k + 1].locate(x)
            u1 = solution.ubar[k + 1][idx_next]
            pay += cfg.h * float(problem.f(x, u1, _driver_z(solution, k, idx, idx_next))[0])
            pre = _target(problem, solution, k, idx, idx_next, x, quantizer.points[i][None, :])
            idx = grids[k + 1].locate(pre)
            x = grids[k + 1].coords[idx]
            prob *= quantizer.weights[i]
        total += prob * (float(problem.H(x)[0]) + pay)
    return total


@dataclass
class L2Report:
    gradient: float
    gradient_se: float
    value_sup: float
    value_se: float
    value_by_step: np.ndarray
    header: str = "value errors use u(t_k, X_k) from the reference PDE as a proxy for the continuous backward process"


def l2_errors(ensemble: PathEnsemble, solution: Solution, u_ref, v_ref) -> L2Report:
    """Monte Carlo L2 errors along the chain.

    gradient: ``h sum_{i<N} E|v(t_i, X_i) 1{i < tau} - v_ref(t_i, X_i)|^2``;
    value: ``max_k E|Y_{k ^ tau} - u_ref(t_{k ^ tau}, X_{k ^ tau})|^2``.
    ``u_ref(t, x)`` returns (n,), ``v_ref(t, x)`` returns (n, d).
    """
    cfg = solution.config
    N, h = cfg.N, cfg.h
    times = cfg.times
    P = ensemble.n_paths
    grad_terms = np.zeros(P)
    for i in range(N):
        alive = (i < ensemble.tau)[:, None]
        diff = np.where(alive, ensemble.Z[:, i], 0.0) - np.asarray(v_ref(times[i], ensemble.X[:, i]), dtype=float).reshape(P, -1)
        grad_terms += h * np.sum(diff**2, axis=1)
    rows = np.arange(P)
    by_k = np.empty(N + 1)
    se_k = np.empty(N + 1)
    for k in range(N + 1):
        j = np.minimum(k, ensemble.tau)
        xs = ensemble.X[rows, j]
        err = np.empty(P)
        for jj in np.unique(j):
            sel = j == jj
            err[sel] = ensemble.Y[rows[sel], jj] - np.asarray(u_ref(times[jj], xs[sel]), dtype=float)
        sq = err**2
        by_k[k] = sq.mean()
        se_k[k] = sq.std(ddof=1) / math.sqrt(P) if P > 1 else math.inf
    kmax = int(np.argmax(by_k))
    gse = float(grad_terms.std(ddof=1) / math.sqrt(P)) if P > 1 else math.inf
    return L2Report(float(grad_terms.mean()), gse, float(by_k[kmax]), float(se_k[kmax]), by_k)
