"""Error budgets, parameter schedules, comparisons and convergence studies."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec
from .quantizer import get_quantizer
from .solver import Solution, SolverConfig, solve


@dataclass(frozen=True)
class ErrorBudget:
    """The five analytic error terms; ``global2`` is the sum of their squares."""

    e_time: float
    e_space: float
    e_trunc: float
    e_quantiz: float
    e_gradient: float
    p: float

    @property
    def global2(self) -> float:
        return self.e_time**2 + self.e_space**2 + self.e_trunc**2 + self.e_quantiz**2 + self.e_gradient**2

    @property
    def global_(self) -> float:
        return math.sqrt(self.global2)


def error_budget(
    h: float,
    delta: float,
    M: int,
    d: int,
    R: float = 1.0,
    rho: float = math.inf,
    p: float = 4.0,
    drift_depends_on_z: bool = True,
) -> ErrorBudget:
    if not (h > 0 and delta > 0 and M >= 1 and d >= 1 and R > 0 and rho > 0):
        raise ValueError("budget parameters must be positive")
    if p < 2:
        raise ValueError("p must be >= 2")
    trunc = 0.0 if math.isinf(rho) else R / (R + rho)
    grad = 0.0
    if drift_depends_on_z:
        grad = h ** (p / 2 + d / 4 - 0.5) * M ** (-p / d) * delta ** (-p - d / 2)
    return ErrorBudget(
        e_time=math.sqrt(h),
        e_space=delta / h,
        e_trunc=trunc,
        e_quantiz=h**-0.5 * M ** (-1.0 / d),
        e_gradient=grad,
        p=p,
    )


@dataclass(frozen=True)
class Schedule:
    delta: float
    M: int
    rho: float
    beta: float


def schedule(h: float, gamma: float = 0.5, p: float = 4.0, eta_extra: float = 0.25, R: float = 1.0, d: int = 1) -> Schedule:
    """``delta = h^(1+gamma)``, ``rho = R h^(-1/2)``, ``M = ceil(h^(-(1+beta) d/2))``."""
    if gamma < 0 or p < 2 or eta_extra <= 0:
        raise ValueError("need gamma >= 0, p >= 2, eta_extra > 0")
    beta = 2 * gamma + (d / 2 + 1 + gamma * d) / p + eta_extra
    # guard against ceil(83.0000000001) style rounding
    M = math.ceil(h ** (-(1 + beta) * d / 2) - 1e-9)
    return Schedule(h ** (1 + gamma), M, R * h**-0.5, beta)


def fit_to_period(delta: float, period: float) -> float:
    """Largest mesh step <= delta that divides the period."""
    return period / math.ceil(period / delta - 1e-9)


@dataclass
class ComparisonReport:
    k: int
    t: float
    field: str
    max_abs: float
    max_rel_pointwise: float
    max_rel_to_max: float
    l2: float
    nodes: int
    seconds: float = 0.0


def compare_arrays(values, ref, coords, delta: float, mask=None, rel_floor: float = 1e-12) -> dict:
    """Error norms of node values against reference values (rows may be vectors)."""
    values = np.asarray(values, dtype=float).reshape(len(coords), -1)
    ref = np.asarray(ref, dtype=float).reshape(len(coords), -1)
    if values.shape != ref.shape:
        raise ValueError(f"field shapes differ: {values.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(len(coords), dtype=bool)
    err = np.linalg.norm(values[mask] - ref[mask], axis=1)
    mag = np.linalg.norm(ref[mask], axis=1)
    keep = mag > rel_floor
    max_abs = float(err.max()) if err.size else 0.0
    refmax = float(mag.max()) if mag.size else 0.0
    d = np.asarray(coords).shape[1]
    return {
        "max_abs": max_abs,
        "max_rel_pointwise": float((err[keep] / mag[keep]).max()) if keep.any() else 0.0,
        "max_rel_to_max": max_abs / refmax if refmax > 0 else (0.0 if max_abs == 0 else math.inf),
        "l2": float(math.sqrt(delta**d * np.sum(err**2))),
        "nodes": int(mask.sum()),
    }


def compare(solution: Solution, reference, k: int = 0, window=None, field: str = "ubar", rel_floor: float = 1e-12) -> ComparisonReport:
    """Node-wise errors of one slice against a reference.

    ``reference`` is a callable ``(t, x) -> values``, an object with a
    ``values(t, grid)`` method, or an array aligned with the slice nodes.
    ``window`` = (lower, upper) restricts the nodes; it defaults to
    [-R, R]^d on truncated grids and to the whole slice otherwise. Relative
    errors are reported both pointwise (nodes with ``|ref| > rel_floor``) and
    normalized by ``max |ref|``.
    """
    started = time.perf_counter()
    grid = solution.grid(k)
    t = float(solution.times[k])
    if hasattr(reference, "values") and not isinstance(reference, np.ndarray):
        ref = reference.values(t, grid)
    elif callable(reference):
        ref = reference(t, grid.coords)
    else:
        ref = reference
    spec = solution.config.grid
    if window is None and not spec.periodic:
        window = (-spec.R, spec.R)
    mask = None if window is None else grid.window_mask(*window)
    stats = compare_arrays(getattr(solution, field)[k], ref, grid.coords, grid.delta, mask, rel_floor)
    return ComparisonReport(k=k, t=t, field=field, seconds=time.perf_counter() - started, **stats)


STUDY_COLUMNS = (
    "h", "delta", "M", "rho", "sup_abs_err", "sup_rel_err", "l2_err",
    "budget_time", "budget_space", "budget_trunc", "budget_quantiz", "budget_gradient", "budget_global",
    "wall_seconds",
)


@dataclass
class ConvergenceStudy:
    rows: list = field(default_factory=list)
    slope: float = math.nan
    slope_residual: float = math.nan
    exact: bool = False

    def as_table(self) -> list[tuple]:
        return [tuple(r[c] for c in STUDY_COLUMNS) for r in self.rows]


def convergence_study(
    problem,
    T: float,
    h_list,
    reference,
    gamma: float = 0.5,
    p: float = 4.0,
    eta_extra: float = 0.25,
    R: float = 1.0,
    seed: int = 0,
    variant: str = "full",
    window=None,
    threads: int = 1,
    quantizer_schedule=None,
    cache_dir=None,
) -> ConvergenceStudy:
    """One solve per h with the scheduled (delta, M, rho); error measured at t = 0.

    Periodic problems use the whole period and adjust delta down to divide it.
    The slope is a least-squares fit of log(sup error) against log(h).
    """
    h_list = [float(h) for h in h_list]
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h list must be strictly decreasing")
    d = problem.dimension
    study = ConvergenceStudy()
    for h in h_list:
        N = int(round(T / h))
        if abs(N * h - T) > 1e-9 * T:
            raise ValueError(f"h={h} does not divide T={T}")
        sch = schedule(h, gamma, p, eta_extra, R, d)
        if problem.period is not None:
            if len(set(problem.period)) != 1:
                raise NotImplementedError("studies on periodic problems need equal periods per axis")
            delta = fit_to_period(sch.delta, problem.period[0])
            spec = GridSpec(d, delta, R=R, period=problem.period)
            rho = math.inf
        else:
            delta, rho = sch.delta, sch.rho
            spec = GridSpec(d, delta, R=R, rho=rho)
        q = get_quantizer(d, sch.M, seed=seed, schedule=quantizer_schedule, cache_dir=cache_dir)
        cfg = SolverConfig(T=T, N=N, grid=spec, quantizer=q, variant=variant, threads=threads)
        started = time.perf_counter()
        sol = solve(problem, cfg)
        wall = time.perf_counter() - started
        rep = compare(sol, reference, 0, window=window)
        bud = error_budget(h, delta, sch.M, d, R, rho, p, problem.drift_depends_on_z)
        study.rows.append({
            "h": h, "delta": delta, "M": sch.M, "rho": rho,
            "sup_abs_err": rep.max_abs, "sup_rel_err": rep.max_rel_to_max, "l2_err": rep.l2,
            "budget_time": bud.e_time, "budget_space": bud.e_space, "budget_trunc": bud.e_trunc,
            "budget_quantiz": bud.e_quantiz, "budget_gradient": bud.e_gradient, "budget_global": bud.global_,
            "wall_seconds": wall,
        })
    errs = np.array([r["sup_abs_err"] for r in study.rows])
    if np.all(errs == 0):
        study.exact = True
    elif len(errs) >= 2 and np.all(errs > 0):
        x = np.log(h_list)
        coef, res, *_ = np.polyfit(x, np.log(errs), 1, full=True)
        study.slope = float(coef[0])
        study.slope_residual = float(res[0]) if len(res) else 0.0
    return study
