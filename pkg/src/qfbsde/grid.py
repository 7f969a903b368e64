"""Cartesian spatial grids, lattice projections and truncation.

Nodes are stored as integer multi-indices m, with coordinates m * delta, so
no floating-point drift accumulates. A truncated slice holds the indices
``-n..n`` on every axis, ``n = floor(r / delta)``, with ``r = R`` at the
initial time and ``r = R + rho`` afterwards. A periodic slice holds ``0..P/delta - 1``
and wraps instead of clamping.

Flat node indices are row-major over the multi-index with the *first*
coordinate varying fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_FLOOR_EPS = 1e-9


class OutsideGridError(ValueError):
    """A lattice point is not a node of the requested slice."""


def _floor_ratio(r: float, delta: float) -> int:
    # r/delta is often an integer up to rounding (e.g. 0.3/0.1); absorb that
    return math.floor(r / delta + _FLOOR_EPS)


def lattice_index(x, delta: float) -> np.ndarray:
    """Integer multi-index of the nearest lattice node, ``floor(x/delta + 1/2)``.

    Exact half-cell points go to the upper node.
    """
    return np.floor(np.asarray(x, dtype=float) / delta + 0.5).astype(np.int64)


def project_infinite(delta: float, x) -> np.ndarray:
    """Projection onto the unbounded lattice delta * Z^d."""
    return lattice_index(x, delta) * delta


def truncate(r: float, delta: float, y) -> np.ndarray:
    """Clamp a lattice point onto the hypercube [-delta*floor(r/delta), +delta*floor(r/delta)]^d."""
    bound = delta * _floor_ratio(r, delta)
    return np.clip(np.asarray(y, dtype=float), -bound, bound)


@dataclass(frozen=True)
class GridSpec:
    """Geometry parameters shared by all time slices.

    ``rho = inf`` means untruncated. Setting ``period`` switches every slice to
    periodic wrapping, which replaces truncation entirely.
    """

    dimension: int
    delta: float
    R: float = 1.0
    rho: float = math.inf
    eta: float = 0.0
    period: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.R > 0:
            raise ValueError("R must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive (or inf)")
        if not 0 <= self.eta < 0.5:
            raise ValueError("eta must lie in [0, 1/2)")
        if self.period is not None:
            per = tuple(float(p) for p in np.broadcast_to(self.period, (self.dimension,)))
            for p in per:
                ratio = p / self.delta
                if not p > 0 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                    raise ValueError(f"period {p} is not an integer multiple of delta={self.delta}")
            object.__setattr__(self, "period", per)

    @property
    def periodic(self) -> bool:
        return self.period is not None

    def radius(self, k: int) -> float:
        return self.R if k == 0 else self.R + self.rho

    def bound_index(self, k: int) -> int:
        r = self.radius(k)
        if math.isinf(r):
            raise ValueError("untruncated non-periodic grids have infinitely many nodes")
        return _floor_ratio(r, self.delta)

    def slice_grid(self, k: int) -> "SpatialGrid":
        """Node set of time slice k (all slices k >= 1 share one geometry)."""
        if self.eta != 0:
            raise NotImplementedError("only eta = 0 slice geometries are implemented")
        if self.periodic:
            counts = tuple(int(round(p / self.delta)) for p in self.period)
            return SpatialGrid(self.dimension, self.delta, (0,) * self.dimension, counts, periodic=True)
        n = self.bound_index(0 if k == 0 else 1)
        return SpatialGrid(self.dimension, self.delta, (-n,) * self.dimension, (2 * n + 1,) * self.dimension)

    def regime_warnings(self, h: float) -> list[str]:
        out = []
        if not self.delta**2 < h:
            out.append(f"delta^2 = {self.delta ** 2:.3g} is not below h = {h:.3g}")
        if not self.periodic and self.rho < 1:
            out.append(f"rho = {self.rho} < 1")
        return out


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Nodes of one time slice: a box of integer multi-indices."""

    dimension: int
    delta: float
    lo: tuple[int, ...]
    counts: tuple[int, ...]
    periodic: bool = False
    _strides: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        strides = np.cumprod((1,) + tuple(self.counts[:-1])).astype(np.int64)
        object.__setattr__(self, "_strides", strides)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def hi(self) -> tuple[int, ...]:
        return tuple(lo + c - 1 for lo, c in zip(self.lo, self.counts))

    def same_geometry(self, other: "SpatialGrid") -> bool:
        return (
            self.delta == other.delta
            and self.lo == other.lo
            and self.counts == other.counts
            and self.periodic == other.periodic
        )

    @cached_property
    def multi_indices(self) -> np.ndarray:
        flat = np.arange(self.size, dtype=np.int64)
        return self.multi_index(flat)

    @cached_property
    def coords(self) -> np.ndarray:
        c = self.multi_indices * self.delta
        c.setflags(write=False)
        return c

    def multi_index(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        return (flat[..., None] // self._strides) % counts + np.asarray(self.lo, dtype=np.int64)

    def flat_index(self, multi) -> np.ndarray:
        """Flat index of in-range multi-indices (no projection)."""
        m = np.asarray(multi, dtype=np.int64) - np.asarray(self.lo, dtype=np.int64)
        return m @ self._strides

    def inside_index(self, multi) -> np.ndarray:
        m = np.asarray(multi, dtype=np.int64)
        return np.all((m >= np.asarray(self.lo)) & (m <= np.asarray(self.hi)), axis=-1)

    def project_multi(self, multi) -> np.ndarray:
        m = np.asarray(multi, dtype=np.int64)
        lo = np.asarray(self.lo, dtype=np.int64)
        if self.periodic:
            return np.mod(m - lo, np.asarray(self.counts)) + lo
        return np.clip(m, lo, np.asarray(self.hi, dtype=np.int64))

    def locate(self, x) -> np.ndarray:
        """Flat index of the projection of ``x`` (shape (..., d)) onto this slice."""
        return self.flat_index(self.project_multi(lattice_index(x, self.delta)))

    def project(self, x) -> np.ndarray:
        return self.project_multi(lattice_index(x, self.delta)) * self.delta

    def contains(self, x) -> np.ndarray:
        """Pre-projection membership of ``x`` in the half-open domain of the slice.

        Defined through the lattice index, so membership of x and of its
        lattice projection always agree. Periodic slices contain everything.
        """
        m = lattice_index(x, self.delta)
        if self.periodic:
            return np.ones(m.shape[:-1], dtype=bool)
        return self.inside_index(m)

    def node_of(self, point) -> int:
        m = lattice_index(point, self.delta)
        if not np.allclose(m * self.delta, point, rtol=0, atol=1e-9 * self.delta):
            raise OutsideGridError(f"{point} is not a lattice point")
        if self.periodic:
            m = self.project_multi(m)
        elif not self.inside_index(m):
            raise OutsideGridError(f"{point} lies outside the slice; project it first")
        return int(self.flat_index(m))

    def enumerate(self):
        for i, c in enumerate(self.coords):
            yield i, c

    def displacement(self, a, b) -> np.ndarray:
        """b - a, taken modulo the period on periodic slices."""
        diff = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        if self.periodic:
            per = np.asarray(self.counts) * self.delta
            diff = diff - per * np.round(diff / per)
        return diff

    def window_mask(self, lower, upper) -> np.ndarray:
        """Nodes with every coordinate in [lower, upper] (periodic coords taken as stored)."""
        c = self.coords
        return np.all((c >= np.asarray(lower) - 1e-12) & (c <= np.asarray(upper) + 1e-12), axis=1)


def project_step(spec: GridSpec, k: int, x) -> np.ndarray:
    """Projection onto slice k: lattice rounding, then clamp (or wrap if periodic)."""
    return spec.slice_grid(k).project(x)


def enumerate_nodes(spec: GridSpec, k: int):
    return spec.slice_grid(k).enumerate()


def node_of(spec: GridSpec, k: int, point) -> int:
    return spec.slice_grid(k).node_of(point)


def interp1d(values, grid: SpatialGrid, x) -> np.ndarray:
    """Piecewise-linear interpolation of node values on a 1-D slice.

    ``values`` has one leading entry per node (trailing axes are carried
    along); ``x`` holds scalar positions of any shape. Points outside a truncated slice are clamped to its span; periodic slices
    wrap. At a node the node value is returned exactly.
    """
    if grid.dimension != 1:
        raise NotImplementedError("linear interpolation is only available in dimension 1")
    values = np.asarray(values, dtype=float)
    x = np.asarray(x, dtype=float)
    t = x / grid.delta
    if not grid.periodic:
        t = np.clip(t, grid.lo[0], grid.hi[0])
    base = np.floor(t)
    near = np.round(t)
    on_node = np.abs(t - near) < 1e-9
    base = np.where(on_node, near, base)
    frac = np.where(on_node, 0.0, t - base)
    m0 = base.astype(np.int64)
    m1 = m0 + 1
    n = grid.counts[0]
    lo = grid.lo[0]
    if grid.periodic:
        i0 = np.mod(m0 - lo, n)
        i1 = np.mod(m1 - lo, n)
    else:
        i0 = m0 - lo
        i1 = np.minimum(m1 - lo, n - 1)
    if values.ndim > 1:
        extra = (1,) * (values.ndim - 1)
        frac = frac.reshape(frac.shape + extra)
        on_node = on_node.reshape(on_node.shape + extra)
    return np.where(on_node, values[i0], (1.0 - frac) * values[i0] + frac * values[i1])
