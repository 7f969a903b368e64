"""Reference solutions for the builtin benchmarks.

* Burgers (b = -u, sigma = eps): Cole-Hopf,
  ``u(t, x) = E[H(X) phi(X)] / E[phi(X)]`` with ``X = x + eps B_{T-t}`` and
  ``phi(y) = exp(-eps^-2 int_0^y H)``.
* Deterministic KPZ (f = nu/2 |z|^2): ``u(t, x) = nu^-1 log E[exp(nu H(x + sigma B_{T-t}))]``.
* Porous media: ``u(t, x) = (4/3t) cos^2(pi x / L)``.

Gaussian expectations use Gauss-Hermite rules (probabilists' normalization)
or a trained quantizer. Exponentials are shifted by their maximum before
the ratio or the logarithm is taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.special import roots_hermitenorm

from .problems import Terminal, sine_terminal
from .quantizer import QuantizerGrid

_CHUNK = 1 << 22  # target size of (points x nodes) temporaries


class ReferenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Quadrature:
    """Nodes and weights integrating against N(0, 1) (or N(0, I_d) for a quantizer)."""

    kind: str
    nodes: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    @classmethod
    def gauss_hermite(cls, n: int) -> "Quadrature":
        if n < 1:
            raise ValueError("need at least one node")
        x, w = roots_hermitenorm(n)
        # exact symmetry makes odd moments vanish to rounding
        x = 0.5 * (x - x[::-1])
        w = 0.5 * (w + w[::-1])
        return cls(f"gauss_hermite({n})", x[:, None], w / w.sum())

    @classmethod
    def from_quantizer(cls, grid: QuantizerGrid) -> "Quadrature":
        return cls(f"quantizer({grid.size})", np.asarray(grid.points), np.asarray(grid.weights))

    @property
    def dimension(self) -> int:
        return self.nodes.shape[1]

    def tensor(self, d: int) -> "Quadrature":
        """Tensor-product rule in dimension d built from a 1-D rule."""
        if self.dimension != 1:
            raise ValueError("tensor products are built from 1-D rules")
        grids = np.meshgrid(*([self.nodes[:, 0]] * d), indexing="ij")
        wgrids = np.meshgrid(*([self.weights] * d), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        return Quadrature(f"{self.kind}^{d}", nodes, weights)

    def expect(self, fn) -> float:
        return float(np.asarray(fn(self.nodes)) @ self.weights)


def _as_points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return x.reshape(-1, d)


def _chunks(n: int, q: int):
    step = max(1, _CHUNK // max(q, 1))
    for s in range(0, n, step):
        yield slice(s, min(s + step, n))


def _primitive(terminal: Terminal, lo: float, hi: float):
    """int_0^y H for y in [lo, hi]: closed form when known, else cumulative Simpson."""
    if terminal.primitive is not None:
        return terminal.primitive
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    n = int(math.ceil((hi - lo) / 1e-4)) + 1
    ys = np.linspace(lo, hi, n)
    vals = np.asarray(terminal.value(ys[:, None]), dtype=float)
    cum = cumulative_simpson(vals, x=ys, initial=0.0)
    cum = cum - np.interp(0.0, ys, cum)
    return lambda y: np.interp(y, ys, cum)


def burgers_exact(eps: float, H, t: float, x, T: float, quad: Quadrature | None = None) -> np.ndarray:
    """Cole-Hopf solution of ``u_t + eps^2/2 u_xx - u u_x = 0``, ``u(T) = H``."""
    if t > T:
        raise ValueError("t must not exceed T")
    terminal = H if isinstance(H, Terminal) else (sine_terminal() if H is None else Terminal("custom", H))
    pts = _as_points(x, 1)[:, 0]
    if t == T:
        return np.asarray(terminal.value(pts[:, None]), dtype=float)
    quad = quad or Quadrature.gauss_hermite(200)
    spread = eps * math.sqrt(T - t)
    z = quad.nodes[:, 0]
    reach = spread * np.max(np.abs(z)) if z.size else 0.0
    prim = _primitive(terminal, pts.min() - reach, pts.max() + reach)
    out = np.empty(pts.size)
    for sl in _chunks(pts.size, z.size):
        y = pts[sl, None] + spread * z[None, :]
        logphi = -np.asarray(prim(y), dtype=float) / eps**2
        logphi -= logphi.max(axis=1, keepdims=True)
        phi = np.exp(logphi)
        den = phi @ quad.weights
        if np.any(den <= 0) or not np.all(np.isfinite(den)):
            raise ReferenceError("Cole-Hopf denominator underflowed")
        hv = np.asarray(terminal.value(y.reshape(-1, 1)), dtype=float).reshape(y.shape)
        out[sl] = ((hv * phi) @ quad.weights) / den
    return out


def kpz_exact(nu: float, sigma, H, t: float, x, T: float, quad: Quadrature | None = None) -> np.ndarray:
    """Log-exponential solution of ``u_t + 1/2 tr(a D^2 u) + nu/2 |grad u sigma|^2 = 0``."""
    if t > T:
        raise ValueError("t must not exceed T")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    value = H.value if isinstance(H, Terminal) else H
    pts = _as_points(x, d)
    if t == T:
        return np.asarray(value(pts), dtype=float)
    quad = quad or Quadrature.gauss_hermite(200)
    if quad.dimension == 1 and d > 1:
        quad = quad.tensor(d)
    shift = math.sqrt(T - t) * quad.nodes @ sigma.T  # (q, d)
    out = np.empty(len(pts))
    for sl in _chunks(len(pts), len(shift)):
        y = pts[sl, None, :] + shift[None, :, :]
        e = nu * np.asarray(value(y.reshape(-1, d)), dtype=float).reshape(y.shape[:2])
        m = e.max(axis=1, keepdims=True)
        s = np.exp(e - m) @ quad.weights
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ReferenceError("KPZ expectation overflowed")
        out[sl] = (m[:, 0] + np.log(s)) / nu
    return out


def kpz_exact_periodic(nu: float, sigma, H, t: float, T: float, n: int, period: float = 1.0) -> np.ndarray:
    """KPZ reference on the full periodic lattice with n nodes per axis.

    The heat semigroup acts diagonally on Fourier modes, so ``E[w(x + sigma B_tau)]``
    for ``w = exp(nu H)`` is an FFT multiplication by ``exp(-2 pi^2 tau k^T a k / P^2)``.
    Returns an array of shape (n,)*d indexed [i_1, ..., i_d] with x = i * period / n.
    """
    if t > T:
        raise ValueError("t must not exceed T")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    value = H.value if isinstance(H, Terminal) else H
    axes = np.meshgrid(*([np.arange(n) * (period / n)] * d), indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=1)
    e = nu * np.asarray(value(pts), dtype=float).reshape((n,) * d)
    m = e.max()
    w = np.exp(e - m)
    a = sigma @ sigma.T
    freqs = np.meshgrid(*([np.fft.fftfreq(n, d=period / n)] * d), indexing="ij")
    k = np.stack(freqs, axis=-1)
    quad_form = np.einsum("...i,ij,...j->...", k, a, k)
    mult = np.exp(-0.5 * (2 * math.pi) ** 2 * (T - t) * quad_form)
    smooth = np.real(np.fft.ifftn(np.fft.fftn(w) * mult))
    if np.any(smooth <= 0):
        raise ReferenceError("spectral KPZ expectation is not positive; refine n")
    return (m + np.log(smooth)) / nu


def _porous_check(t):
    if np.any(np.asarray(t) <= 0):
        raise ValueError("porous-media solution is defined for t > 0 only")


def porous_exact(L: float, t: float, x) -> np.ndarray:
    _porous_check(t)
    return (4.0 / (3.0 * t)) * np.cos(math.pi * np.asarray(x, dtype=float) / L) ** 2


def porous_exact_grad(L: float, t: float, x) -> np.ndarray:
    _porous_check(t)
    k = math.pi / L
    x = np.asarray(x, dtype=float)
    return -(8.0 * math.pi / (3.0 * L * t)) * np.cos(k * x) * np.sin(k * x)


def reference_gradient(u, t: float, x, step: float, sigma=None) -> np.ndarray:
    """Central-difference gradient of ``u(t, x)`` (x: (n, d) -> (n,)), times sigma(x, u).

    Returns ``grad u`` when ``sigma`` is None, else ``grad u . sigma(x, u(t, x))``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    g = np.empty((n, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        g[:, i] = (np.asarray(u(t, x + e)) - np.asarray(u(t, x - e))) / (2 * step)
    if sigma is None:
        return g
    s = np.asarray(sigma(x, np.asarray(u(t, x), dtype=float)), dtype=float)
    return np.einsum("ni,nij->nj", g, np.broadcast_to(s, (n, d, d)))


@dataclass
class ReferenceModel:
    """Exact solution of a builtin problem: value, gradient and v = grad u . sigma."""

    name: str
    u: object  # (t, x (n, d)) -> (n,)
    grad: object  # (t, x) -> (n, d)
    sigma: object  # (x, y) -> (n, d, d)
    on_grid: object = None  # optional fast path (t, SpatialGrid) -> (n,)

    def v(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = self.grad(t, x)
        return np.einsum("ni,nij->nj", g, self.sigma(x, self.u(t, x)))

    def values(self, t, grid):
        if self.on_grid is not None:
            return self.on_grid(t, grid)
        return self.u(t, grid.coords)


def reference_model(problem, T: float, fd_step: float = 1e-4) -> ReferenceModel:
    """Reference solution for a builtin problem (raises for problems without one)."""
    name = problem.name
    if name.startswith("burgers"):
        eps = float(problem.params["epsilon"])
        term = problem.terminal
        quad = Quadrature.gauss_hermite(200)

        def u(t, x):
            return burgers_exact(eps, term, t, np.asarray(x)[..., 0], T, quad)

        return ReferenceModel(name, u, lambda t, x: reference_gradient(u, t, x, fd_step), problem.sigma)
    if name == "kpz":
        nu = float(problem.params["nu"])
        s = np.asarray(problem.params["sigma"], dtype=float)
        term = problem.terminal
        quad = Quadrature.gauss_hermite(160)

        def u(t, x):
            return kpz_exact(nu, s, term, t, x, T, quad)

        def on_grid(t, grid):
            if not grid.periodic or len(set(grid.counts)) != 1:
                return u(t, grid.coords)
            n = grid.counts[0]
            # the slice enumerates the first coordinate fastest: Fortran order
            return kpz_exact_periodic(nu, s, term, t, T, n, period=n * grid.delta).ravel(order="F")

        return ReferenceModel(name, u, lambda t, x: reference_gradient(u, t, x, fd_step), problem.sigma, on_grid)
    if name.startswith("porous"):
        L = float(problem.params["L"])
        return ReferenceModel(
            name,
            lambda t, x: porous_exact(L, t, np.asarray(x)[..., 0]),
            lambda t, x: porous_exact_grad(L, t, np.asarray(x)),
            problem.sigma,
        )
    raise ValueError(f"no reference solution for problem {name!r}")
