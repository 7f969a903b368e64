"""Coefficient bundles for the forward-backward system and the builtin benchmarks.

All coefficient callables are batched over nodes:

* ``b(x, y, z)``: x (n, d), y (n,), z (n, d) -> (n, d)
* ``f(x, y, z)``: -> (n,)
* ``sigma(x, y)``: -> (n, d, d)
* ``H(x)``: -> (n,), ``grad_H(x)``: -> (n, d)

The associated PDE is
``du/dt + b(x, u, v).grad u + 1/2 tr(sigma sigma^T hess u) + f(x, u, v) = 0``
with ``v = grad u . sigma(x, u)`` and ``u(T, .) = H``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Terminal:
    """Terminal condition with optional closed-form primitive (1-D only)."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    primitive: Callable[[np.ndarray], np.ndarray] | None = None
    period: tuple[float, ...] | None = None


def sine_terminal() -> Terminal:
    """H(x) = sin(2 pi x), 1-periodic."""
    return Terminal(
        "sine",
        lambda x: np.sin(TWO_PI * x[..., 0]),
        lambda x: TWO_PI * np.cos(TWO_PI * x),
        lambda y: (1.0 - np.cos(TWO_PI * y)) / TWO_PI,
        period=(1.0,),
    )


def gaussian_terminal() -> Terminal:
    """H(x) = exp(-x^2 / 2)."""
    return Terminal(
        "gaussian",
        lambda x: np.exp(-0.5 * x[..., 0] ** 2),
        lambda x: -x * np.exp(-0.5 * x**2),
        lambda y: math.sqrt(math.pi / 2) * _erf(y / math.sqrt(2.0)),
    )


def product_sine_terminal(dimension: int) -> Terminal:
    """H(x) = prod_i sin(2 pi x_i), 1-periodic in every coordinate."""

    def value(x):
        return np.prod(np.sin(TWO_PI * x), axis=-1)

    def grad(x):
        s = np.sin(TWO_PI * x)
        c = np.cos(TWO_PI * x)
        out = np.empty_like(x, dtype=float)
        for i in range(x.shape[-1]):
            others = np.prod(np.delete(s, i, axis=-1), axis=-1)
            out[..., i] = TWO_PI * c[..., i] * others
        return out

    return Terminal("product_sine", value, grad, period=(1.0,) * dimension)


def _erf(x):
    from scipy.special import erf

    return erf(x)


@dataclass(frozen=True)
class Problem:
    name: str
    dimension: int
    b: Callable
    f: Callable
    sigma: Callable
    H: Callable
    grad_H: Callable | None = None
    drift_depends_on_z: bool = True
    driver_depends_on_z: bool = True
    period: tuple[float, ...] | None = None
    lipschitz: dict = field(default_factory=dict)
    ellipticity: float | None = None
    assumption_a: bool = True
    terminal: Terminal | None = None
    params: dict = field(default_factory=dict)

    def terminal_gradient(self, x: np.ndarray, step: float) -> np.ndarray:
        """grad H at x; central differences with ``step`` if no closed form."""
        if self.grad_H is not None:
            return np.asarray(self.grad_H(x), dtype=float).reshape(x.shape)
        out = np.empty_like(x, dtype=float)
        for i in range(self.dimension):
            e = np.zeros(self.dimension)
            e[i] = step
            out[:, i] = (self.H(x + e) - self.H(x - e)) / (2 * step)
        return out

    def terminal_v(self, x: np.ndarray, step: float) -> np.ndarray:
        """v(T, x) = grad H(x) sigma(x, H(x)) as a row vector per node."""
        g = self.terminal_gradient(x, step)
        return np.einsum("ni,nij->nj", g, self.sigma(x, self.H(x)))


@dataclass(frozen=True)
class DifferentiatedProblem:
    """Coupled system for (u, w = grad u) solved jointly.

    Both fields share the diffusion ``sigma(x, u)``; each has its own drift and
    driver, all evaluated at the predictors ``(u, w)`` of the next slice.
    """

    name: str
    dimension: int
    drift_u: Callable
    drift_w: Callable
    sigma: Callable
    driver_u: Callable
    driver_w: Callable
    H: Callable
    H_w: Callable
    period: tuple[float, ...] | None = None
    params: dict = field(default_factory=dict)


def _const_sigma(eps: float, d: int = 1):
    def sigma(x, y):
        return np.broadcast_to(eps * np.eye(d), (x.shape[0], d, d))

    return sigma


def _resolve_terminal(H) -> Terminal:
    if isinstance(H, Terminal):
        return H
    if H == "sine":
        return sine_terminal()
    if H == "gaussian":
        return gaussian_terminal()
    if callable(H):
        return Terminal("custom", H)
    raise ValueError(f"unknown terminal {H!r}")


def make_burgers_coupled(eps: float, H="sine") -> Problem:
    """Burgers with the nonlinearity as drift: b = -y, sigma = eps, f = 0."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    term = _resolve_terminal(H)
    return Problem(
        name="burgers_coupled",
        dimension=1,
        b=lambda x, y, z: -np.asarray(y, dtype=float)[:, None],
        f=lambda x, y, z: np.zeros(x.shape[0]),
        sigma=_const_sigma(eps),
        H=term.value,
        grad_H=term.grad,
        drift_depends_on_z=False,
        driver_depends_on_z=False,
        period=term.period,
        lipschitz={"b_x": 0.0, "b_y": 1.0, "b_z": 0.0, "f_x": 0.0, "f_y": 0.0, "f_z": 0.0},
        ellipticity=eps**2,
        terminal=term,
        params={"epsilon": eps, "terminal": term.name, "form": "coupled"},
    )


def make_burgers_backward(eps: float, H="sine") -> Problem:
    """Burgers with the nonlinearity as driver: b = 0, f = -y z / eps (quadratic)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    term = _resolve_terminal(H)
    return Problem(
        name="burgers_backward",
        dimension=1,
        b=lambda x, y, z: np.zeros_like(x, dtype=float),
        f=lambda x, y, z: -y * z[:, 0] / eps,
        sigma=_const_sigma(eps),
        H=term.value,
        grad_H=term.grad,
        drift_depends_on_z=False,
        driver_depends_on_z=True,
        period=term.period,
        lipschitz={"b_x": 0.0, "b_y": 0.0, "b_z": 0.0},
        ellipticity=eps**2,
        assumption_a=False,
        terminal=term,
        params={"epsilon": eps, "terminal": term.name, "form": "backward"},
    )


def kpz_sigma(theta: float) -> np.ndarray:
    """Lower Cholesky factor of [[1, theta], [theta, 1]]."""
    return np.linalg.cholesky(np.array([[1.0, theta], [theta, 1.0]]))


def make_kpz(nu: float, sigma_matrix) -> Problem:
    """Deterministic KPZ: b = 0, f = nu/2 |z|^2, constant sigma, product-sine terminal."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    s = np.array(sigma_matrix, dtype=float)
    d = s.shape[0]
    if s.shape != (d, d):
        raise ValueError("sigma must be square")
    a = s @ s.T
    if np.linalg.eigvalsh(a).min() <= 0:
        raise ValueError("sigma sigma^T must be positive definite")
    s.setflags(write=False)
    term = product_sine_terminal(d)
    return Problem(
        name="kpz",
        dimension=d,
        b=lambda x, y, z: np.zeros_like(x, dtype=float),
        f=lambda x, y, z: 0.5 * nu * np.sum(z * z, axis=1),
        sigma=lambda x, y: np.broadcast_to(s, (x.shape[0], d, d)),
        H=term.value,
        grad_H=term.grad,
        drift_depends_on_z=False,
        driver_depends_on_z=True,
        period=term.period,
        lipschitz={"b_x": 0.0, "b_y": 0.0, "b_z": 0.0, "f_x": 0.0, "f_y": 0.0},
        ellipticity=float(np.linalg.eigvalsh(a).min()),
        assumption_a=False,
        terminal=term,
        params={"nu": nu, "sigma": s.tolist()},
    )


def porous_terminal(L: float, T: float) -> Terminal:
    c = 4.0 / (3.0 * T)
    k = math.pi / L
    return Terminal(
        "porous",
        lambda x: c * np.cos(k * x[..., 0]) ** 2,
        lambda x: -2.0 * c * k * np.cos(k * x) * np.sin(k * x),
        period=(L,),
    )


def _porous_sigma(x, y):
    return np.sqrt(2.0 * np.maximum(y, 0.0))[:, None, None]


def make_porous_media(L: float = 2 * math.sqrt(2) * math.pi, T: float = 1.0) -> Problem:
    """Porous media: sigma = sqrt(2 y+), drift = z / sigma (= du/dx), f = y^2."""
    if not (L > 0 and T > 0):
        raise ValueError("L and T must be positive")
    term = porous_terminal(L, T)

    def b(x, y, z):
        s = np.sqrt(2.0 * np.maximum(y, 0.0))
        safe = np.where(s > 0, s, 1.0)
        return np.where(s > 0, z[:, 0] / safe, 0.0)[:, None]

    return Problem(
        name="porous",
        dimension=1,
        b=b,
        f=lambda x, y, z: y**2,
        sigma=_porous_sigma,
        H=term.value,
        grad_H=term.grad,
        drift_depends_on_z=True,
        driver_depends_on_z=False,
        period=term.period,
        assumption_a=False,
        terminal=term,
        params={"L": L, "T": T},
    )


def make_porous_differentiated(L: float = 2 * math.sqrt(2) * math.pi, T: float = 1.0) -> DifferentiatedProblem:
    """Porous media and its x-derivative w as a two-field system.

    u: drift w, driver u^2; w: drift 3w, driver 2uw; shared sigma = sqrt(2u+).
    """
    term = porous_terminal(L, T)
    return DifferentiatedProblem(
        name="porous_differentiated",
        dimension=1,
        drift_u=lambda x, u, w: w,
        drift_w=lambda x, u, w: 3.0 * w,
        sigma=_porous_sigma,
        driver_u=lambda x, u, w: u**2,
        driver_w=lambda x, u, w: 2.0 * u[:, None] * w,
        H=term.value,
        H_w=term.grad,
        period=(L,),
        params={"L": L, "T": T},
    )


# --- validation ----------------------------------------------------------


@dataclass
class ValidationReport:
    problem: str
    estimates: dict
    violations: list
    finite: bool

    @property
    def ok(self) -> bool:
        return self.finite and not self.violations


def _lipschitz_quotients(fn, base, which, other, rng):
    """Largest |fn(..) - fn(..')| / |arg - arg'| when only argument ``which`` moves."""
    args = list(base)
    args2 = list(base)
    args2[which] = other
    v1 = np.asarray(fn(*args), dtype=float).reshape(len(base[0]), -1)
    v2 = np.asarray(fn(*args2), dtype=float).reshape(len(base[0]), -1)
    num = np.linalg.norm(v1 - v2, axis=1)
    den = np.linalg.norm((np.asarray(base[which]) - np.asarray(other)).reshape(len(base[0]), -1), axis=1)
    keep = den > 1e-12
    return float(np.max(num[keep] / den[keep])) if keep.any() else 0.0


def validate(problem: Problem, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Sample-based check of Lipschitz bounds, ellipticity and finiteness.

    Quotients are estimated on the boxes [-1, 1] and [-10, 10]; a quotient
    that grows by more than 2x between the two boxes is reported as
    superlinear growth. Never raises on a violation.
    """
    rng = np.random.default_rng(seed)
    d = problem.dimension
    estimates = {}
    violations = []
    finite = True

    def draw(r):
        return (
            rng.uniform(-r, r, (samples, d)),
            rng.uniform(-r, r, samples),
            rng.uniform(-r, r, (samples, d)),
        )

    coeffs = {"b": (problem.b, 3), "f": (problem.f, 3), "sigma": (problem.sigma, 2)}
    names = ("x", "y", "z")
    quot = {}
    for r in (1.0, 10.0):
        x, y, z = draw(r)
        x2, y2, z2 = draw(r)
        for cname, (fn, nargs) in coeffs.items():
            base = (x, y, z)[:nargs]
            out = np.asarray(fn(*base), dtype=float)
            if not np.all(np.isfinite(out)):
                finite = False
                violations.append(f"{cname} produced non-finite values on [-{r:g}, {r:g}]")
            for j, other in enumerate((x2, y2, z2)[:nargs]):
                quot[(cname, names[j], r)] = _lipschitz_quotients(fn, base, j, other, rng)
        hval = np.asarray(problem.H(x), dtype=float)
        if not np.all(np.isfinite(hval)):
            finite = False
            violations.append("H produced non-finite values")

    for (cname, arg, r), q in quot.items():
        if r != 10.0:
            continue
        key = f"{cname}_{arg}"
        estimates[key] = q
        small = quot[(cname, arg, 1.0)]
        declared = problem.lipschitz.get(key)
        if declared is not None and q > declared * (1 + 1e-9) + 1e-12:
            violations.append(f"Lipschitz {key}: estimated {q:.4g} exceeds declared {declared:.4g}")
        elif q > 2.0 * small + 1e-9:
            violations.append(f"Lipschitz {key}: quotient grows from {small:.4g} to {q:.4g} (superlinear)")

    x, y, _ = draw(10.0)
    s = np.asarray(problem.sigma(x, y), dtype=float)
    a = np.einsum("nij,nkj->nik", s, s)
    eig = np.linalg.eigvalsh(a)
    lam = float(eig.min())
    estimates["ellipticity"] = lam
    if problem.ellipticity is not None and problem.ellipticity > 0:
        if lam < problem.ellipticity * (1 - 1e-9):
            violations.append(f"ellipticity: min eigenvalue {lam:.4g} below declared {problem.ellipticity:.4g}")
    elif lam <= 1e-12:
        violations.append(f"ellipticity: sigma sigma^T degenerates (min eigenvalue {lam:.3g})")

    if not problem.assumption_a:
        warnings.warn(f"{problem.name} is flagged as outside the standing assumptions", stacklevel=2)
    return ValidationReport(problem.name, estimates, violations, finite)


# --- builtin registry -----------------------------------------------------

BUILTIN_NAMES = ("burgers_periodic", "burgers_gaussian", "kpz2d", "porous")


def builtin(name: str, **params) -> Problem:
    """Construct a builtin benchmark by name; ``params`` override defaults."""
    if name in ("burgers", "burgers_periodic", "burgers_gaussian"):
        eps = float(params.get("epsilon", 0.15))
        terminal = params.get("terminal", "gaussian" if name == "burgers_gaussian" else "sine")
        form = params.get("form", "coupled")
        if form == "coupled":
            return make_burgers_coupled(eps, terminal)
        if form == "backward":
            return make_burgers_backward(eps, terminal)
        raise ValueError(f"unknown Burgers form {form!r}")
    if name in ("kpz", "kpz2d"):
        return make_kpz(float(params.get("nu", 0.3)), kpz_sigma(float(params.get("theta", 0.8))))
    if name == "porous":
        L = float(params.get("L", 2 * math.sqrt(2) * math.pi))
        return make_porous_media(L, float(params.get("T", 1.0)))
    raise ValueError(f"unknown builtin problem {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
