"""INI run configurations: parsing, overrides, resolution into solver objects, manifests.

Sections and keys::

    [problem]    name, epsilon, terminal, form, nu, theta, L
    [time]       T, N (or h), t0
    [grid]       delta (or cells), R, rho, eta, periodic = auto|true|false
    [quantizer]  M, seed, file, cache_dir, n_train, lloyd_max_iter, lloyd_tol,
                 clvq_steps, clvq_gain, n_weights
    [solver]     variant, interpolation, store_all_slices, output_times, threads, chunk_size
    [run]        output, seed, paths, x0, figures
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from . import __version__
from .grid import GridSpec
from .problems import builtin, make_porous_differentiated
from .quantizer import QuantizerError, QuantizerGrid, TrainingSchedule, get_quantizer, load
from .solver import SolverConfig, Variant

SECTIONS = ("problem", "time", "grid", "quantizer", "solver", "run")

DEFAULTS = {
    "time": {"t0": "0"},
    "grid": {"R": "1", "rho": "inf", "eta": "0", "periodic": "auto"},
    "quantizer": {"seed": "0"},
    "solver": {
        "variant": "full",
        "interpolation": "nearest",
        "store_all_slices": "false",
        "output_times": "",
        "threads": "1",
        "chunk_size": "4096",
    },
    "run": {"output": "out", "seed": "0", "paths": "10000", "x0": "", "figures": "false"},
}


class ConfigError(ValueError):
    pass


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("qfbsde").joinpath("configs").iterdir() if p.name.endswith(".cfg"))


def _resolve_path(path: str) -> Path | None:
    p = Path(path)
    if p.exists():
        return p
    cand = resources.files("qfbsde").joinpath("configs", p.name)
    if cand.is_file():
        return Path(str(cand))
    return None


def read_config(path: str | None, overrides=()) -> configparser.ConfigParser:
    """Load an INI file (a bundled config name also works) and apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec in SECTIONS:
        cp.add_section(sec)
        for k, v in DEFAULTS.get(sec, {}).items():
            cp.set(sec, k, v)
    if path is not None:
        p = _resolve_path(path)
        if p is None:
            raise FileNotFoundError(f"config file not found: {path}")
        with open(p) as fh:
            cp.read_file(fh, source=str(p))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}")
        cp.set(sec, key.strip(), value.strip())
    return cp


def _float(cp, sec, key, default=None) -> float:
    raw = cp.get(sec, key, fallback=None)
    if raw is None or raw == "":
        if default is None:
            raise ConfigError(f"missing [{sec}] {key}")
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {key}: not a number: {raw!r}") from exc


def _int(cp, sec, key, default=None) -> int:
    v = _float(cp, sec, key, None if default is None else float(default))
    if v != int(v):
        raise ConfigError(f"[{sec}] {key}: expected an integer, got {v}")
    return int(v)


def _bool(cp, sec, key) -> bool:
    try:
        return cp.getboolean(sec, key)
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {key}: expected a boolean") from exc


def _floats(raw: str) -> list[float]:
    return [float(t) for t in raw.replace(",", " ").split()] if raw.strip() else []


PROBLEM_KEYS = ("epsilon", "terminal", "form", "nu", "theta", "L")


def problem_params(cp) -> dict:
    out = {}
    for key in PROBLEM_KEYS:
        if cp.has_option("problem", key):
            out[key] = cp.get("problem", key)
    return out


def build_problem(cp):
    """The Problem (or two-field problem for the differentiated variant) named in the config."""
    name = cp.get("problem", "name", fallback=None)
    if not name:
        raise ConfigError("missing [problem] name")
    params = problem_params(cp)
    variant = Variant(cp.get("solver", "variant"))
    T = _float(cp, "time", "T")
    if name == "porous":
        L = float(params.get("L", 2 * math.sqrt(2) * math.pi))
        if variant is Variant.DIFFERENTIATED:
            return make_porous_differentiated(L, T)
        return builtin("porous", L=L, T=T)
    if variant is Variant.DIFFERENTIATED:
        raise ConfigError("the differentiated variant is only available for the porous problem")
    return builtin(name, **params)


def training_schedule(cp) -> TrainingSchedule:
    kw = {}
    for f in ("n_train", "lloyd_max_iter", "clvq_steps", "n_weights"):
        if cp.has_option("quantizer", f):
            kw[f] = _int(cp, "quantizer", f)
    for f in ("lloyd_tol", "clvq_gain"):
        if cp.has_option("quantizer", f):
            kw[f] = _float(cp, "quantizer", f)
    return replace(TrainingSchedule(), **kw)


def build_quantizer(cp, dimension: int) -> QuantizerGrid:
    path = cp.get("quantizer", "file", fallback="")
    if path:
        q = load(path)
        if q.dimension != dimension:
            raise ConfigError(f"quantizer file has dimension {q.dimension}, problem needs {dimension}")
        return q
    M = _int(cp, "quantizer", "M")
    if M < 1:
        raise ConfigError("[quantizer] M must be positive")
    cache = cp.get("quantizer", "cache_dir", fallback="") or None
    return get_quantizer(dimension, M, seed=_int(cp, "quantizer", "seed"), schedule=training_schedule(cp), cache_dir=cache)


def build_grid(cp, problem) -> GridSpec:
    d = problem.dimension
    mode = cp.get("grid", "periodic").strip().lower()
    if mode not in ("auto", "true", "false"):
        raise ConfigError("[grid] periodic must be auto, true or false")
    period = problem.period if mode != "false" else None
    if mode == "true" and period is None:
        raise ConfigError(f"problem {problem.name} has no period")
    R = _float(cp, "grid", "R")
    rho = _float(cp, "grid", "rho")
    if cp.get("grid", "cells", fallback=""):
        cells = _int(cp, "grid", "cells")
        if period is None:
            raise ConfigError("[grid] cells needs a periodic grid; set delta instead")
        delta = period[0] / cells
    else:
        delta = _float(cp, "grid", "delta")
    try:
        return GridSpec(d, delta, R=R, rho=rho, eta=_float(cp, "grid", "eta"), period=period)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def time_mesh(cp) -> tuple[float, float, int]:
    T = _float(cp, "time", "T")
    t0 = _float(cp, "time", "t0")
    if cp.get("time", "N", fallback=""):
        N = _int(cp, "time", "N")
    else:
        h = _float(cp, "time", "h")
        N = int(round((T - t0) / h))
        if N < 1 or abs(N * h - (T - t0)) > 1e-9 * max(1.0, T):
            raise ConfigError(f"h={h} does not divide [t0, T] = [{t0}, {T}]")
    return T, t0, N


@dataclass
class Resolved:
    parser: configparser.ConfigParser
    problem: object
    config: SolverConfig
    output_times: list[float]


def resolve(cp, threads: int | None = None, store_all: bool | None = None) -> Resolved:
    """Validate everything and build the objects a run needs (trains the quantizer if not cached)."""
    try:
        problem = build_problem(cp)
        T, t0, N = time_mesh(cp)
        grid = build_grid(cp, problem)
        variant = Variant(cp.get("solver", "variant"))
        out_times = _floats(cp.get("solver", "output_times"))
        quantizer = build_quantizer(cp, problem.dimension)
        times = [t0 + (T - t0) * k / N for k in range(N + 1)]
        keep = []
        for t in out_times:
            k = int(round((t - t0) / ((T - t0) / N)))
            if not 0 <= k <= N or abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
                raise ConfigError(f"output time {t} is not on the time mesh")
            keep.append(k)
        cfg = SolverConfig(
            T=T,
            N=N,
            grid=grid,
            quantizer=quantizer,
            variant=variant,
            t0=t0,
            store_all_slices=_bool(cp, "solver", "store_all_slices") if store_all is None else store_all,
            keep=tuple(keep),
            interpolation=cp.get("solver", "interpolation"),
            threads=_int(cp, "solver", "threads") if threads is None else threads,
            chunk_size=_int(cp, "solver", "chunk_size"),
        )
    except (KeyError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        if isinstance(exc, (ConfigError, QuantizerError)):
            raise
        raise ConfigError(str(exc)) from exc
    return Resolved(cp, problem, cfg, out_times)


def write_manifest(cp, path: Path, command: str, extra: dict | None = None) -> None:
    """Write the resolved configuration plus a [manifest] section; the file is itself a runnable config."""
    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    for sec in SECTIONS:
        out.add_section(sec)
        for k, v in cp.items(sec):
            out.set(sec, k, v)
    out.add_section("manifest")
    out.set("manifest", "version", __version__)
    out.set("manifest", "command", command)
    for k, v in (extra or {}).items():
        out.set("manifest", k, str(v))
    with open(path, "w") as fh:
        out.write(fh)
