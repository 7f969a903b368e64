"""Quantized FBSDE solver: train quantizers, solve benchmarks, compare, simulate and study convergence.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical abort (non-finite value during the backward sweep).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build_grid, build_problem, read_config, resolve, training_schedule, write_manifest
from .diagnostics import STUDY_COLUMNS, compare_arrays, convergence_study, error_budget
from .export import read_slice_csv, slice_filename, write_slice_csv, write_table
from .quantizer import QuantizerError, QuantizerFormatError, TrainingSchedule, cache_path, get_quantizer
from .reference import reference_model
from .simulate import feynman_kac_residual, l2_errors, path_payoffs, simulate
from .solver import NumericalAbort, Variant, solve

log = logging.getLogger("qfbsde")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_HORIZON = {"burgers": 1.0, "burgers_periodic": 1.0, "burgers_gaussian": 1.0, "kpz": 0.5, "kpz2d": 0.5, "porous": 1.0}


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _threads(value: int | None) -> int | None:
    if value is None:
        return None
    if value == 0:
        return os.cpu_count() or 1
    return value


def _outdir(args, cp) -> Path:
    out = Path(args.out or cp.get("run", "output"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _figures(args, cp) -> bool:
    return bool(args.figures) or cp.getboolean("run", "figures", fallback=False)


def _reference_or_none(problem, T):
    try:
        return reference_model(problem, T)
    except ValueError:
        return None


# --- subcommands ------------------------------------------------------------


def cmd_quantize(args) -> int:
    sched = TrainingSchedule() if args.n_train is None else TrainingSchedule(n_train=args.n_train)
    q = get_quantizer(args.dim, args.points, seed=args.seed, schedule=sched, cache_dir=args.cache_dir)
    src = cache_path(args.dim, args.points, args.seed, sched, args.cache_dir)
    dest = Path(args.out) if args.out else src
    if dest != src:
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dest)
    print(f"d={q.dimension} M={q.size} distortion2={q.distortion2:.10g} distortion={math.sqrt(q.distortion2):.10g}")
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cp = read_config(args.config, args.set)
    res = resolve(cp, threads=_threads(args.threads))
    cfg, problem = res.config, res.problem
    out = _outdir(args, cp)
    sol = solve(problem, cfg)
    slices = sorted(set(cfg.keep) | {0}) if not cfg.store_all_slices else sol.slices
    for k in slices:
        write_slice_csv(sol, k, out / slice_filename(k))
    q = cfg.quantizer
    bud = error_budget(cfg.h, cfg.grid.delta, q.size, cfg.grid.dimension, cfg.grid.R, cfg.grid.rho,
                       drift_depends_on_z=getattr(problem, "drift_depends_on_z", True))
    regime = cfg.regime()
    write_table(
        out / "summary.csv",
        ("key", "value"),
        [
            ("problem", problem.name), ("variant", cfg.variant.value), ("h", cfg.h), ("N", cfg.N),
            ("delta", cfg.grid.delta), ("M", q.size), ("nodes_slice0", sol.grid(0).size),
            ("budget_time", bud.e_time), ("budget_space", bud.e_space), ("budget_trunc", bud.e_trunc),
            ("budget_quantiz", bud.e_quantiz), ("budget_gradient", bud.e_gradient), ("budget_global", bud.global_),
            *((f"regime_{k}", str(v).lower()) for k, v in regime.items()),
            ("clamped_roots", sol.clamped), ("evaluations", sol.evaluations),
        ],
    )
    write_manifest(cp, out / "manifest.ini", "solve", {"quantizer_digest": training_schedule(cp).digest()})
    print(f"solved {problem.name} ({cfg.variant.value}) N={cfg.N} in {sol.wall_seconds:.2f}s; wrote {len(slices)} slice(s) to {out}")
    if _figures(args, cp):
        _solve_figures(sol, problem, out)
    return EXIT_OK


def _solve_figures(sol, problem, out: Path) -> None:
    from . import plotting

    ref = _reference_or_none(problem, sol.config.T)
    if sol.config.grid.dimension == 1:
        curves = []
        for k in sorted(sol.ubar):
            x = sol.coords(k)[:, 0]
            curves.append((f"t={sol.times[k]:.3g}", x, sol.ubar[k], "-"))
            if ref is not None:
                curves.append((f"reference t={sol.times[k]:.3g}", x, ref.values(sol.times[k], sol.grid(k)), "k:"))
        plotting.profiles(curves, out / "profiles.png", title=problem.name)
    else:
        plotting.heatmap(sol.coords(0), sol.ubar[0], out / "ubar_t0.png", title=f"{problem.name}: u at t={sol.times[0]:.3g}")
        if ref is not None:
            err = np.abs(sol.ubar[0] - ref.values(sol.times[0], sol.grid(0)))
            plotting.heatmap(sol.coords(0), err, out / "abs_error_t0.png", title="absolute error at t0")


def cmd_reference(args) -> int:
    overrides = list(args.set)
    if args.problem:
        overrides.append(f"problem.name={args.problem}")
    cp = read_config(args.config, overrides)
    name = cp.get("problem", "name", fallback="")
    if not cp.get("time", "T", fallback=""):
        if name not in DEFAULT_HORIZON:
            raise ConfigError("set [time] T for this problem")
        cp.set("time", "T", str(DEFAULT_HORIZON[name]))
    if args.delta is not None:
        cp.set("grid", "delta", repr(args.delta))
        cp.remove_option("grid", "cells")
    elif not cp.get("grid", "delta", fallback="") and not cp.get("grid", "cells", fallback=""):
        cp.set("grid", "delta", "0.01")
    problem = build_problem(cp)
    T = float(cp.get("time", "T"))
    t = T if args.t is None else args.t
    grid = build_grid(cp, problem).slice_grid(0)
    model = reference_model(problem, T)
    u = model.values(t, grid)
    g = model.grad(t, grid.coords) if args.gradient else None
    d = grid.dimension
    cols = [*(f"x_{i + 1}" for i in range(d)), "u_ref"] + ([f"grad_ref_{i + 1}" for i in range(d)] if g is not None else [])
    body = np.hstack([grid.coords, u[:, None]] + ([g] if g is not None else []))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, cols, body)
    print(f"wrote {out} ({grid.size} nodes, t={t})")
    return EXIT_OK


def cmd_compare(args) -> int:
    data = read_slice_csv(args.solution)
    field = args.field
    values = data[field]
    if values is None:
        raise ConfigError(f"{args.solution} has no {field} column")
    coords = data["x"]
    if args.against:
        other = read_slice_csv(args.against)
        if other["x"].shape != coords.shape or not np.array_equal(other["x"], coords):
            raise ConfigError("the two CSVs do not share the same nodes")
        ref = other[field]
        if ref is None:
            raise ConfigError(f"{args.against} has no {field} column")
    else:
        if not args.config:
            raise ConfigError("compare needs --against CSV or --config CFG")
        cp = read_config(args.config, args.set)
        problem = build_problem(cp)
        spec = build_grid(cp, problem)
        grid = spec.slice_grid(data["k"])
        if grid.size != len(coords) or not np.allclose(grid.coords, coords, rtol=0, atol=1e-12):
            raise ConfigError("the solution nodes do not match the configured grid")
        model = reference_model(problem, float(cp.get("time", "T")))
        t = data["t"]
        if field == "ubar":
            ref = model.values(t, grid)
        elif field == "vbar":
            ref = model.v(t, coords)
        else:
            ref = model.grad(t, coords)
    delta = float(np.min(np.diff(np.unique(coords[:, 0])))) if len(coords) > 1 else 1.0
    mask = None
    if args.window is not None:
        lo, hi = args.window
        mask = np.all((coords >= lo - 1e-12) & (coords <= hi + 1e-12), axis=1)
    stats = compare_arrays(values, ref, coords, delta, mask)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ("k", "t", "field", "nodes", "max_abs", "max_rel_pointwise", "max_rel_to_max", "l2")
    write_table(out, cols, [(data["k"], data["t"], field, stats["nodes"], stats["max_abs"],
                             stats["max_rel_pointwise"], stats["max_rel_to_max"], stats["l2"])])
    print(f"max abs error {stats['max_abs']:.6g}, max rel (to max) {stats['max_rel_to_max']:.6g}; wrote {out}")
    if args.figures and coords.shape[1] == 1:
        from . import plotting

        plotting.profiles(
            [("solution", coords[:, 0], values.reshape(len(coords), -1)[:, 0], "-"),
             ("reference", coords[:, 0], np.asarray(ref).reshape(len(coords), -1)[:, 0], "k:")],
            out.with_suffix(".png"), title=f"{field} at t={data['t']:.3g}", ylabel=field,
        )
    return EXIT_OK


def cmd_simulate(args) -> int:
    cp = read_config(args.config, args.set)
    res = resolve(cp, threads=_threads(args.threads), store_all=True)
    cfg, problem = res.config, res.problem
    if cfg.variant is Variant.DIFFERENTIATED:
        raise ConfigError("simulate supports the single-field variants only")
    out = _outdir(args, cp)
    sol = solve(problem, cfg)
    n_paths = args.paths or int(cp.get("run", "paths"))
    seed = int(cp.get("run", "seed")) if args.seed is None else args.seed
    x0_raw = args.x0 if args.x0 is not None else [float(v) for v in cp.get("run", "x0").replace(",", " ").split()]
    x0 = np.asarray(x0_raw if x0_raw else [0.0] * cfg.grid.dimension, dtype=float)
    ens = simulate(sol, problem, cfg.quantizer, x0, n_paths, seed)
    pay = path_payoffs(ens, sol, problem)
    d = cfg.grid.dimension
    cols = ("path", "tau", *(f"x_N_{i + 1}" for i in range(d)), "Y_0", "payoff")
    rows = [(i, int(ens.tau[i]), *ens.X[i, -1], ens.Y[i, 0], pay[i]) for i in range(n_paths)]
    write_table(out / "paths.csv", cols, rows)
    resid, se = feynman_kac_residual(ens, sol, problem)
    p_stop = float(ens.stopped().mean())
    report = [
        ("n_paths", n_paths), ("seed", seed), ("p_stopped", p_stop),
        ("p_stopped_se", math.sqrt(p_stop * (1 - p_stop) / n_paths)),
        ("budget_trunc", 0.0 if cfg.grid.periodic or math.isinf(cfg.grid.rho) else cfg.grid.R / (cfg.grid.R + cfg.grid.rho)),
        ("fk_residual", resid), ("fk_residual_se", se),
        ("max_jump_excess", float(ens.jump_excess.max())),
    ]
    ref = _reference_or_none(problem, cfg.T)
    if ref is not None:
        rep = l2_errors(ens, sol, ref.u, ref.v)
        report += [("l2_gradient", rep.gradient), ("l2_gradient_se", rep.gradient_se),
                   ("l2_value_sup", rep.value_sup), ("l2_value_se", rep.value_se), ("note", rep.header)]
    write_table(out / "simulation.csv", ("key", "value"), report)
    write_manifest(cp, out / "manifest.ini", "simulate", {"paths": n_paths, "path_seed": seed})
    print(f"simulated {n_paths} paths; P(stopped)={p_stop:.4g}; FK residual {resid:.3g} +- {se:.3g}")
    return EXIT_OK


def cmd_study(args) -> int:
    cp = read_config(args.config, args.set)
    problem = build_problem(cp)
    T = float(cp.get("time", "T"))
    ref = reference_model(problem, T)
    out = _outdir(args, cp)
    study = convergence_study(
        problem, T, args.h, ref, gamma=args.gamma, p=args.p, eta_extra=args.eta,
        R=float(cp.get("grid", "R")), seed=int(cp.get("quantizer", "seed")),
        variant=cp.get("solver", "variant"), threads=_threads(args.threads) or 1,
        quantizer_schedule=training_schedule(cp), cache_dir=cp.get("quantizer", "cache_dir", fallback="") or None,
    )
    write_table(out / "study.csv", STUDY_COLUMNS, study.as_table())
    write_manifest(cp, out / "manifest.ini", "study", {"h": " ".join(map(repr, args.h)), "gamma": args.gamma, "p": args.p, "eta": args.eta})
    slope = "exact" if study.exact else f"{study.slope:.3f}"
    print(f"study over h={args.h}: log-log slope {slope}; wrote {out / 'study.csv'}")
    if _figures(args, cp):
        from . import plotting

        plotting.convergence([r["h"] for r in study.rows], [r["sup_abs_err"] for r in study.rows],
                             [r["budget_global"] for r in study.rows], out / "convergence.png",
                             None if study.exact else study.slope)
    return EXIT_OK


# --- parser ---------------------------------------------------------------


def _add_common(p, config_required=True):
    if config_required:
        p.add_argument("config", help="INI config file (or the name of a bundled config)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--out", help="output directory (default: [run] output)")
    p.add_argument("--threads", type=int, help="worker threads (0 = all CPUs); never changes results")
    p.add_argument("--figures", action="store_true", help="also write PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qfbsde", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"qfbsde {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="train (or fetch from cache) a Gaussian quantizer")
    p.add_argument("--dim", type=_positive_int, required=True)
    p.add_argument("--points", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=_positive_int, help="training sample size (antithetic pairs)")
    p.add_argument("--cache-dir", help="cache directory (default: $QFBSDE_CACHE or ~/.cache/qfbsde)")
    p.add_argument("--out", help="also copy the quantizer file here")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("solve", help="run the backward scheme and write slice CSVs")
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("reference", help="sample a reference solution on a grid")
    p.add_argument("--config")
    p.add_argument("--problem", help="builtin problem name")
    p.add_argument("--t", type=float, help="time (default: the horizon T)")
    p.add_argument("--delta", type=float, help="mesh step (default 0.01 unless configured)")
    p.add_argument("--gradient", action="store_true", help="also write the gradient")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default="reference.csv")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("compare", help="compare a slice CSV against another CSV or the exact solution")
    p.add_argument("solution")
    p.add_argument("--against", help="slice CSV holding the reference field")
    p.add_argument("--config", help="config whose builtin problem supplies the exact solution")
    p.add_argument("--field", choices=("ubar", "vbar", "wbar"), default="ubar")
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default="comparison.csv")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="simulate the discrete forward chain under a solution")
    _add_common(p)
    p.add_argument("--paths", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--x0", type=float, nargs="+")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="convergence study under the parameter schedule")
    _add_common(p)
    p.add_argument("--h", type=float, nargs="+", required=True)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--p", type=float, default=4.0)
    p.add_argument("--eta", type=float, default=0.25)
    p.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except QuantizerFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, QuantizerError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
