"""CSV export and import of solution slices and tabular reports (17 significant digits)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .solver import Solution

FMT = "%.17g"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FMT % float(v)


def slice_columns(solution: Solution, k: int) -> list[str]:
    d = solution.config.grid.dimension
    cols = ["k", "t_k", "node_index", *(f"x_{i + 1}" for i in range(d)), "ubar", *(f"vbar_{i + 1}" for i in range(d))]
    if k in solution.vhat:
        cols += [f"vhat_{i + 1}" for i in range(d)]
    if k in solution.wbar:
        cols += [f"wbar_{i + 1}" for i in range(d)] if d > 1 else ["wbar"]
    return cols


def write_slice_csv(solution: Solution, k: int, path) -> Path:
    path = Path(path)
    grid = solution.grid(k)
    coords = grid.coords
    t = solution.times[k]
    blocks = [coords, solution.ubar[k][:, None], solution.vbar[k]]
    if k in solution.vhat:
        blocks.append(solution.vhat[k])
    if k in solution.wbar:
        blocks.append(np.asarray(solution.wbar[k]).reshape(grid.size, -1))
    n = grid.size
    body = np.hstack([np.full((n, 1), k), np.full((n, 1), t), np.arange(n)[:, None], *blocks])
    fmt = ["%d", FMT, "%d"] + [FMT] * (body.shape[1] - 3)
    np.savetxt(path, body, fmt=fmt, delimiter=",", header=",".join(slice_columns(solution, k)), comments="")
    return path


def slice_filename(k: int) -> str:
    return f"slice_k{k:05d}.csv"


def read_slice_csv(path) -> dict:
    """Columns of a slice CSV as arrays: k, t, node_index, x (n, d), ubar, vbar (n, d), optional vhat, wbar."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    col = {name: i for i, name in enumerate(header)}

    def group(prefix):
        names = [h for h in header if h == prefix or h.startswith(prefix + "_")]
        return data[:, [col[n] for n in names]] if names else None

    return {
        "k": int(data[0, col["k"]]),
        "t": float(data[0, col["t_k"]]),
        "node_index": data[:, col["node_index"]].astype(np.int64),
        "x": group("x"),
        "ubar": data[:, col["ubar"]],
        "vbar": group("vbar"),
        "vhat": group("vhat"),
        "wbar": group("wbar"),
    }


def write_table(path, columns, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for r in rows:
            out.writerow([v if isinstance(v, str) else _fmt(v) for v in r])
    return path
