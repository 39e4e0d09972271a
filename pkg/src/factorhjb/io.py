"""CSV and JSON artifacts.  Floats are written with ``repr`` so files round-trip exactly."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .solver import ControlField, Grid, SolutionField

__all__ = [
    "IOFormatError",
    "write_json",
    "dumps_json",
    "write_field_csv",
    "read_field_csv",
    "write_strategy_csv",
    "write_paths_csv",
    "write_rows_csv",
    "file_digest",
]


class IOFormatError(ValueError):
    pass


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj))
    return path


def _f(v) -> str:
    return repr(float(v))


def write_field_csv(path, sol: SolutionField, controls: ControlField | None = None) -> Path:
    """Rows time-major, then lexicographic in x."""
    grid = sol.grid
    n = grid.n
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + ["G"] + [f"dG{i + 1}" for i in range(n)]
    eta = controls is not None and controls.eta_index is not None
    if controls is not None:
        header += ["qnorm", "c"] + (["eta"] if eta else [])
    X = grid.points().reshape(-1, n)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j, t in enumerate(grid.times):
            G = sol.G[j].reshape(-1)
            dG = sol.dG[j].reshape(-1, n)
            if controls is not None:
                qn = np.sqrt(np.sum(controls.q[j] ** 2, axis=-1)).reshape(-1)
                c = controls.c[j].reshape(-1)
                ei = controls.eta_index[j].reshape(-1) if eta else None
            for i in range(G.size):
                row = [_f(t)] + [_f(v) for v in X[i]] + [_f(G[i])] + [_f(v) for v in dG[i]]
                if controls is not None:
                    row += [_f(qn[i]), _f(c[i])]
                    if eta:
                        row.append(str(int(ei[i])))
                w.writerow(row)
    return path


def read_field_csv(path, pde_hash: str = "") -> SolutionField:
    """Rebuild a SolutionField (values and gradient) from :func:`write_field_csv` output."""
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise IOFormatError(f"{path}: empty file") from None
        rows = [list(map(float, row)) for row in r]
    if not header or header[0] != "t" or "G" not in header:
        raise IOFormatError(f"{path}: not a field export (header {header})")
    n = header.index("G") - 1
    if n not in (1, 2) or header[1 : n + 1] != [f"x{i + 1}" for i in range(n)]:
        raise IOFormatError(f"{path}: unexpected coordinate columns")
    data = np.asarray(rows)
    if data.ndim != 2 or data.shape[1] < 2 * n + 2:
        raise IOFormatError(f"{path}: malformed rows")
    ts = np.unique(data[:, 0])
    axes = []
    for i in range(n):
        c = np.unique(data[:, 1 + i])
        axes.append((float(c[0]), float(c[-1]), int(c.size)))
    grid = Grid(tuple(axes), int(ts.size), float(ts[-1]))
    expect = grid.nt * int(np.prod(grid.shape))
    if data.shape[0] != expect:
        raise IOFormatError(f"{path}: expected {expect} rows, found {data.shape[0]}")
    G = data[:, n + 1].reshape((grid.nt,) + grid.shape)
    dG = data[:, n + 2 : 2 * n + 2].reshape((grid.nt,) + grid.shape + (n,))
    return SolutionField(grid=grid, G=G, dG=dG, pde_hash=pde_hash)


def write_strategy_csv(path, strategy) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "pi_frac", "c_frac"])
        for row in strategy.rows():
            w.writerow([_f(v) for v in row])
    return path


def write_paths_csv(path, bundle, limit: int | None = None) -> Path:
    """Stored paths as long format ``path,step,t,x1[,x2],q1[,q2],c``.

    Controls are those applied on [t_k, t_{k+1}); the last step carries none.
    """
    if bundle.paths is None:
        raise IOFormatError("bundle has no stored paths")
    P = bundle.paths if limit is None else bundle.paths[:limit]
    M, K1, n = P.shape
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "step", "t"] + [f"x{i + 1}" for i in range(n)] + [f"q{i + 1}" for i in range(n)] + ["c"])
        for m in range(M):
            for k in range(K1):
                if k < K1 - 1:
                    ctrl = [_f(v) for v in bundle.q_paths[m, k]] + [_f(bundle.c_paths[m, k])]
                else:
                    ctrl = [""] * (n + 1)
                w.writerow([str(m), str(k), _f(bundle.t0 + k * bundle.dt)] + [_f(v) for v in P[m, k]] + ctrl)
    return path


def write_rows_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_f(v) if isinstance(v, (float, np.floating)) else str(v) for v in row])
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
