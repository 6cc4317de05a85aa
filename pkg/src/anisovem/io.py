"""Output writers and readers: run tables, indicator dumps, meshes, rate fits.

Formats
-------
``run.csv``
    One row per iteration with columns :data:`RUN_COLUMNS`.
``indicators_<iter>.csv``
    Columns :data:`INDICATOR_COLUMNS`; ``type`` is ``cell`` or ``edge`` and
    fields that do not apply to a row type are left empty.
mesh text format
    ``vertices <n>`` followed by ``n`` lines ``x y``, then ``cells <m>``
    followed by ``m`` lines ``<count> i_0 ... i_{count-1}`` (counter-clockwise
    loops, 0-based). Lines starting with ``#`` are comments.
``mesh_<iter>.vtk``
    Legacy ASCII unstructured grid, one ``VTK_POLYGON`` (type 7) per cell,
    with cell data ``u_avg`` (cell average of the projected solution),
    ``eta2`` and the vector ``cut_direction`` (zero for uncut cells).

Floats are written with 17 significant digits, so every file re-parses to
the exact same doubles.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientData
from .geometry import polygon_quadrature
from .mesh import Mesh

RUN_COLUMNS = (
    "iter",
    "ndof",
    "estimator",
    "err",
    "eta_sum",
    "xi_sum",
    "sigma_sum",
    "n_cells",
    "cut_G_count",
    "cut_K_count",
)
INDICATOR_COLUMNS = ("type", "id", "R_norm", "eta2", "sigma_tilde2", "sigma2", "M", "w", "score", "J_norm", "xi2")
VTK_POLYGON = 7


def fmt(x) -> str:
    """Shortest text for ints, round-trip-exact text for floats."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


# -- convergence table --------------------------------------------------------


@dataclass
class ConvergenceTable:
    """Rows of (iteration, DOFs, estimator, exact error)."""

    iters: list = field(default_factory=list)
    ndof: list = field(default_factory=list)
    estimator: list = field(default_factory=list)
    err: list = field(default_factory=list)

    @classmethod
    def from_log(cls, log) -> "ConvergenceTable":
        t = cls()
        for r in log.records:
            t.add(r.iter, r.ndof, r.estimator, r.err)
        return t

    def add(self, it: int, n: int, est: float, err: float):
        self.iters.append(it)
        self.ndof.append(n)
        self.estimator.append(est)
        self.err.append(err)

    def __len__(self):
        return len(self.ndof)

    def rate(self, burn_in: int = 3, column: str = "err") -> float:
        return fit_rate(self, burn_in=burn_in, column=column)


def fit_rate(table, burn_in: int = 3, column: str = "err") -> float:
    """Least-squares slope of ``log(column)`` against ``log(N)``.

    ``table`` is a :class:`ConvergenceTable`, a run log, or a pair of
    sequences ``(N, values)``. The first ``burn_in`` rows are dropped.
    """
    if isinstance(table, ConvergenceTable):
        n, e = table.ndof, getattr(table, column)
    elif hasattr(table, "records"):
        n, e = [r.ndof for r in table.records], [getattr(r, column) for r in table.records]
    else:
        n, e = table
    n = np.asarray(n, dtype=float)[burn_in:]
    e = np.asarray(e, dtype=float)[burn_in:]
    if len(n) < 2:
        raise InsufficientData(f"need at least 2 rows after a burn-in of {burn_in}, got {len(n)}")
    if np.any(n <= 0) or np.any(e <= 0):
        raise InsufficientData("rate fit needs positive DOF counts and values")
    if np.ptp(n) == 0:
        raise InsufficientData("all DOF counts are equal")
    slope, _ = np.polyfit(np.log(n), np.log(e), 1)
    return float(slope)


# -- CSV ----------------------------------------------------------------------


def write_run_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in log.records:
            w.writerow([fmt(getattr(r, c)) for c in RUN_COLUMNS])


def read_run_csv(path) -> list:
    """Rows of ``run.csv`` as dicts with ints and floats restored."""
    ints = {"iter", "ndof", "n_cells", "cut_G_count", "cut_K_count"}
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: int(v) if k in ints else float(v) for k, v in row.items()})
    return rows


def write_indicators_csv(path, ind) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDICATOR_COLUMNS)
        for c in range(len(ind.score)):
            w.writerow(
                ["cell", c]
                + [fmt(a[c]) for a in (ind.R_norm, ind.eta2, ind.sigma_tilde2, ind.sigma2, ind.M, ind.weight, ind.score)]
                + ["", ""]
            )
        for j, e in enumerate(ind.edges):
            w.writerow(["edge", int(e)] + [""] * 7 + [fmt(ind.J_norm[j]), fmt(ind.xi2[j])])


def read_indicators_csv(path) -> tuple:
    """``(cells, edges)`` as dicts of column arrays (empty fields dropped)."""
    parts = {"cell": {}, "edge": {}}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cols = parts[row.pop("type")]
            for k, v in row.items():
                if v != "":
                    cols.setdefault(k, []).append(int(v) if k == "id" else float(v))
    return tuple({k: np.array(v) for k, v in parts[t].items()} for t in ("cell", "edge"))


# -- mesh text format ---------------------------------------------------------


def write_mesh(path, mesh: Mesh) -> None:
    lines = ["# anisovem mesh", f"vertices {mesh.n_vertices}"]
    lines += [f"{fmt(x)} {fmt(y)}" for x, y in mesh.vertices]
    lines.append(f"cells {mesh.n_cells}")
    lines += [" ".join(map(str, [len(loop), *loop])) for loop in mesh.cells]
    Path(path).write_text("\n".join(lines) + "\n")


def _data_lines(path):
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            yield line


def read_mesh(path) -> Mesh:
    it = _data_lines(path)
    tag, n = next(it).split()
    if tag != "vertices":
        raise ValueError(f"expected 'vertices', got {tag!r}")
    xy = np.array([[float(t) for t in next(it).split()] for _ in range(int(n))]).reshape(-1, 2)
    tag, m = next(it).split()
    if tag != "cells":
        raise ValueError(f"expected 'cells', got {tag!r}")
    cells = []
    for _ in range(int(m)):
        vals = [int(t) for t in next(it).split()]
        if vals[0] != len(vals) - 1:
            raise ValueError("cell vertex count does not match its loop")
        cells.append(vals[1:])
    return Mesh(xy, cells)


# -- VTK ----------------------------------------------------------------------


def cell_averages(proj) -> np.ndarray:
    """Cell averages of the projected solution ``Pi u_h``."""
    out = np.empty(len(proj.elements))
    for c, el in enumerate(proj.elements):
        q = polygon_quadrature(el.polygon, proj.order)
        out[c] = q.weights @ el.monomials.evaluate(proj.value[c], q.points) / el.polygon.area
    return out


def write_vtk(path, vertices, cells, cell_scalars: dict | None = None, cell_vectors: dict | None = None, title="anisovem") -> None:
    """Legacy ASCII unstructured grid of polygons with optional cell data."""
    vertices = np.asarray(vertices, dtype=float)
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {len(vertices)} double")
    out += [f"{fmt(x)} {fmt(y)} 0" for x, y in vertices]
    size = sum(len(c) + 1 for c in cells)
    out.append(f"CELLS {len(cells)} {size}")
    out += [" ".join(map(str, [len(c), *c])) for c in cells]
    out.append(f"CELL_TYPES {len(cells)}")
    out += [str(VTK_POLYGON)] * len(cells)
    if cell_scalars or cell_vectors:
        out.append(f"CELL_DATA {len(cells)}")
        for name, vals in (cell_scalars or {}).items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [fmt(v) for v in vals]
        for name, vals in (cell_vectors or {}).items():
            out.append(f"VECTORS {name} double")
            out += [f"{fmt(a)} {fmt(b)} 0" for a, b in np.asarray(vals, dtype=float).reshape(-1, 2)]
    Path(path).write_text("\n".join(out) + "\n")


@dataclass
class VtkData:
    vertices: np.ndarray
    cells: list
    scalars: dict
    vectors: dict


def read_vtk(path) -> VtkData:
    """Parse what :func:`write_vtk` writes."""
    tok = Path(path).read_text().split("\n")
    i = 4
    _, n, _ = tok[i].split()
    n = int(n)
    pts = np.array([[float(t) for t in line.split()[:2]] for line in tok[i + 1 : i + 1 + n]]).reshape(-1, 2)
    i += 1 + n
    _, m, _ = tok[i].split()
    m = int(m)
    cells = [[int(t) for t in line.split()][1:] for line in tok[i + 1 : i + 1 + m]]
    i += 1 + m
    types = [int(t) for t in tok[i + 1 : i + 1 + m]]
    if any(t != VTK_POLYGON for t in types):
        raise ValueError("only polygon cells are supported")
    i += 1 + m
    scalars, vectors = {}, {}
    while i < len(tok) and tok[i].strip():
        head = tok[i].split()
        if head[0] == "CELL_DATA":
            i += 1
        elif head[0] == "SCALARS":
            scalars[head[1]] = np.array([float(t) for t in tok[i + 2 : i + 2 + m]])
            i += 2 + m
        elif head[0] == "VECTORS":
            vectors[head[1]] = np.array([[float(t) for t in line.split()[:2]] for line in tok[i + 1 : i + 1 + m]]).reshape(-1, 2)
            i += 1 + m
        else:
            raise ValueError(f"unexpected VTK section {head[0]!r}")
    return VtkData(pts, cells, scalars, vectors)


def write_snapshot(out_dir, iteration: int, vertices, cells, u_avg, eta2, cuts) -> None:
    """``mesh_<iter>.vtk`` for a mesh captured before its cells were cut."""
    directions = np.zeros((len(cells), 2))
    for d in cuts:
        directions[d.cell] = d.direction
    write_vtk(
        Path(out_dir) / f"mesh_{iteration}.vtk",
        vertices,
        cells,
        cell_scalars={"u_avg": u_avg, "eta2": eta2},
        cell_vectors={"cut_direction": directions},
        title=f"anisovem iteration {iteration}",
    )
