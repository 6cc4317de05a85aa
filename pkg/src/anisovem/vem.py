"""Conforming virtual elements of order 1 and 2 for the Poisson problem.

Local matrices follow the usual D/B/G construction over scaled monomials.
The consistency term uses the L2 projection of the gradient onto
polynomials of degree k-1; the stabilization is the dofi-dofi form applied
to ``(I - Pi)`` where ``Pi`` is the elliptic projector.

Element matrices are built for whole groups of cells with the same vertex
count at once; :func:`local_element` is the one-cell case.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IllConditionedElement, SolveFailed
from .geometry import (
    CellSet,
    Polygon,
    ScaledMonomials,
    monomial_count,
    monomial_gradients,
    monomial_values,
    polygon_quadrature,
)
from .mesh import Mesh

logger = logging.getLogger(__name__)

LOAD_QUAD_DEGREE = 6
COND_LIMIT = 1e12


# -- degrees of freedom ---------------------------------------------------------


@dataclass
class DofMap:
    """Local-to-global DOF numbering.

    Order 1: one value per vertex. Order 2: vertex values, then one midpoint
    value per edge, then one cell moment ``(1/|K|) int_K v`` per cell. The
    local ordering is vertices, edge midpoints (local edge order), moment.
    """

    order: int
    cell_dofs: list
    ndof: int
    boundary: np.ndarray
    n_vertices: int
    n_edges: int

    def moment_dof(self, k: int) -> int:
        return self.n_vertices + self.n_edges + k


def build_dofmap(mesh: Mesh, k: int) -> DofMap:
    if k not in (1, 2):
        raise ValueError("only orders 1 and 2 are supported")
    nv = mesh.n_vertices
    bnd_v = mesh.boundary_vertices
    cs = mesh.cellset
    if k == 1:
        cell_dofs = np.split(cs.idx, cs.offsets[1:-1])
        return DofMap(1, cell_dofs, nv, bnd_v, nv, 0)
    et = mesh.edges
    ne = len(et)
    edge_dofs = nv + et.flat
    o = cs.offsets
    cell_dofs = [
        np.concatenate([cs.idx[o[c] : o[c + 1]], edge_dofs[o[c] : o[c + 1]], [nv + ne + c]])
        for c in range(mesh.n_cells)
    ]
    boundary = np.concatenate([bnd_v, et.boundary, np.zeros(mesh.n_cells, dtype=bool)])
    return DofMap(2, cell_dofs, nv + ne + mesh.n_cells, boundary, nv, ne)


# -- local element --------------------------------------------------------------


@dataclass
class LocalElement:
    polygon: Polygon
    order: int
    monomials: ScaledMonomials
    D: np.ndarray
    B: np.ndarray
    G: np.ndarray
    pi_star: np.ndarray  # elliptic projector, DOFs -> monomial coefficients
    grad_star: np.ndarray  # (2, n_low, ndof): L2 projection of d/dx_j onto P_{k-1}
    consistency: np.ndarray
    stabilization: np.ndarray

    @property
    def ndof(self) -> int:
        return self.D.shape[0]

    @property
    def projector(self) -> np.ndarray:
        """Pi = D @ pi_star acting on DOF vectors."""
        return self.D @ self.pi_star

    @property
    def stiffness(self) -> np.ndarray:
        return self.consistency + self.stabilization

    @property
    def low_monomials(self) -> ScaledMonomials:
        return ScaledMonomials(self.monomials.center, self.monomials.h, self.order - 1)


def element_arrays(V: np.ndarray, area, centroid, cov, h, k: int) -> dict:
    """Local VEM matrices for ``B`` cells with ``n`` vertices each.

    ``V`` has shape ``(B, n, 2)`` (CCW loops); ``area``, ``centroid``, ``cov``
    and ``h`` (diameter) are the cells' moments. Returns a dict of stacked
    arrays ``D, B, G, pi_star, grad_star, consistency, stabilization``.
    """
    if k not in (1, 2):
        raise ValueError("only orders 1 and 2 are supported")
    nb, n = V.shape[:2]
    area = np.asarray(area, dtype=float)
    h = np.asarray(h, dtype=float)
    m = monomial_count(k)
    nl = monomial_count(k - 1)
    ndof = n if k == 1 else 2 * n + 1
    c = np.asarray(centroid, dtype=float)[:, None, :]
    hh = h[:, None]
    Vn = np.roll(V, -1, axis=1)
    X = (V - c) / hh[..., None]

    # edge i joins vertex i and i+1; ln = |E| * outward normal
    e = Vn - V
    ln = np.stack([e[..., 1], -e[..., 0]], axis=-1)
    ln_prev = np.roll(ln, 1, axis=1)

    D = np.empty((nb, ndof, m))
    D[:, :n] = monomial_values(X[..., 0], X[..., 1], k)
    # boundary nodes with Gauss-Lobatto weights (trapezoid for k=1, Simpson for k=2)
    if k == 1:
        nodes = X
        wn = (ln + ln_prev) / 2
    else:
        Xm = (0.5 * (V + Vn) - c) / hh[..., None]
        D[:, n : 2 * n] = monomial_values(Xm[..., 0], Xm[..., 1], 2)
        s = h**-2
        D[:, 2 * n] = np.column_stack(
            [np.ones(nb), np.zeros(nb), np.zeros(nb), cov[:, 0, 0] * s, cov[:, 0, 1] * s, cov[:, 1, 1] * s]
        )
        nodes = np.concatenate([X, Xm], axis=1)
        wn = np.concatenate([(ln + ln_prev) / 6, 4 * ln / 6], axis=1)

    grads = monomial_gradients(nodes[..., 0], nodes[..., 1], k, hh)  # (B, nodes, m, 2)
    Bm = np.zeros((nb, m, ndof))
    Bm[:, :, : wn.shape[1]] = np.einsum("bpad,bpd->bap", grads, wn)
    if k == 1:
        Bm[:, 0] = 1.0 / n
    else:
        lap = np.zeros((nb, m))
        lap[:, 3] = lap[:, 5] = 2.0 / h**2
        Bm[:, :, 2 * n] -= lap * area[:, None]
        Bm[:, 0] = 0.0
        Bm[:, 0, 2 * n] = 1.0
    G = Bm @ D
    cond = np.linalg.cond(G)
    bad = ~(cond <= COND_LIMIT)
    if np.any(bad):
        raise IllConditionedElement(f"projector matrix condition number {cond[bad].max():.2e}")
    pi_star = np.linalg.solve(G, Bm)

    # int_dK v m_a n_j (+ moment term) and the mass matrix of P_{k-1}
    low = monomial_values(nodes[..., 0], nodes[..., 1], k - 1)  # (B, nodes, nl)
    E = np.zeros((nb, 2, nl, ndof))
    E[..., : wn.shape[1]] = np.einsum("bpa,bpj->bjap", low, wn)
    H = np.zeros((nb, nl, nl))
    H[:, 0, 0] = area
    if k == 2:
        # - int_K v d_j(m_b): only the linear monomials have a nonzero derivative
        E[:, 0, 1, 2 * n] -= area / h
        E[:, 1, 2, 2 * n] -= area / h
        H[:, 1:, 1:] = cov * (area / h**2)[:, None, None]
    grad_star = np.linalg.solve(H[:, None], E)
    consistency = np.einsum("bjai,bjak->bik", E, grad_star)
    consistency = 0.5 * (consistency + consistency.transpose(0, 2, 1))

    I_Pi = np.eye(ndof) - D @ pi_star
    stab = I_Pi.transpose(0, 2, 1) @ I_Pi
    return dict(D=D, B=Bm, G=G, pi_star=pi_star, grad_star=grad_star, consistency=consistency, stabilization=stab)


def _make_elements(polys: list, k: int) -> list:
    """Local elements for polygons sharing one vertex count."""
    V = np.stack([p.vertices for p in polys])
    area = np.array([p.area for p in polys])
    centroid = np.array([p.centroid for p in polys])
    cov = np.array([p.covariance for p in polys])
    h = np.array([p.diameter for p in polys])
    arr = element_arrays(V, area, centroid, cov, h, k)
    names = ("D", "B", "G", "pi_star", "grad_star", "consistency", "stabilization")
    return [
        LocalElement(p, k, ScaledMonomials(centroid[i], h[i], k), *(arr[name][i] for name in names))
        for i, p in enumerate(polys)
    ]


def local_element(poly: Polygon, k: int) -> LocalElement:
    if k not in (1, 2):
        raise ValueError("only orders 1 and 2 are supported")
    return _make_elements([poly], k)[0]


def local_stiffness(poly: Polygon, k: int) -> np.ndarray:
    return local_element(poly, k).stiffness


def cell_average(poly: Polygon, f, degree: int = LOAD_QUAD_DEGREE) -> float:
    """Piecewise-constant approximation of ``f`` on ``poly``."""
    q = polygon_quadrature(poly, degree)
    return float(q.integrate(f(q.points[:, 0], q.points[:, 1])) / poly.area)


def cell_averages(cells: CellSet, f, degree: int = LOAD_QUAD_DEGREE) -> np.ndarray:
    """:func:`cell_average` for every cell of ``cells``."""
    return cells.integrate(f, degree) / cells.area


def local_load(poly: Polygon, k: int, f, f_avg: float | None = None) -> np.ndarray:
    """Right-hand side with the piecewise-constant source.

    Order 1 spreads ``f_h |K|`` evenly over the vertices; order 2 puts it on
    the cell-moment DOF.
    """
    if f_avg is None:
        f_avg = cell_average(poly, f)
    n = len(poly)
    if k == 1:
        return np.full(n, f_avg * poly.area / n)
    b = np.zeros(2 * n + 1)
    b[2 * n] = f_avg * poly.area
    return b


# -- global system ------------------------------------------------------------


def interpolate(mesh: Mesh, dofmap: DofMap, u, degree: int = 8) -> np.ndarray:
    """DOF vector of the virtual interpolant of ``u(x, y)``."""
    xy = mesh.vertices
    vals = [np.asarray(u(xy[:, 0], xy[:, 1]), dtype=float)]
    if dofmap.order == 2:
        ev = mesh.edges.vertices
        mid = 0.5 * (xy[ev[:, 0]] + xy[ev[:, 1]])
        vals.append(np.asarray(u(mid[:, 0], mid[:, 1]), dtype=float))
        vals.append(cell_averages(mesh.cellset, u, degree))
    return np.concatenate(vals)


@dataclass
class LinearSystem:
    """Global stiffness with Dirichlet DOFs eliminated by row/column removal."""

    A: sp.csr_matrix  # full matrix, all DOFs
    b: np.ndarray
    free: np.ndarray  # indices of unknown DOFs
    fixed: np.ndarray
    g: np.ndarray  # values on fixed DOFs
    A_free: sp.csr_matrix
    b_free: np.ndarray

    @property
    def ndof(self) -> int:
        return len(self.b)


@dataclass
class ElementStack:
    """Element data stacked per group of cells with equal vertex count."""

    cells: np.ndarray
    dofs: np.ndarray  # (B, ndof) global DOFs
    pi_star: np.ndarray
    grad_star: np.ndarray
    stiffness: np.ndarray
    D: np.ndarray
    arrays: dict | None = None


def _group_dofs(cs: CellSet, cells: np.ndarray, n: int, dofmap: DofMap, edge_flat=None) -> np.ndarray:
    pos = cs.group_positions(cells, n)
    if dofmap.order == 1:
        return cs.idx[pos]
    moment = dofmap.moment_dof(0) + cells[:, None]
    return np.concatenate([cs.idx[pos], dofmap.n_vertices + edge_flat[pos], moment], axis=1)


def mesh_stacks(mesh: Mesh, k: int, dofmap: DofMap | None = None) -> list:
    """Element matrices of every cell, built in batches of equal vertex count."""
    dofmap = dofmap or build_dofmap(mesh, k)
    cs = mesh.cellset
    flat = mesh.edges.flat if k == 2 else None
    out = []
    for n, cells in cs.groups.items():
        arr = element_arrays(
            cs.group_vertices(cells, n), cs.area[cells], cs.centroid[cells], cs.cov[cells], cs.diameter[cells], k
        )
        out.append(
            ElementStack(
                cells,
                _group_dofs(cs, cells, n, dofmap, flat),
                arr["pi_star"],
                arr["grad_star"],
                arr["consistency"] + arr["stabilization"],
                arr["D"],
                arr,
            )
        )
    return out


class ElementList:
    """Read-only sequence of :class:`LocalElement` views over element stacks.

    Elements are materialized on access, so batched code paths never pay for
    per-cell objects.
    """

    _names = ("D", "B", "G", "pi_star", "grad_star", "consistency", "stabilization")

    def __init__(self, mesh: Mesh, k: int, stacks: list):
        self.mesh = mesh
        self.order = k
        self.stacks = stacks
        n = mesh.n_cells
        self._stack = np.empty(n, dtype=int)
        self._row = np.empty(n, dtype=int)
        for i, st in enumerate(stacks):
            self._stack[st.cells] = i
            self._row[st.cells] = np.arange(len(st.cells))

    def __len__(self) -> int:
        return len(self._stack)

    def __getitem__(self, c: int) -> LocalElement:
        if not -len(self) <= c < len(self):
            raise IndexError(c)
        st, r = self.stacks[self._stack[c]], self._row[c]
        poly = self.mesh.polygon(int(c) % len(self))
        sm = ScaledMonomials(poly.centroid, poly.diameter, self.order)
        return LocalElement(poly, self.order, sm, *(st.arrays[name][r] for name in self._names))

    def __iter__(self):
        return (self[c] for c in range(len(self)))


def element_list(mesh: Mesh, k: int, dofmap: DofMap | None = None) -> ElementList:
    """Local elements of every cell."""
    return ElementList(mesh, k, mesh_stacks(mesh, k, dofmap))


def stack_elements(elements, dofmap: DofMap) -> list:
    """Group elements by local size; free for an :class:`ElementList`."""
    if isinstance(elements, ElementList):
        return elements.stacks
    groups: dict = {}
    for c, el in enumerate(elements):
        groups.setdefault(el.ndof, []).append(c)
    out = []
    for cells in groups.values():
        els = [elements[c] for c in cells]
        out.append(
            ElementStack(
                np.array(cells),
                np.stack([dofmap.cell_dofs[c] for c in cells]),
                np.stack([el.pi_star for el in els]),
                np.stack([el.grad_star for el in els]),
                np.stack([el.stiffness for el in els]),
                np.stack([el.D for el in els]),
            )
        )
    return out


def assemble(mesh: Mesh, k: int, f, g=None, elements=None, dofmap=None, f_avg=None, stacks=None) -> LinearSystem:
    """Assemble the global system for ``-lap u = f``, ``u = g`` on the boundary."""
    dofmap = dofmap or build_dofmap(mesh, k)
    elements = elements or element_list(mesh, k, dofmap)
    stacks = stacks or stack_elements(elements, dofmap)
    cs = mesh.cellset
    if f_avg is None:
        f_avg = cell_averages(cs, f)
    rows, cols, vals = [], [], []
    for st in stacks:
        nd = st.dofs.shape[1]
        rows.append(np.repeat(st.dofs, nd, axis=1).ravel())
        cols.append(np.tile(st.dofs, (1, nd)).ravel())
        vals.append(st.stiffness.ravel())
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dofmap.ndof, dofmap.ndof)
    )
    load = np.asarray(f_avg) * cs.area
    if k == 1:
        b = np.bincount(cs.idx, (load / cs.counts)[cs.cell], dofmap.ndof)
    else:
        b = np.zeros(dofmap.ndof)
        b[dofmap.moment_dof(0) :] = load
    fixed = np.flatnonzero(dofmap.boundary)
    free = np.flatnonzero(~dofmap.boundary)
    if g is None:
        gvals = np.zeros(len(fixed))
    else:
        gvals = interpolate(mesh, dofmap, g)[fixed]
    A_free = A[free][:, free].tocsr()
    b_free = b[free] - A[free][:, fixed] @ gvals
    return LinearSystem(A, b, free, fixed, gvals, A_free, b_free)


def roundoff_floor(A, x, b) -> float:
    """Smallest relative residual representable for ``x`` stored in double precision."""
    return float(np.finfo(float).eps * np.linalg.norm(abs(A) @ np.abs(x)) / np.linalg.norm(b))


AMG_MIN_SIZE = 2000
PRESOLVE_TOL = 1e-9


def preconditioner(A) -> spla.LinearOperator:
    """Jacobi for small systems, a smoothed-aggregation AMG W-cycle otherwise."""
    if A.shape[0] >= AMG_MIN_SIZE:
        return pyamg.smoothed_aggregation_solver(A.tocsr()).aspreconditioner(cycle="W")
    dinv = 1.0 / A.diagonal()
    return spla.LinearOperator(A.shape, matvec=lambda x: dinv * x)


def solve(system: LinearSystem, tol: float = 1e-12, maxiter: int | None = None, x0=None) -> np.ndarray:
    """Preconditioned CG on the reduced system; returns the full DOF vector.

    ``x0`` is an optional full-length initial guess.
    """
    A, b = system.A_free, system.b_free
    u = np.zeros(system.ndof)
    u[system.fixed] = system.g
    bnorm = np.linalg.norm(b)
    if len(b) == 0 or bnorm == 0.0:
        return u
    M = preconditioner(A)
    limit = maxiter or min(20 * len(b), 2000)
    # a loose first pass fixes the round-off floor, below which CG only stagnates
    if x0 is None:
        x, info = spla.cg(A, b, rtol=max(tol, PRESOLVE_TOL), atol=0.0, maxiter=limit, M=M)
    else:
        # a good initial guess already fixes the floor, so one pass suffices
        x = np.asarray(x0, dtype=float)[system.free]
        target = max(tol, 2.0 * roundoff_floor(A, x, b))
        x, info = spla.cg(A, b, x0=x, rtol=target, atol=0.0, maxiter=limit, M=M)
    res = np.linalg.norm(A @ x - b) / bnorm
    if res > tol:
        target = max(tol, 2.0 * roundoff_floor(A, x, b))
        x, info = spla.cg(A, b, x0=x, rtol=target, atol=0.0, maxiter=limit, M=M)
        res = np.linalg.norm(A @ x - b) / bnorm
    if res > tol and not res <= 10.0 * roundoff_floor(A, x, b):
        # CG can stall above the target on strongly anisotropic meshes
        logger.info("PCG stopped at relative residual %.3e (info=%d); using sparse LU", res, info)
        lu = spla.splu(A.tocsc())
        x = lu.solve(b)
        for _ in range(2):
            x = x + lu.solve(b - A @ x)
        res = np.linalg.norm(A @ x - b) / bnorm
    if res > tol:
        floor = roundoff_floor(A, x, b)
        if not res <= 10.0 * floor:
            raise SolveFailed(f"relative residual {res:.3e} above tolerance {tol:.1e}", residual=res)
        logger.warning("relative residual %.3e is at the round-off floor %.3e; accepted", res, floor)
    u[system.free] = x
    return u


# -- post-processing ----------------------------------------------------------


@dataclass
class ProjectedSolution:
    """Per-cell polynomial data of a discrete solution.

    ``value[c]`` are coefficients of ``Pi^nabla_k u_h`` and ``grad[c]`` of the
    L2 projection of the gradient onto ``P_{k-1}`` (shape ``(2, n_low)``),
    both in the scaled monomials of cell ``c`` (center ``centers[c]``,
    scale ``h[c]``).
    """

    order: int
    elements: list
    value: np.ndarray  # (n_cells, n_k)
    grad: np.ndarray  # (n_cells, 2, n_{k-1})
    cells: CellSet | None = None

    @property
    def centers(self) -> np.ndarray:
        if self.cells is not None:
            return self.cells.centroid
        return np.array([el.monomials.center for el in self.elements])

    @property
    def h(self) -> np.ndarray:
        if self.cells is not None:
            return self.cells.diameter
        return np.array([el.monomials.h for el in self.elements])

    def cell_gradient(self, c: int, pts) -> np.ndarray:
        """Gradient of ``Pi^nabla_k u_h`` on cell ``c`` at ``pts``."""
        return self.elements[c].monomials.evaluate_gradient(self.value[c], pts)

    def projected_gradient(self, c: int, pts) -> np.ndarray:
        """The L2-projected gradient (degree k-1) at ``pts``."""
        low = self.elements[c].low_monomials.values(pts)
        return low @ self.grad[c].T

    def gradient_at(self, pts: np.ndarray, cell: np.ndarray, centers=None, h=None) -> np.ndarray:
        """Gradient of ``Pi^nabla_k u_h`` at ``pts[i]`` inside cell ``cell[i]``."""
        centers = self.centers if centers is None else centers
        h = self.h if h is None else h
        X = (pts - centers[cell]) / h[cell, None]
        gm = monomial_gradients(X[:, 0], X[:, 1], self.order, h[cell])
        return np.einsum("pad,pa->pd", gm, self.value[cell])


def project_solution(mesh: Mesh, k: int, u: np.ndarray, elements=None, dofmap=None, stacks=None) -> ProjectedSolution:
    dofmap = dofmap or build_dofmap(mesh, k)
    elements = elements or element_list(mesh, k, dofmap)
    stacks = stacks or stack_elements(elements, dofmap)
    value = np.empty((len(elements), monomial_count(k)))
    grad = np.empty((len(elements), 2, monomial_count(k - 1)))
    for st in stacks:
        ul = u[st.dofs]
        value[st.cells] = np.einsum("bai,bi->ba", st.pi_star, ul)
        grad[st.cells] = np.einsum("bjai,bi->bja", st.grad_star, ul)
    return ProjectedSolution(k, elements, value, grad, mesh.cellset)


def energy_error(proj: ProjectedSolution, grad_u, degree: int | None = None, per_cell: bool = False):
    """``|| grad(u - Pi u_h) ||`` over the mesh, by polygon quadrature.

    With ``per_cell`` the squared contributions of every cell are returned.
    """
    degree = degree if degree is not None else min(2 * proj.order + 2, 8)
    if proj.cells is None:
        parts = []
        for c, el in enumerate(proj.elements):
            q = polygon_quadrature(el.polygon, degree)
            gu = np.column_stack(grad_u(q.points[:, 0], q.points[:, 1]))
            parts.append(float(q.weights @ ((gu - proj.cell_gradient(c, q.points)) ** 2).sum(axis=1)))
        e2 = np.array(parts)
    else:
        cs = proj.cells
        centers, h = proj.centers, proj.h
        e2 = np.zeros(cs.n_cells)
        for sel in cs.chunks():
            pts, w, cell = cs.fan_quadrature(degree, sel)
            gu = np.column_stack(grad_u(pts[:, 0], pts[:, 1]))
            diff = gu - proj.gradient_at(pts, cell, centers, h)
            e2 += np.bincount(cell, w * (diff**2).sum(axis=1), cs.n_cells)
    return e2 if per_cell else float(np.sqrt(e2.sum()))


@dataclass
class Solution:
    """A solved discrete problem together with everything needed downstream."""

    mesh: Mesh
    order: int
    dofmap: DofMap
    elements: list
    u: np.ndarray
    f_avg: np.ndarray
    projection: ProjectedSolution
    residual: float
    stacks: list | None = None

    @property
    def ndof(self) -> int:
        return self.dofmap.ndof


def solve_problem(mesh: Mesh, k: int, f, g=None, tol: float = 1e-12, u0=None) -> Solution:
    """Assemble, solve and project in one call; ``u0`` is an optional initial guess."""
    dofmap = build_dofmap(mesh, k)
    elements = element_list(mesh, k, dofmap)
    stacks = elements.stacks
    f_avg = cell_averages(mesh.cellset, f)
    system = assemble(mesh, k, f, g=g, elements=elements, dofmap=dofmap, f_avg=f_avg, stacks=stacks)
    u = solve(system, tol=tol, x0=u0)
    bn = np.linalg.norm(system.b_free)
    res = float(np.linalg.norm(system.A_free @ u[system.free] - system.b_free) / bn) if bn else 0.0
    proj = project_solution(mesh, k, u, elements, dofmap, stacks)
    return Solution(mesh, k, dofmap, elements, u, f_avg, proj, res, stacks)
