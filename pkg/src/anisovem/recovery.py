"""Zienkiewicz-Zhu gradient recovery and the error-gradient tensors G_K."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ScaledMonomials, monomial_count, monomial_gradients, monomial_values, polygon_quadrature
from .mesh import Mesh
from .vem import ProjectedSolution

RANK_TOL = 1e-10


def zz_vertex_average(mesh: Mesh, proj: ProjectedSolution) -> np.ndarray:
    """Area-weighted average, at each vertex, of the incident cells' gradients.

    The cell gradient is that of the projected solution, evaluated at the
    vertex (constant per cell for order 1). Returns shape ``(n_vertices, 2)``.
    """
    cs = mesh.cellset
    g = proj.gradient_at(cs.v, cs.cell)
    wa = cs.area[cs.cell]
    num = np.column_stack([np.bincount(cs.idx, wa * g[:, d], mesh.n_vertices) for d in (0, 1)])
    den = np.bincount(cs.idx, wa, mesh.n_vertices)
    return num / den[:, None]


def _svd_solve(V: np.ndarray, values: np.ndarray):
    """Least-squares solutions for full-column-rank matrices in the batch ``V``.

    Returns ``(ok, sol)``: the rank test (tolerance relative to max |V|) and
    the solutions of the matrices that pass it.
    """
    U, s, Vt = np.linalg.svd(V, full_matrices=False)
    tol = RANK_TOL * np.abs(V).max(axis=(-2, -1))
    ok = (s > tol[..., None]).all(axis=-1)
    U, s, Vt = U[ok], s[ok], Vt[ok]
    sol = Vt.transpose(0, 2, 1) @ ((U.transpose(0, 2, 1) @ values[ok]) / s[..., None])
    return ok, sol


def zz_fit_batch(X: np.ndarray, values: np.ndarray, order: int):
    """Least-squares fits for ``B`` cells with ``n`` vertices each.

    ``X`` are the vertices in the cells' scaled coordinates ``(B, n, 2)`` and
    ``values`` the recovered vertex gradients ``(B, n, 2)``. Returns
    coefficients ``(B, 2, n_basis(order))`` and the degree actually used per
    cell; rank-deficient fits drop to the next lower degree, down to the mean
    value (higher coefficients are then zero).
    """
    nb, n = X.shape[:2]
    m = monomial_count(order)
    coeffs = np.zeros((nb, 2, m))
    degree = np.full(nb, -1)
    todo = np.arange(nb)
    for d in range(order, -1, -1):
        size = monomial_count(d)
        if len(todo) == 0:
            break
        if n < size:
            continue
        V = monomial_values(X[todo, :, 0], X[todo, :, 1], d)
        ok, sol = _svd_solve(V, values[todo])  # sol: (b, size, 2)
        sel = todo[ok]
        if len(sel):
            coeffs[sel, :, :size] = sol.transpose(0, 2, 1)
            degree[sel] = d
        todo = todo[~ok]
    return coeffs, degree


def zz_cell_fit(vertex_xy: np.ndarray, values: np.ndarray, monomials: ScaledMonomials, order: int) -> np.ndarray:
    """Least-squares fit of vertex values onto P_order in the cell's scaled monomials.

    Returns coefficients of shape ``(2, n_basis(d))`` with ``d <= order`` the
    degree actually used; rank-deficient fits drop to the next lower degree,
    down to the mean value.
    """
    X = (np.asarray(vertex_xy, dtype=float) - monomials.center) / monomials.h
    coeffs, degree = zz_fit_batch(X[None], np.asarray(values, dtype=float)[None], order)
    return coeffs[0, :, : monomial_count(int(degree[0]))]


@dataclass
class Recovery:
    """Recovered vertex gradients, per-cell fits and per-cell tensors.

    ``fits[c]`` holds the fitted gradient field of cell ``c`` as coefficients
    ``(2, n_basis(k))`` in the cell's scaled monomials (degree
    ``fit_degree[c]``; higher coefficients are zero). ``cell_tensor[c]`` is
    ``int_c eta eta^T`` with ``eta`` the difference between the cell gradient
    and its fit; ``G[c]`` sums ``cell_tensor`` over the vertex patch of ``c``.
    """

    vertex_values: np.ndarray
    fits: np.ndarray
    fit_degree: np.ndarray
    cell_tensor: np.ndarray
    G: np.ndarray


def recovered_gradient(proj: ProjectedSolution, c: int, coeffs: np.ndarray, pts) -> np.ndarray:
    sm = proj.elements[c].monomials
    coeffs = np.asarray(coeffs)
    degree = {1: 0, 3: 1, 6: 2}[coeffs.shape[1]]
    return ScaledMonomials(sm.center, sm.h, degree).values(pts) @ coeffs.T


def zz_residual_tensors(mesh: Mesh, proj: ProjectedSolution, fits: np.ndarray) -> np.ndarray:
    """``int_K eta eta^T`` for every cell, by quadrature of degree ``2k``."""
    cs = mesh.cellset
    centers, h = proj.centers, proj.h
    T = np.zeros((cs.n_cells, 2, 2))
    for sel in cs.chunks():
        pts, w, cell = cs.fan_quadrature(2 * proj.order, sel)
        X = (pts - centers[cell]) / h[cell, None]
        fit = np.einsum("pa,pda->pd", monomial_values(X[:, 0], X[:, 1], proj.order), fits[cell])
        gm = monomial_gradients(X[:, 0], X[:, 1], proj.order, h[cell])
        eta = np.einsum("pad,pa->pd", gm, proj.value[cell]) - fit
        for i in range(2):
            for j in range(i, 2):
                T[:, i, j] += np.bincount(cell, w * eta[:, i] * eta[:, j], cs.n_cells)
    T[:, 1, 0] = T[:, 0, 1]
    return T


def zz_residual_tensor(proj: ProjectedSolution, c: int, coeffs: np.ndarray) -> np.ndarray:
    """``int_c eta eta^T`` for one cell."""
    q = polygon_quadrature(proj.elements[c].polygon, 2 * proj.order)
    eta = proj.cell_gradient(c, q.points) - recovered_gradient(proj, c, coeffs, q.points)
    return np.einsum("q,qi,qj->ij", q.weights, eta, eta)


def recover(mesh: Mesh, proj: ProjectedSolution) -> Recovery:
    """Run ZZ recovery and build G_K for every cell."""
    k = proj.order
    cs = mesh.cellset
    vvals = zz_vertex_average(mesh, proj)
    centers, h = proj.centers, proj.h
    fits = np.zeros((cs.n_cells, 2, monomial_count(k)))
    degree = np.empty(cs.n_cells, dtype=int)
    for n, cells in cs.groups.items():
        pos = cs.group_positions(cells, n)
        X = (cs.v[pos] - centers[cells, None, :]) / h[cells, None, None]
        fits[cells], degree[cells] = zz_fit_batch(X, vvals[cs.idx[pos]], k)
    T = zz_residual_tensors(mesh, proj, fits)
    G = g_tensors(mesh, T)
    return Recovery(vvals, fits, degree, T, G)


def g_tensors(mesh: Mesh, cell_tensor: np.ndarray) -> np.ndarray:
    """Sum per-cell tensors over each cell's vertex (closure) patch."""
    P = mesh.patch_matrix()
    return (P @ cell_tensor.reshape(len(cell_tensor), 4)).reshape(-1, 2, 2)


def g_tensor(mesh: Mesh, proj: ProjectedSolution, c: int) -> np.ndarray:
    """G_K for a single cell (convenience wrapper around :func:`recover`)."""
    return recover(mesh, proj).G[c]
