"""Anisotropic and isotropic a posteriori error indicators.

Three global estimators are produced from the same per-cell and per-edge
pieces:

* ``theory``: cell residual, edge jump and stabilization scaled by
  ``M_K^2 = (lambda_1/lambda_2)^{5/2}``;
* ``heur``: the same without the ``M_K`` scaling;
* ``iso``: classical ``h_K^2 ||R_K||^2 + h_E ||J_E||^2 + sigma~_K^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import MissingGTensor
from .geometry import anisotropy_arrays, polygon_quadrature
from .recovery import Recovery
from .vem import Solution, stack_elements


class Kind(str, Enum):
    THEORY = "theory"
    HEURISTIC = "heur"
    ISOTROPIC = "iso"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        aliases = {"heuristic": "heur", "isotropic": "iso", "theoretical": "theory"}
        v = str(value).lower()
        return cls(aliases.get(v, v))

    @property
    def anisotropic(self) -> bool:
        return self is not Kind.ISOTROPIC


@dataclass
class IndicatorSet:
    kind: Kind
    # per cell
    R_norm: np.ndarray
    sigma_tilde2: np.ndarray
    sigma2: np.ndarray
    M: np.ndarray
    weight: np.ndarray  # anisotropic weight w_K (nan without recovery)
    eta2: np.ndarray  # ||R_K|| w_K
    iso_cell: np.ndarray  # h_K^2 ||R_K||^2
    score: np.ndarray
    # per interior edge
    edges: np.ndarray
    J_norm: np.ndarray
    xi2: np.ndarray
    iso_edge: np.ndarray  # h_E ||J_E||^2
    oscillation: np.ndarray | None = None

    @property
    def eta_theory(self) -> float:
        return float(np.sqrt(self.eta2.sum() + self.xi2.sum() + self.sigma2.sum()))

    @property
    def eta_heur(self) -> float:
        return float(np.sqrt(self.eta2.sum() + self.xi2.sum() + self.sigma_tilde2.sum()))

    @property
    def eta_iso(self) -> float:
        return float(np.sqrt(self.iso_cell.sum() + self.iso_edge.sum() + self.sigma_tilde2.sum()))

    @property
    def value(self) -> float:
        """The global estimator of the driving kind."""
        return {Kind.THEORY: self.eta_theory, Kind.HEURISTIC: self.eta_heur, Kind.ISOTROPIC: self.eta_iso}[self.kind]

    def component_sums(self) -> tuple:
        """(cell, edge, stabilization) squared sums of the driving kind."""
        if self.kind is Kind.ISOTROPIC:
            return float(self.iso_cell.sum()), float(self.iso_edge.sum()), float(self.sigma_tilde2.sum())
        sig = self.sigma2 if self.kind is Kind.THEORY else self.sigma_tilde2
        return float(self.eta2.sum()), float(self.xi2.sum()), float(sig.sum())


def anisotropic_weight(info, G: np.ndarray) -> float:
    """alpha^{-1} (lambda_1 r_1.G r_1 + lambda_2 r_2.G r_2)^{1/2}."""
    t = info.lambda1 * info.r1 @ G @ info.r1 + info.lambda2 * info.r2 @ G @ info.r2
    return float(np.sqrt(max(t, 0.0)) / info.alpha)


def residual_norm(sol: Solution, c: int) -> float:
    """||f_h + div(projected gradient)||_{L2(K)}; the divergence vanishes for k = 1."""
    el = sol.elements[c]
    r = sol.f_avg[c]
    if sol.order == 2:
        g = sol.projection.grad[c]
        r += (g[0, 1] + g[1, 2]) / el.monomials.h
    return abs(r) * np.sqrt(el.polygon.area)


def jump_norm(sol: Solution, edge: int) -> float:
    """L2 norm over an interior edge of the normal jump of the projected gradient."""
    et = sol.mesh.edges
    c0, c1 = et.cells[edge]
    if c1 < 0:
        return 0.0
    a, b = sol.mesh.vertices[et.vertices[edge]]
    t = b - a
    length = float(np.hypot(*t))
    normal = np.array([t[1], -t[0]]) / length
    s, w = leggauss(sol.order)
    pts = a + 0.5 * (1 + s)[:, None] * t
    proj = sol.projection
    jump = (proj.projected_gradient(c0, pts) - proj.projected_gradient(c1, pts)) @ normal
    return float(np.sqrt(0.5 * length * (w @ jump**2)))


def edge_jump_norms(sol: Solution, edges: np.ndarray) -> np.ndarray:
    """Vectorized :func:`jump_norm` over interior edges."""
    mesh = sol.mesh
    et = mesh.edges
    c0, c1 = et.cells[edges].T
    ab = mesh.vertices[et.vertices[edges]]
    t = ab[:, 1] - ab[:, 0]
    length = np.hypot(t[:, 0], t[:, 1])
    normal = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    proj = sol.projection
    centers, hs = proj.centers, proj.h
    coeffs = proj.grad  # (nc, 2, n_low)
    s, w = leggauss(sol.order)
    total = np.zeros(len(edges))
    for sq, wq in zip(s, w):
        pts = ab[:, 0] + 0.5 * (1 + sq) * t
        jump = np.zeros(len(edges))
        for cells, sign in ((c0, 1.0), (c1, -1.0)):
            g = coeffs[cells, :, 0]
            if sol.order == 2:
                X = (pts - centers[cells]) / hs[cells, None]
                g = g + coeffs[cells, :, 1] * X[:, :1] + coeffs[cells, :, 2] * X[:, 1:]
            jump += sign * np.einsum("ed,ed->e", g, normal)
        total += wq * jump**2
    return np.sqrt(0.5 * length * total)


def stabilization_term(sol: Solution, c: int, info=None) -> tuple:
    """(sigma~_K^2, sigma_K^2, M_K) for cell ``c``."""
    el = sol.elements[c]
    ul = sol.u[sol.dofmap.cell_dofs[c]]
    # S = (I - Pi)^T (I - Pi), summed as squares to avoid cancellation
    r = ul - el.D @ (el.pi_star @ ul)
    st = float(r @ r)
    info = info or el.polygon.anisotropy
    M = info.ratio**1.25
    return st, M * M * st, M


def stabilization_terms(sol: Solution) -> np.ndarray:
    """sigma~_K^2 for every cell."""
    st = np.empty(len(sol.elements))
    stacks = sol.stacks or stack_elements(sol.elements, sol.dofmap)
    for s in stacks:
        ul = sol.u[s.dofs]
        r = ul - np.einsum("bia,ba->bi", s.D, np.einsum("bai,bi->ba", s.pi_star, ul))
        st[s.cells] = (r * r).sum(axis=1)
    return st


def data_oscillation(sol: Solution, f, c: int, degree: int = 6) -> float:
    """||f - f_h||_{L2(K)} (diagnostic only)."""
    q = polygon_quadrature(sol.elements[c].polygon, degree)
    d = f(q.points[:, 0], q.points[:, 1]) - sol.f_avg[c]
    return float(np.sqrt(q.weights @ d**2))


def data_oscillations(sol: Solution, f, degree: int = 6) -> np.ndarray:
    """:func:`data_oscillation` for every cell."""
    cs = sol.mesh.cellset
    f_avg = np.asarray(sol.f_avg, dtype=float)
    out = np.zeros(cs.n_cells)
    for sel in cs.chunks():
        pts, w, cell = cs.fan_quadrature(degree, sel)
        d = f(pts[:, 0], pts[:, 1]) - f_avg[cell]
        out += np.bincount(cell, w * d**2, cs.n_cells)
    return np.sqrt(out)


def estimate(sol: Solution, kind, recovery: Recovery | None = None, f=None) -> IndicatorSet:
    """All indicators for ``sol``; ``recovery`` is required for anisotropic kinds.

    Pass ``f`` to also compute the ``||f - f_h||`` diagnostic.
    """
    kind = Kind.parse(kind)
    if kind.anisotropic and recovery is None:
        raise MissingGTensor(f"estimator {kind.value!r} needs the recovered G_K tensors")
    mesh = sol.mesh
    cs = mesh.cellset
    areas, h = cs.area, cs.diameter
    lam1, lam2, r1, r2, alpha, _ = anisotropy_arrays(areas, cs.cov)

    r = np.asarray(sol.f_avg, dtype=float).copy()
    if sol.order == 2:
        g = sol.projection.grad
        r += (g[:, 0, 1] + g[:, 1, 2]) / sol.projection.h
    R = np.abs(r) * np.sqrt(areas)
    st2 = stabilization_terms(sol)
    M = (lam1 / lam2) ** 1.25
    s2 = M * M * st2
    w = np.full(cs.n_cells, np.nan)
    if recovery is not None:
        G = recovery.G
        t = lam1 * np.einsum("ci,cij,cj->c", r1, G, r1) + lam2 * np.einsum("ci,cij,cj->c", r2, G, r2)
        w = np.sqrt(np.maximum(t, 0.0)) / alpha

    et = mesh.edges
    interior = np.flatnonzero(~et.boundary)
    J = edge_jump_norms(sol, interior)
    ev = mesh.vertices[et.vertices[interior]]
    lengths = np.hypot(*(ev[:, 1] - ev[:, 0]).T)
    ec = et.cells[interior]
    eta2 = R * w
    if recovery is not None:
        edge_w = np.maximum(w[ec[:, 0]] * np.sqrt(lengths / areas[ec[:, 0]]), w[ec[:, 1]] * np.sqrt(lengths / areas[ec[:, 1]]))
        xi2 = J * edge_w
    else:
        xi2 = np.full(len(interior), np.nan)
    iso_cell = h**2 * R**2
    iso_edge = lengths * J**2

    if kind is Kind.ISOTROPIC:
        cell_part, edge_part, stab = iso_cell, iso_edge, st2
    else:
        cell_part, edge_part = eta2, xi2
        stab = s2 if kind is Kind.THEORY else st2
    score = cell_part + stab
    np.add.at(score, ec[:, 0], 0.5 * edge_part)
    np.add.at(score, ec[:, 1], 0.5 * edge_part)

    osc = None if f is None else data_oscillations(sol, f)
    return IndicatorSet(kind, R, st2, s2, M, w, eta2, iso_cell, score, interior, J, xi2, iso_edge, osc)
