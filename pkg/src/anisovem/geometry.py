"""Exact polygon primitives.

Moments, covariance spectra, the anisotropic reference map, straight-line
clipping of convex polygons, polygonal quadrature and scaled monomials.
Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import ClipFailed, DegenerateElement, NotConvex, NotSPD, UnsupportedDegree

AREA_EPS = 1e-14
SNAP_TOL = 1e-10
TIE_TOL = 1e-12
MAX_QUAD_DEGREE = 8


class Polygon:
    """Counter-clockwise vertex loop with cached area, centroid and diameter."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("a polygon needs at least 3 two-dimensional vertices")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        self.vertices = v
        area = self.signed_area
        if area <= AREA_EPS * self.diameter**2:
            if area < -AREA_EPS * self.diameter**2:
                raise ValueError("polygon vertices must be ordered counter-clockwise")
            raise DegenerateElement(f"polygon area {area:.3e} is below the degeneracy threshold")

    @classmethod
    def trusted(cls, vertices, area, centroid, cov, diameter) -> "Polygon":
        """Build from already validated vertices and precomputed moments."""
        poly = cls.__new__(cls)
        poly.vertices = vertices
        poly.__dict__["_moments"] = (float(area), centroid, cov)
        poly.__dict__["diameter"] = float(diameter)
        return poly

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"Polygon(n={len(self)}, area={self.area:.4g})"

    @cached_property
    def _moments(self):
        return _raw_moments(self.vertices)

    @cached_property
    def signed_area(self) -> float:
        return self._moments[0]

    @property
    def area(self) -> float:
        return self._moments[0]

    @property
    def centroid(self) -> np.ndarray:
        return self._moments[1]

    @property
    def covariance(self) -> np.ndarray:
        return self._moments[2]

    @cached_property
    def diameter(self) -> float:
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d**2).sum(-1).max()))

    @cached_property
    def edge_vectors(self) -> np.ndarray:
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        return np.hypot(self.edge_vectors[:, 0], self.edge_vectors[:, 1])

    @cached_property
    def outward_normals(self) -> np.ndarray:
        """Unit outward normals, one per edge (edge i joins vertex i and i+1)."""
        e = self.edge_vectors
        return np.column_stack([e[:, 1], -e[:, 0]]) / self.edge_lengths[:, None]

    def is_convex(self, tol: float = 1e-12) -> bool:
        return loop_is_convex(self.vertices, self.diameter, tol)

    @cached_property
    def anisotropy(self) -> "AnisotropyInfo":
        return anisotropy_map(self)

    @cached_property
    def _quadratures(self) -> dict:
        return {}

    def translated(self, t) -> "Polygon":
        return Polygon(self.vertices + np.asarray(t, dtype=float))

    def mapped(self, matrix) -> "Polygon":
        """Image under the linear map x -> matrix @ x (orientation preserving)."""
        m = np.asarray(matrix, dtype=float)
        return Polygon(self.vertices @ m.T)


def _raw_moments(v: np.ndarray):
    area, centroid, cov = loop_moments(v, np.roll(v, -1, axis=0), np.zeros(len(v), dtype=int), 1)
    return float(area[0]), centroid[0], cov[0]


def loop_moments(v: np.ndarray, vn: np.ndarray, cell: np.ndarray, n_cells: int):
    """Area, centroid and covariance of many polygons from their edges.

    ``v[i] -> vn[i]`` is one CCW boundary edge of polygon ``cell[i]``.
    Boundary-integral formulas are evaluated in coordinates shifted to each
    polygon's vertex mean, which keeps small cells far from the origin exact.
    """
    count = np.bincount(cell, minlength=n_cells)
    shift = np.column_stack([np.bincount(cell, v[:, d], n_cells) for d in (0, 1)]) / count[:, None]
    x, y = (v - shift[cell]).T
    xn, yn = (vn - shift[cell]).T
    c = x * yn - xn * y
    area = 0.5 * np.bincount(cell, c, n_cells)

    def total(t):
        return np.bincount(cell, t * c, n_cells)

    sx = total(x + xn) / 6.0
    sy = total(y + yn) / 6.0
    sxx = total(x * x + x * xn + xn * xn) / 12.0
    syy = total(y * y + y * yn + yn * yn) / 12.0
    sxy = total(x * yn + 2 * x * y + 2 * xn * yn + xn * y) / 24.0
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(area == 0.0, 1.0, area)
        cx, cy = sx / safe, sy / safe
        cov = np.empty((n_cells, 2, 2))
        cov[:, 0, 0] = sxx / safe - cx * cx
        cov[:, 0, 1] = cov[:, 1, 0] = sxy / safe - cx * cy
        cov[:, 1, 1] = syy / safe - cy * cy
    cov[area == 0.0] = 0.0
    return area, np.column_stack([cx, cy]) + shift, cov


def polygon_moments(poly: Polygon):
    """Return ``(area, centroid, covariance)`` computed in closed form."""
    return poly.area, poly.centroid.copy(), poly.covariance.copy()


# -- spectral analysis -------------------------------------------------------


def eig_sym2_batch(a, b, c):
    """Vectorized closed-form eigen-decomposition of ``[[a, b], [b, c]]``.

    Returns ``(lam1, lam2, r1, r2)`` with ``lam1 >= lam2`` and eigenvectors of
    shape ``(n, 2)`` whose first nonzero component is positive; a (relative)
    eigenvalue tie yields the Cartesian frame.
    """
    a, b, c = (np.atleast_1d(np.asarray(t, dtype=float)) for t in (a, b, c))
    mean = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    lam1, lam2 = mean + rad, mean - rad
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    cos, sin = np.cos(theta), np.sin(theta)
    r1 = np.column_stack([cos, sin])
    r2 = np.column_stack([-sin, cos])
    for r in (r1, r2):
        flip = (r[:, 0] < 0) | ((r[:, 0] == 0) & (r[:, 1] < 0))
        r[flip] *= -1.0
    scale = np.maximum(np.maximum(np.abs(mean), np.abs(lam1)), np.finfo(float).tiny)
    tie = rad <= TIE_TOL * scale
    r1[tie] = (1.0, 0.0)
    r2[tie] = (0.0, 1.0)
    return lam1, lam2, r1, r2


def eig_sym2(m, require_spd: bool = True):
    """Closed-form eigen-decomposition of a symmetric 2x2 matrix.

    Returns ``(lam1, lam2, r1, r2)`` with ``lam1 >= lam2``. Eigenvectors have
    their first nonzero component positive; a (relative) eigenvalue tie yields
    the Cartesian frame.
    """
    m = np.asarray(m, dtype=float)
    a, b, c = m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1]
    lam1, lam2, r1, r2 = eig_sym2_batch(a, b, c)
    if require_spd and not (a > 0 and lam2[0] > 0):
        raise NotSPD(f"matrix [[{a}, {b}], [{b}, {c}]] is not positive definite")
    return float(lam1[0]), float(lam2[0]), r1[0], r2[0]


@dataclass(frozen=True)
class AnisotropyInfo:
    lambda1: float
    lambda2: float
    r1: np.ndarray
    r2: np.ndarray
    alpha: float
    A: np.ndarray

    @property
    def ratio(self) -> float:
        return self.lambda1 / self.lambda2

    @property
    def U(self) -> np.ndarray:
        return np.column_stack([self.r1, self.r2])


def anisotropy_arrays(area, cov):
    """Covariance spectra, ``alpha_K`` and ``A_K`` for many cells at once."""
    area = np.atleast_1d(np.asarray(area, dtype=float))
    cov = np.asarray(cov, dtype=float).reshape(-1, 2, 2)
    a, b, c = cov[:, 0, 0], 0.5 * (cov[:, 0, 1] + cov[:, 1, 0]), cov[:, 1, 1]
    lam1, lam2, r1, r2 = eig_sym2_batch(a, b, c)
    bad = ~((a > 0) & (lam2 > 0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NotSPD(f"covariance of cell {i} is not positive definite: {cov[i].tolist()}")
    alpha = np.sqrt(np.sqrt(lam1 * lam2) / area)
    A = np.empty((len(area), 2, 2))
    A[:, 0] = (alpha / np.sqrt(lam1))[:, None] * r1
    A[:, 1] = (alpha / np.sqrt(lam2))[:, None] * r2
    # reflect the second reference axis where needed so the map keeps CCW orientation
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    A[det < 0, 1] *= -1.0
    return lam1, lam2, r1, r2, alpha, A


def anisotropy_map(poly: Polygon) -> AnisotropyInfo:
    """Spectral data of the covariance matrix and the isotropizing map."""
    lam1, lam2, r1, r2, alpha, A = anisotropy_arrays(poly.area, poly.covariance)
    return AnisotropyInfo(float(lam1[0]), float(lam2[0]), r1[0], r2[0], float(alpha[0]), A[0])


# -- clipping ----------------------------------------------------------------


@dataclass(frozen=True)
class CutPoint:
    """Where the cutting line meets the boundary.

    ``edge`` is the local edge index (edge i joins vertex i and i+1) when the
    point is interior to an edge, ``vertex`` the local vertex index when the
    line passes through (or snapped to) an existing vertex.
    """

    point: np.ndarray
    edge: int | None = None
    vertex: int | None = None


@dataclass(frozen=True)
class ClipResult:
    first: Polygon
    second: Polygon
    cuts: tuple
    # local loops: entries >= 0 are parent vertex indices, -1 - j is cuts[j]
    first_loop: tuple
    second_loop: tuple

    def __iter__(self):
        yield self.first
        yield self.second


def loop_is_convex(vertices, diameter: float, tol: float = 1e-12) -> bool:
    """True if the counter-clockwise loop turns left (or goes straight) at every vertex."""
    xy = np.asarray(vertices, dtype=float).tolist()
    limit = -tol * diameter**2
    n = len(xy)
    for i in range(n):
        (x0, y0), (x1, y1), (x2, y2) = xy[i - 1], xy[i], xy[(i + 1) % n]
        if (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1) < limit:
            return False
    return True


def clip_indices(vertices, point, direction, h: float):
    """Split a convex vertex loop by the line through ``point`` along ``direction``.

    Returns ``(loop_pos, loop_neg, cuts)``; see :class:`ClipResult` for the
    loop encoding.
    """
    xy = np.asarray(vertices, dtype=float).tolist()
    px, py = float(point[0]), float(point[1])
    dx, dy = float(direction[0]), float(direction[1])
    norm = math.hypot(dx, dy)
    nx, ny = -dy / norm, dx / norm
    tol = SNAP_TOL * h
    s = [(x - px) * nx + (y - py) * ny for x, y in xy]
    side = [1 if t > tol else (-1 if t < -tol else 0) for t in s]
    if not (1 in side and -1 in side):
        raise ClipFailed("cutting line does not cross the polygon interior")

    n = len(xy)
    cuts = []
    pos, neg = [], []
    for i in range(n):
        j = (i + 1) % n
        si, sj = side[i], side[j]
        if si == 0:
            cuts.append(CutPoint(np.array(xy[i]), vertex=i))
            pos.append(i)
            neg.append(i)
        elif si > 0:
            pos.append(i)
        else:
            neg.append(i)
        if si * sj < 0:
            t = s[i] / (s[i] - s[j])
            (xi, yi), (xj, yj) = xy[i], xy[j]
            cuts.append(CutPoint(np.array([xi + t * (xj - xi), yi + t * (yj - yi)]), edge=i))
            token = -len(cuts)
            pos.append(token)
            neg.append(token)
    if len(cuts) != 2:
        raise NotConvex(f"line meets the boundary {len(cuts)} times; polygon is not convex")
    return tuple(pos), tuple(neg), tuple(cuts)


def clip_polygon(poly: Polygon, point, direction) -> ClipResult:
    """Cut a convex polygon along a straight line through an interior point."""
    if not poly.is_convex():
        raise NotConvex("clip_polygon requires a convex polygon")
    pos, neg, cuts = clip_indices(poly.vertices, point, direction, poly.diameter)

    def build(loop):
        pts = [poly.vertices[t] if t >= 0 else cuts[-1 - t].point for t in loop]
        try:
            return Polygon(pts)
        except DegenerateElement as exc:
            raise ClipFailed("cut produced a degenerate sliver") from exc

    return ClipResult(build(pos), build(neg), cuts, pos, neg)


# -- quadrature --------------------------------------------------------------


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


@lru_cache(maxsize=None)
def _reference_triangle_rule(degree: int):
    """Collapsed (Stroud) rule on the triangle (0,0),(1,0),(0,1).

    Returns barycentric-like coordinates (u, w) and weights summing to 1/2.
    """
    n = max(1, math.ceil((degree + 1) / 2))
    xj, wj = roots_jacobi(n, 0.0, 1.0)
    xl, wl = roots_legendre(n)
    u = 0.5 * (1.0 + xj)
    wu = 0.25 * wj
    w = 0.5 * (1.0 + xl)
    ww = 0.5 * wl
    uu, wwp = np.meshgrid(u, w, indexing="ij")
    weights = np.outer(wu, ww).ravel()
    # point = u * ((1 - w) e1 + w e2); jacobian u is inside wu
    pts = np.column_stack([(uu * (1 - wwp)).ravel(), (uu * wwp).ravel()])
    return pts, weights


def triangle_quadrature(a, b, c, degree: int) -> Quadrature:
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise UnsupportedDegree(f"degree {degree} outside [0, {MAX_QUAD_DEGREE}]")
    ref, w = _reference_triangle_rule(degree)
    a, b, c = (np.asarray(t, dtype=float) for t in (a, b, c))
    jac = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    pts = a + ref[:, :1] * (b - a) + ref[:, 1:] * (c - a)
    return Quadrature(pts, w * abs(jac), degree)


def polygon_quadrature(poly: Polygon, degree: int) -> Quadrature:
    """Fan sub-triangulation from the centroid with a degree-exact rule per triangle."""
    cached = poly._quadratures.get(degree)
    if cached is not None:
        return cached
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise UnsupportedDegree(f"degree {degree} outside [0, {MAX_QUAD_DEGREE}]")
    ref, w = _reference_triangle_rule(degree)
    c = poly.centroid
    v = poly.vertices - c
    vn = np.roll(v, -1, axis=0)
    jac = v[:, 0] * vn[:, 1] - v[:, 1] * vn[:, 0]  # (n,)
    pts = c + ref[None, :, :1] * v[:, None, :] + ref[None, :, 1:] * vn[:, None, :]
    weights = jac[:, None] * w[None, :]
    quad = Quadrature(pts.reshape(-1, 2), weights.ravel(), degree)
    poly._quadratures[degree] = quad
    return quad


# -- scaled monomials ---------------------------------------------------------


@lru_cache(maxsize=None)
def monomial_exponents(ell: int) -> tuple:
    """Exponent pairs ordered by total degree: 1, x, y, x^2, xy, y^2, ..."""
    return tuple((d - j, j) for d in range(ell + 1) for j in range(d + 1))


def monomial_count(ell: int) -> int:
    return (ell + 1) * (ell + 2) // 2


@dataclass(frozen=True)
class ScaledMonomials:
    """The basis ((x - c) / h)^alpha, |alpha| <= degree."""

    center: np.ndarray
    h: float
    degree: int

    @property
    def size(self) -> int:
        return monomial_count(self.degree)

    def values(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        X = (pts[:, 0] - self.center[0]) / self.h
        Y = (pts[:, 1] - self.center[1]) / self.h
        return np.column_stack([X**a * Y**b for a, b in monomial_exponents(self.degree)])

    def gradients(self, pts) -> np.ndarray:
        """Array of shape (npts, size, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        X = (pts[:, 0] - self.center[0]) / self.h
        Y = (pts[:, 1] - self.center[1]) / self.h
        out = np.zeros((len(pts), self.size, 2))
        for k, (a, b) in enumerate(monomial_exponents(self.degree)):
            if a:
                out[:, k, 0] = a * X ** (a - 1) * Y**b / self.h
            if b:
                out[:, k, 1] = b * X**a * Y ** (b - 1) / self.h
        return out

    def evaluate(self, coeffs, pts) -> np.ndarray:
        return self.values(pts) @ np.asarray(coeffs)

    def evaluate_gradient(self, coeffs, pts) -> np.ndarray:
        return np.einsum("pkd,k->pd", self.gradients(pts), np.asarray(coeffs))


def scaled_monomials(poly: Polygon, ell: int) -> ScaledMonomials:
    if ell < 0:
        raise ValueError("monomial degree must be non-negative")
    return ScaledMonomials(poly.centroid.copy(), poly.diameter, ell)


def monomial_values(X, Y, degree: int) -> np.ndarray:
    """Scaled monomials at already-scaled coordinates; shape ``X.shape + (size,)``."""
    return np.stack([X**a * Y**b for a, b in monomial_exponents(degree)], axis=-1)


def monomial_gradients(X, Y, degree: int, h) -> np.ndarray:
    """Gradients w.r.t. the unscaled coordinates; shape ``X.shape + (size, 2)``."""
    h = np.asarray(h, dtype=float)
    zero = np.zeros(np.broadcast(X, Y).shape)
    cols = []
    for a, b in monomial_exponents(degree):
        gx = a * X ** max(a - 1, 0) * Y**b if a else zero
        gy = b * X**a * Y ** max(b - 1, 0) if b else zero
        cols.append(np.stack([gx / h, gy / h], axis=-1))
    return np.stack(cols, axis=-2)


# -- many cells at once -------------------------------------------------------


class CellSet:
    """Flat arrays describing many CCW polygons that share a vertex array.

    Position ``i`` of the flat arrays is the edge from vertex ``idx[i]`` to
    ``idx[next[i]]`` of cell ``cell[i]``; cell ``c`` owns positions
    ``offsets[c]:offsets[c + 1]``.
    """

    def __init__(self, xy: np.ndarray, loops):
        self.xy = xy
        counts = np.fromiter((len(loop) for loop in loops), dtype=int, count=len(loops))
        self.n_cells = len(counts)
        self.counts = counts
        self.offsets = np.zeros(self.n_cells + 1, dtype=int)
        np.cumsum(counts, out=self.offsets[1:])
        total = int(self.offsets[-1])
        self.idx = np.fromiter(itertools.chain.from_iterable(loops), dtype=int, count=total)
        self.cell = np.repeat(np.arange(self.n_cells), counts)
        flat = np.arange(total)
        last = flat == self.offsets[1:][self.cell] - 1
        self.next = np.where(last, self.offsets[:-1][self.cell], flat + 1)
        self.v = xy[self.idx]
        self.vn = self.v[self.next]
        self.area, self.centroid, self.cov = loop_moments(self.v, self.vn, self.cell, self.n_cells)
        self.diameter = np.empty(self.n_cells)
        for n, cells in self.groups.items():
            V = self.group_vertices(cells, n)
            d = V[:, :, None, :] - V[:, None, :, :]
            self.diameter[cells] = np.sqrt((d**2).sum(-1).max(axis=(1, 2)))

    @cached_property
    def groups(self) -> dict:
        """Cell indices grouped by vertex count."""
        order = np.argsort(self.counts, kind="stable")
        sizes = self.counts[order]
        cuts = np.flatnonzero(np.diff(sizes)) + 1
        starts = np.concatenate([[0], cuts]) if len(order) else []
        return {int(sizes[s]): g for s, g in zip(starts, np.split(order, cuts))}

    def group_positions(self, cells: np.ndarray, n: int) -> np.ndarray:
        return self.offsets[cells][:, None] + np.arange(n)

    def group_vertices(self, cells: np.ndarray, n: int) -> np.ndarray:
        return self.v[self.group_positions(cells, n)]

    def fan_quadrature(self, degree: int, positions: slice | None = None):
        """Centroid-fan quadrature: ``(points, weights, cell)``.

        Per cell, points come in the same order as :func:`polygon_quadrature`.
        ``positions`` restricts the rule to a range of flat edge positions
        (see :meth:`chunks`); only the full rule is cached.
        """
        if positions is None and degree in self._fan:
            return self._fan[degree]
        if not 0 <= degree <= MAX_QUAD_DEGREE:
            raise UnsupportedDegree(f"degree {degree} outside [0, {MAX_QUAD_DEGREE}]")
        sel = slice(None) if positions is None else positions
        ref, w = _reference_triangle_rule(degree)
        cell = self.cell[sel]
        c = self.centroid[cell]
        v = self.v[sel] - c
        vn = self.vn[sel] - c
        jac = v[:, 0] * vn[:, 1] - v[:, 1] * vn[:, 0]
        pts = c[:, None, :] + ref[None, :, :1] * v[:, None, :] + ref[None, :, 1:] * vn[:, None, :]
        weights = jac[:, None] * w[None, :]
        out = (pts.reshape(-1, 2), weights.ravel(), np.repeat(cell, len(w)))
        if positions is None:
            self._fan[degree] = out
        return out

    def chunks(self, size: int = 65536):
        """Slices of flat edge positions, for bounded-memory quadrature loops."""
        total = len(self.idx)
        for start in range(0, total, size):
            yield slice(start, min(start + size, total))

    @cached_property
    def _fan(self) -> dict:
        return {}

    def integrate(self, values, degree: int) -> np.ndarray:
        """Per-cell integrals of ``values(x, y)`` (vectorized callable)."""
        out = np.zeros(self.n_cells)
        for sel in self.chunks():
            pts, w, cell = self.fan_quadrature(degree, sel)
            out += np.bincount(cell, w * values(pts[:, 0], pts[:, 1]), self.n_cells)
        return out

    def polygons(self) -> list:
        """:class:`Polygon` objects sharing this set's precomputed moments."""
        return [
            Polygon.trusted(
                self.v[self.offsets[c] : self.offsets[c + 1]], self.area[c], self.centroid[c], self.cov[c], self.diameter[c]
            )
            for c in range(self.n_cells)
        ]
