"""Polygonal mesh of the unit square with edge adjacency and cell splitting.

Hanging vertices created by a cut are absorbed into the neighbouring cell as
ordinary (collinear) polygon vertices, so the mesh stays conforming and every
edge is shared by at most two cells.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DegenerateElement, NotConvex
from .geometry import AREA_EPS, CellSet, Polygon, anisotropy_map, clip_indices, loop_is_convex

BOUNDARY = -1


def _key(a: int, b: int) -> tuple:
    return (a, b) if a < b else (b, a)


@dataclass
class EdgeTable:
    """Global edges ordered by sorted vertex pair.

    ``vertices[e]`` follows the orientation of ``cells[e, 0]``; ``cells[e, 1]``
    is ``BOUNDARY`` for boundary edges. ``flat[i]`` is the edge at flat
    position ``i`` of the mesh's :class:`CellSet`.
    """

    vertices: np.ndarray
    cells: np.ndarray
    flat: np.ndarray

    def __len__(self):
        return len(self.vertices)

    @property
    def index(self) -> dict:
        """Map from sorted vertex pair to edge index."""
        return {_key(int(a), int(b)): e for e, (a, b) in enumerate(self.vertices)}

    @property
    def boundary(self) -> np.ndarray:
        return self.cells[:, 1] == BOUNDARY


@dataclass
class Patch:
    center: int
    members: frozenset = field(default_factory=frozenset)


class Mesh:
    """Vertices, CCW cell loops and an incrementally maintained edge map."""

    def __init__(self, vertices, cells):
        xy = np.asarray(vertices, dtype=float).reshape(-1, 2)
        self._xy = np.empty((max(16, 2 * len(xy)), 2))
        self._xy[: len(xy)] = xy
        self._nv = len(xy)
        self.cells = [list(map(int, c)) for c in cells]
        self.generation = [0] * len(self.cells)
        # vertex created by a cut -> endpoints of the edge it was inserted into
        self.vertex_parents: dict = {}
        self._edge_cells: dict = {}
        for k, loop in enumerate(self.cells):
            for a, b in zip(loop, loop[1:] + loop[:1]):
                self._edge_cells.setdefault(_key(a, b), []).append(k)
        bad = [e for e, cs in self._edge_cells.items() if len(cs) > 2]
        if bad:
            raise ValueError(f"edges shared by more than two cells: {bad[:5]}")
        self._invalidate()

    # -- caches ---------------------------------------------------------------

    def _invalidate(self):
        self._edge_table = None
        self._vertex_cells = None
        self._cellset = None
        self._polygons = {}

    @property
    def vertices(self) -> np.ndarray:
        return self._xy[: self._nv]

    @property
    def n_vertices(self) -> int:
        return self._nv

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def polygon(self, k: int) -> Polygon:
        poly = self._polygons.get(k)
        if poly is None:
            poly = Polygon(self.vertices[self.cells[k]])
            self._polygons[k] = poly
        return poly

    def polygons(self) -> list:
        missing = [k for k in range(self.n_cells) if k not in self._polygons]
        if missing:
            cs = CellSet(self.vertices, [self.cells[k] for k in missing])
            thin = cs.area <= AREA_EPS * cs.diameter**2
            if np.any(thin):
                k = missing[int(np.flatnonzero(thin)[0])]
                raise DegenerateElement(f"cell {k} has area {cs.area[np.flatnonzero(thin)[0]]:.3e}")
            self._polygons.update(zip(missing, cs.polygons()))
        return [self._polygons[k] for k in range(self.n_cells)]

    @property
    def cellset(self) -> CellSet:
        """Flat vectorized view of the current cells."""
        if self._cellset is None:
            self._cellset = CellSet(self.vertices, self.cells)
        return self._cellset

    @property
    def edges(self) -> EdgeTable:
        if self._edge_table is None:
            cs = self.cellset
            a, b = cs.idx, cs.idx[cs.next]
            key = np.minimum(a, b) * self.n_vertices + np.maximum(a, b)
            order = np.lexsort((cs.cell, key))
            ks = key[order]
            first = np.ones(len(ks), dtype=bool)
            first[1:] = ks[1:] != ks[:-1]
            edge_sorted = np.cumsum(first) - 1
            flat = np.empty(len(ks), dtype=int)
            flat[order] = edge_sorted
            head = order[first]
            verts = np.column_stack([a[head], b[head]])
            cells = np.full((len(head), 2), BOUNDARY, dtype=int)
            cells[:, 0] = cs.cell[head]
            cells[edge_sorted[~first], 1] = cs.cell[order[~first]]
            self._edge_table = EdgeTable(verts, cells, flat)
        return self._edge_table

    def cell_edges(self, k: int) -> list:
        """Global edge indices of the local edges of cell ``k`` (edge i: v_i -> v_i+1)."""
        cs = self.cellset
        return self.edges.flat[cs.offsets[k] : cs.offsets[k + 1]].tolist()

    @property
    def boundary_vertices(self) -> np.ndarray:
        et = self.edges
        flags = np.zeros(self.n_vertices, dtype=bool)
        flags[et.vertices[et.boundary].ravel()] = True
        return flags

    @property
    def vertex_cells(self) -> list:
        if self._vertex_cells is None:
            vc = [[] for _ in range(self.n_vertices)]
            for k, loop in enumerate(self.cells):
                for v in loop:
                    vc[v].append(k)
            self._vertex_cells = vc
        return self._vertex_cells

    def areas(self) -> np.ndarray:
        return self.cellset.area.copy()

    def cell_incidence(self) -> sp.csr_matrix:
        """Sparse cells x vertices 0/1 matrix."""
        cs = self.cellset
        ones = np.ones(len(cs.idx))
        return sp.csr_matrix((ones, (cs.cell, cs.idx)), shape=(self.n_cells, self.n_vertices))

    def patch_matrix(self) -> sp.csr_matrix:
        """Sparse 0/1 matrix with ``P[k, j] = 1`` iff cells ``k`` and ``j`` share a vertex."""
        C = self.cell_incidence()
        P = (C @ C.T).tocsr()
        P.data[:] = 1.0
        return P

    def copy(self) -> "Mesh":
        m = Mesh(self.vertices, self.cells)
        m.generation = list(self.generation)
        m.vertex_parents = dict(self.vertex_parents)
        return m

    def prolongate(self, values) -> np.ndarray:
        """Extend vertex values to vertices added since, linearly along their parent edges."""
        values = np.asarray(values, dtype=float)
        n_old = len(values)
        out = np.empty(self._nv)
        out[:n_old] = values
        new = np.arange(n_old, self._nv)
        if not len(new):
            return out
        xy = self.vertices
        ab = np.array([self.vertex_parents[v] for v in new.tolist()])
        d = xy[ab[:, 1]] - xy[ab[:, 0]]
        t = np.einsum("ij,ij->i", xy[new] - xy[ab[:, 0]], d) / np.einsum("ij,ij->i", d, d)
        # a parent may itself be new, so fill in waves
        known = np.zeros(self._nv, dtype=bool)
        known[:n_old] = True
        todo = np.ones(len(new), dtype=bool)
        while todo.any():
            ready = todo & known[ab[:, 0]] & known[ab[:, 1]]
            i = np.flatnonzero(ready)
            out[new[i]] = (1 - t[i]) * out[ab[i, 0]] + t[i] * out[ab[i, 1]]
            known[new[i]] = True
            todo &= ~ready
        return out

    # -- refinement -----------------------------------------------------------

    def _add_vertex(self, p) -> int:
        if self._nv == len(self._xy):
            grown = np.empty((2 * len(self._xy), 2))
            grown[: self._nv] = self._xy[: self._nv]
            self._xy = grown
        self._xy[self._nv] = p
        self._nv += 1
        return self._nv - 1

    def split_cell(self, k: int, point, direction, diameter: float | None = None) -> int:
        """Cut cell ``k`` by the line through ``point`` along ``direction``.

        Cell ``k`` keeps the part on the left of the directed line, the other
        part is appended; the index of the new cell is returned. Neighbours
        across a cut edge receive the intersection point as a new vertex.
        The mesh is left untouched when the cut fails. ``diameter`` may be
        passed when already known, to skip building the cell's polygon.
        """
        loop = self.cells[k]
        if diameter is None:
            diameter = self.polygon(k).diameter
        xy = self.vertices[loop]
        if not loop_is_convex(xy, diameter):
            raise NotConvex(f"cell {k} is not convex")
        pos, neg, cuts = clip_indices(xy, point, direction, diameter)
        n = len(loop)

        # all checks passed: mutate
        cut_ids = []
        for cut in cuts:
            if cut.vertex is not None:
                cut_ids.append(loop[cut.vertex])
                continue
            a, b = loop[cut.edge], loop[(cut.edge + 1) % n]
            v = self._add_vertex(cut.point)
            self.vertex_parents[v] = (a, b)
            cut_ids.append(v)
            owners = self._edge_cells.pop(_key(a, b))
            for other in owners:
                if other == k:
                    continue
                oloop = self.cells[other]
                ib = oloop.index(b)
                # neighbour traverses the edge as b -> a
                oloop.insert(ib + 1, v)
                self._edge_cells[_key(b, v)] = [other]
                self._edge_cells[_key(v, a)] = [other]
                self._polygons.pop(other, None)

        def resolve(local):
            return [loop[t] if t >= 0 else cut_ids[-1 - t] for t in local]

        first, second = resolve(pos), resolve(neg)
        for a, b in zip(loop, loop[1:] + loop[:1]):
            owners = self._edge_cells.get(_key(a, b))
            if owners is not None:
                owners.remove(k)
                if not owners:
                    del self._edge_cells[_key(a, b)]
        new = len(self.cells)
        self.cells[k] = first
        self.cells.append(second)
        gen = self.generation[k] + 1
        self.generation[k] = gen
        self.generation.append(gen)
        for cid, cl in ((k, first), (new, second)):
            for a, b in zip(cl, cl[1:] + cl[:1]):
                self._edge_cells.setdefault(_key(a, b), []).append(cid)
        polys = self._polygons
        self._invalidate()
        polys.pop(k, None)
        self._polygons = polys
        return new

    # -- patches --------------------------------------------------------------

    def vertex_patch(self, v: int) -> Patch:
        return Patch(v, frozenset(self.vertex_cells[v]))

    def cell_patch(self, k: int) -> Patch:
        vc = self.vertex_cells
        return Patch(k, frozenset(itertools.chain.from_iterable(vc[v] for v in self.cells[k])))

    # -- validation -----------------------------------------------------------

    def check(self, tol: float = 1e-10) -> None:
        """Raise ``AssertionError`` if a mesh invariant is violated."""
        total = 0.0
        for k in range(self.n_cells):
            poly = Polygon(self.vertices[self.cells[k]])
            assert poly.is_convex(), f"cell {k} not convex"
            total += poly.area
        assert abs(total - 1.0) <= tol, f"cells cover area {total}"
        rebuilt = {}
        for k, loop in enumerate(self.cells):
            for a, b in zip(loop, loop[1:] + loop[:1]):
                rebuilt.setdefault(_key(a, b), []).append((k, a, b))
        assert set(rebuilt) == set(self._edge_cells), "edge map out of sync"
        for key, owners in rebuilt.items():
            assert len(owners) in (1, 2), f"edge {key} has {len(owners)} cells"
            assert sorted(o[0] for o in owners) == sorted(self._edge_cells[key])
            if len(owners) == 2:
                (k1, a1, b1), (k2, a2, b2) = owners
                assert k1 != k2 and (a1, b1) == (b2, a2), f"edge {key} orientation"
            else:
                pq = self.vertices[list(key)]
                on_side = [
                    abs(pq[0, d] - pq[1, d]) <= tol and min(abs(pq[0, d]), abs(pq[0, d] - 1.0)) <= tol
                    for d in (0, 1)
                ]
                assert any(on_side), f"boundary edge {key} not on the domain boundary"


def initial_mesh(n: int) -> Mesh:
    """Uniform ``n`` x ``n`` grid of squares on the unit square."""
    if n < 1:
        raise ValueError("n must be at least 1")
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    cells = []
    for j in range(n):
        for i in range(n):
            v0 = j * (n + 1) + i
            cells.append([v0, v0 + 1, v0 + n + 2, v0 + n + 1])
    return Mesh(verts, cells)


# -- regularity diagnostics ---------------------------------------------------


def chebyshev_radius(poly: Polygon) -> float:
    """Radius of the largest inscribed circle of a convex polygon (LP)."""
    normals = poly.outward_normals
    offsets = np.einsum("ij,ij->i", normals, poly.vertices)
    # maximise r subject to n_i . z + r <= n_i . v_i
    A = np.column_stack([normals, np.ones(len(normals))])
    res = linprog(c=[0.0, 0.0, -1.0], A_ub=A, b_ub=offsets, bounds=[(None, None)] * 2 + [(0, None)], method="highs")
    if not res.success:
        return 0.0
    return float(res.x[2])


def frame_rotation_deviation(U_plus: np.ndarray, U_minus: np.ndarray) -> float:
    """min ||I - R|| over rotations R with U_minus = R U_plus up to eigenvector signs."""
    best = np.inf
    for s1, s2 in itertools.product((1.0, -1.0), repeat=2):
        R = (U_minus * np.array([s1, s2])) @ U_plus.T
        if np.linalg.det(R) < 0:
            continue
        best = min(best, np.linalg.norm(np.eye(2) - R, 2))
    return float(best)


@dataclass
class RegularityReport:
    aspect_ratio: np.ndarray  # h/rho of the mapped cell F_K(K)
    edge_ratio: np.ndarray  # h_K / min h_E of the cell
    alpha: np.ndarray
    anisotropy_ratio: np.ndarray
    pairs: np.ndarray  # (npairs, 2) neighbouring cells K+, K-
    delta: np.ndarray  # (npairs, 2)
    rotation: np.ndarray  # (npairs,)

    def summary(self) -> dict:
        out = {
            "max_mapped_aspect_ratio": float(self.aspect_ratio.max()),
            "max_edge_ratio": float(self.edge_ratio.max()),
            "max_anisotropy_ratio": float(self.anisotropy_ratio.max()),
            "alpha_min": float(self.alpha.min()),
            "alpha_max": float(self.alpha.max()),
        }
        if len(self.pairs):
            out["max_abs_delta"] = float(np.abs(self.delta).max())
            out["max_rotation_deviation"] = float(self.rotation.max())
        return out


def regularity_report(mesh: Mesh) -> RegularityReport:
    polys = mesh.polygons()
    infos = [anisotropy_map(p) for p in polys]
    aspect = np.empty(len(polys))
    edge_ratio = np.empty(len(polys))
    for k, (p, info) in enumerate(zip(polys, infos)):
        ref = p.mapped(info.A)
        aspect[k] = ref.diameter / chebyshev_radius(ref)
        edge_ratio[k] = p.diameter / p.edge_lengths.min()
    pairs = set()
    for cells in mesh.vertex_cells:
        for a, b in itertools.combinations(sorted(cells), 2):
            pairs.add((a, b))
    pairs = np.array(sorted(pairs), dtype=int).reshape(-1, 2)
    delta = np.empty((len(pairs), 2))
    rot = np.empty(len(pairs))
    for i, (kp, km) in enumerate(pairs):
        ip, im = infos[kp], infos[km]
        delta[i] = im.lambda1 / ip.lambda1 - 1.0, im.lambda2 / ip.lambda2 - 1.0
        rot[i] = frame_rotation_deviation(ip.U, im.U) * np.sqrt(ip.ratio)
    return RegularityReport(
        aspect_ratio=aspect,
        edge_ratio=edge_ratio,
        alpha=np.array([i.alpha for i in infos]),
        anisotropy_ratio=np.array([i.ratio for i in infos]),
        pairs=pairs,
        delta=delta,
        rotation=rot,
    )
