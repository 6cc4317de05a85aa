import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from anisovem.geometry import Polygon
from anisovem.mesh import initial_mesh
from anisovem.vem import Solution, build_dofmap, element_list, project_solution


def convex_polygon(rng, n_points=12, scale=1.0, shift=(0.0, 0.0), min_ratio=1e-3):
    """Convex hull of random points; hull vertices come back counter-clockwise."""
    while True:
        pts = rng.uniform(-1.0, 1.0, size=(n_points, 2)) * scale + np.asarray(shift)
        hull = ConvexHull(pts)
        poly_pts = pts[hull.vertices]
        try:
            poly = Polygon(poly_pts)
        except Exception:
            continue
        if poly.area > min_ratio * poly.diameter**2:
            return poly


@st.composite
def polygons(draw, max_points=14, min_stretch=0.05, min_ratio=1e-3):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(3, max_points))
    stretch = draw(st.floats(min_stretch, 1.0))
    angle = draw(st.floats(0.0, np.pi))
    poly = convex_polygon(np.random.default_rng(seed), n, min_ratio=min_ratio)
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return Polygon(poly.vertices @ np.diag([1.0, stretch]) @ R.T)


def solution_from_dofs(mesh, k, u, f_avg=None):
    """A Solution whose DOF vector is given instead of solved for."""
    dofmap = build_dofmap(mesh, k)
    elements = element_list(mesh, k, dofmap)
    proj = project_solution(mesh, k, u, elements, dofmap, elements.stacks)
    f_avg = np.zeros(mesh.n_cells) if f_avg is None else np.asarray(f_avg, dtype=float)
    return Solution(mesh, k, dofmap, elements, np.asarray(u, dtype=float), f_avg, proj, 0.0, elements.stacks)


def refined_mesh(n_cuts=20, seed=0, n=3):
    """A grid cut repeatedly through random cells in random directions."""
    rng = np.random.default_rng(seed)
    mesh = initial_mesh(n)
    for _ in range(n_cuts):
        c = int(rng.integers(mesh.n_cells))
        poly = mesh.polygon(c)
        angle = rng.uniform(0.0, np.pi)
        mesh.split_cell(c, poly.centroid, (np.cos(angle), np.sin(angle)))
    return mesh


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE, key=str):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
