"""Anisotropic a posteriori error estimation and mesh adaptation for the
virtual element method on convex polygonal meshes of the unit square."""
from .adapt import AdaptConfig, RunLog, adaptive_loop, dorfler_mark, refine_cell
from .cases import get_case
from .estimator import IndicatorSet, Kind, estimate
from .geometry import Polygon, anisotropy_map, clip_polygon
from .mesh import Mesh, initial_mesh
from .recovery import recover
from .vem import solve_problem

__all__ = [
    "AdaptConfig",
    "IndicatorSet",
    "Kind",
    "Mesh",
    "Polygon",
    "RunLog",
    "adaptive_loop",
    "anisotropy_map",
    "clip_polygon",
    "dorfler_mark",
    "estimate",
    "get_case",
    "initial_mesh",
    "recover",
    "refine_cell",
    "solve_problem",
]
__version__ = "0.1.0"
