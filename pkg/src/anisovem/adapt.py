"""Dörfler marking, the anisotropic cell cut and the SOLVE-ESTIMATE-MARK-REFINE loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cases import TestCase
from .estimator import IndicatorSet, Kind, estimate
from .geometry import eig_sym2, eig_sym2_batch
from .mesh import Mesh, initial_mesh
from .recovery import recover
from .vem import Solution, energy_error, solve_problem

logger = logging.getLogger(__name__)

G_ZERO_TOL = 1e-300
# ratios equal up to round-off count as a tie, which goes to G
RATIO_TIE_RTOL = 1e-12


@dataclass
class AdaptConfig:
    theta: float = 0.5
    tol: float = 1e-2
    max_iters: int = 50
    max_dofs: int = 200_000
    estimator: Kind = Kind.HEURISTIC
    order: int = 1
    grid_n: int = 4

    def __post_init__(self):
        self.estimator = Kind.parse(self.estimator)
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.max_iters < 1 or self.max_dofs < 1 or self.grid_n < 1:
            raise ValueError("max_iters, max_dofs and grid_n must be positive")


def dorfler_mark(scores, theta: float) -> list:
    """Smallest set of cells whose scores reach ``theta`` times the total.

    Cells are taken greedily by decreasing score, ties broken by cell id.
    Returns an empty list if every score is zero.
    """
    scores = np.asarray(scores, dtype=float)
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("marking scores must be finite and non-negative")
    total = scores.sum()
    if total <= 0.0:
        return []
    order = np.lexsort((np.arange(len(scores)), -scores))
    csum = np.cumsum(scores[order])
    n = int(np.searchsorted(csum, theta * total, side="left")) + 1
    return sorted(order[: min(n, len(order))].tolist())


@dataclass(frozen=True)
class CutDecision:
    cell: int
    source: str  # "G" or "K"
    direction: np.ndarray
    point: np.ndarray


def cut_direction(poly, G, kind) -> tuple:
    """Algorithm REFINE: returns ``(source, direction)`` for one marked cell."""
    kind = Kind.parse(kind)
    lk1, lk2, _, rk2 = eig_sym2(poly.covariance)
    if kind is Kind.ISOTROPIC or G is None:
        return "K", rk2
    G = np.asarray(G, dtype=float)
    lg1, lg2, _, rg2 = eig_sym2(G, require_spd=False)
    if lg1 <= G_ZERO_TOL:
        return "K", rk2
    ratio_g = lg1 / lg2 if lg2 > 0 else np.inf
    if ratio_g >= (1 - RATIO_TIE_RTOL) * lk1 / lk2:
        return "G", rg2
    return "K", rk2


def cut_directions(cov: np.ndarray, G: np.ndarray | None, kind) -> tuple:
    """Vectorized :func:`cut_direction` for many cells.

    ``cov`` and ``G`` have shape ``(n, 2, 2)``. Returns ``(from_G, directions)``.
    """
    kind = Kind.parse(kind)
    cov = np.asarray(cov, dtype=float).reshape(-1, 2, 2)
    lk1, lk2, _, rk2 = eig_sym2_batch(cov[:, 0, 0], 0.5 * (cov[:, 0, 1] + cov[:, 1, 0]), cov[:, 1, 1])
    if kind is Kind.ISOTROPIC or G is None:
        return np.zeros(len(cov), dtype=bool), rk2
    G = np.asarray(G, dtype=float).reshape(-1, 2, 2)
    lg1, lg2, _, rg2 = eig_sym2_batch(G[:, 0, 0], 0.5 * (G[:, 0, 1] + G[:, 1, 0]), G[:, 1, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_g = np.where(lg2 > 0, lg1 / np.where(lg2 > 0, lg2, 1.0), np.inf)
    use_g = (lg1 > G_ZERO_TOL) & (ratio_g >= (1 - RATIO_TIE_RTOL) * lk1 / lk2)
    return use_g, np.where(use_g[:, None], rg2, rk2)


def refine_cells(mesh: Mesh, cells, G, kind) -> list:
    """Cut every cell in ``cells`` once through its barycenter, in place.

    Directions are decided up front; cutting a cell only adds collinear
    vertices to its neighbours, which leaves their geometry unchanged.
    """
    cells = list(cells)
    if not cells:
        return []
    cs = mesh.cellset
    idx = np.asarray(cells)
    Gc = None if G is None else np.asarray(G)[idx]
    use_g, dirs = cut_directions(cs.cov[idx], Gc, kind)
    points, diameters = cs.centroid[idx], cs.diameter[idx].tolist()
    out = []
    for c, g, d, point, h in zip(cells, use_g, dirs, points, diameters):
        mesh.split_cell(c, point, d, h)
        out.append(CutDecision(c, "G" if g else "K", d, point))
    return out


def refine_cell(mesh: Mesh, cell: int, G, kind) -> CutDecision:
    """Cut ``cell`` once through its barycenter, in place."""
    poly = mesh.polygon(cell)
    source, direction = cut_direction(poly, G, kind)
    point = poly.centroid.copy()
    mesh.split_cell(cell, point, direction)
    return CutDecision(cell, source, direction, point)


@dataclass
class IterationRecord:
    iter: int
    ndof: int
    estimator: float
    err: float
    eta_sum: float
    xi_sum: float
    sigma_sum: float
    n_cells: int
    cut_G_count: int = 0
    cut_K_count: int = 0
    wall_time: float = 0.0
    eta_theory: float = float("nan")
    eta_heur: float = float("nan")
    eta_iso: float = float("nan")


@dataclass
class RunLog:
    config: AdaptConfig
    case: str
    records: list = field(default_factory=list)
    cuts: list = field(default_factory=list)  # per iteration: list of CutDecision
    stop_reason: str = ""
    mesh: Mesh | None = None

    def append(self, rec: IterationRecord):
        if self.records and rec.ndof <= self.records[-1].ndof:
            logger.warning("DOF count did not increase (%d -> %d)", self.records[-1].ndof, rec.ndof)
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]


@dataclass
class Snapshot:
    """What an observer receives after each SOLVE/ESTIMATE step."""

    iteration: int
    mesh: Mesh
    solution: Solution
    indicators: IndicatorSet | None
    record: IterationRecord
    cuts: list = field(default_factory=list)  # filled in once the cell cuts are done


def adaptive_loop(config: AdaptConfig, case: TestCase, mesh: Mesh | None = None, observer=None) -> RunLog:
    """Iterate SOLVE, ESTIMATE, MARK, REFINE until the exact error reaches ``config.tol``.

    ``observer(snapshot)`` is called once per iteration before refinement
    (and for the final iteration), e.g. to dump meshes and indicators; the
    snapshot's ``cuts`` list is filled afterwards with that iteration's cuts.
    """
    mesh = mesh if mesh is not None else initial_mesh(config.grid_n)
    log = RunLog(config, case.name)
    kind = config.estimator
    u0 = None
    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        try:
            sol = solve_problem(mesh, config.order, case.f, g=case.boundary, u0=u0)
            err = energy_error(sol.projection, case.grad)
            rec_data = recover(mesh, sol.projection) if kind.anisotropic else None
            ind = estimate(sol, kind, rec_data)
        except Exception as exc:
            exc.iteration = it
            logger.error("iteration %d failed: %s", it, exc)
            raise
        cell, edge, stab = ind.component_sums()
        rec = IterationRecord(
            iter=it,
            ndof=sol.ndof,
            estimator=ind.value,
            err=err,
            eta_sum=cell,
            xi_sum=edge,
            sigma_sum=stab,
            n_cells=mesh.n_cells,
            eta_theory=ind.eta_theory,
            eta_heur=ind.eta_heur,
            eta_iso=ind.eta_iso,
        )
        done = None
        if err <= config.tol:
            done = "tolerance"
        elif it == config.max_iters:
            done = "max_iters"
        elif sol.ndof >= config.max_dofs:
            done = "max_dofs"
        marked = [] if done else dorfler_mark(ind.score, config.theta)
        if not done and not marked:
            done = "zero_indicators"
        snap = Snapshot(it, mesh, sol, ind, rec)
        if observer is not None:
            observer(snap)
        decisions = []
        if not done:
            G = rec_data.G if rec_data is not None else None
            try:
                decisions = refine_cells(mesh, marked, G, kind)
            except Exception as exc:
                exc.iteration = it
                logger.error("iteration %d: refinement failed: %s", it, exc)
                raise
        if decisions and config.order == 1:
            # order-1 DOFs are vertex values and vertex ids survive a cut,
            # so the previous solution interpolates into a good initial guess
            u0 = mesh.prolongate(sol.u)
        snap.cuts.extend(decisions)
        rec.cut_G_count = sum(d.source == "G" for d in decisions)
        rec.cut_K_count = sum(d.source == "K" for d in decisions)
        rec.wall_time = time.perf_counter() - t0
        log.append(rec)
        log.cuts.append(decisions)
        logger.info(
            "iter %d: N=%d err=%.4e est=%.4e cells=%d marked=%d", it, rec.ndof, err, rec.estimator, mesh.n_cells, len(marked)
        )
        if done:
            log.stop_reason = done
            break
    log.mesh = mesh
    return log
