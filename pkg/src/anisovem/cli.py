"""Command-line driver: ``anisovem --case 2 --order 1 --estimator heur --out runs/c2``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adaptive_loop
from .cases import get_case
from .errors import AnisoVemError, InsufficientData
from .io import cell_averages, fit_rate, write_indicators_csv, write_mesh, write_run_csv, write_snapshot

logger = logging.getLogger("anisovem")


@dataclass
class CliConfig:
    case: str = "1"
    order: int = 1
    estimator: str = "heur"
    theta: float = 0.5
    tol: float = 1e-2
    max_iters: int = 50
    max_dofs: int = 200_000
    grid_n: int = 4
    out: Path = Path("out")
    seed: int = 0
    burn_in: int = 3

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(
            theta=self.theta,
            tol=self.tol,
            max_iters=self.max_iters,
            max_dofs=self.max_dofs,
            estimator=self.estimator,
            order=self.order,
            grid_n=self.grid_n,
        )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anisovem", description="Anisotropic adaptive VEM on the unit square.")
    p.add_argument("--case", choices=["1", "2", "3", "patch"], default="1")
    p.add_argument("--order", type=int, choices=[1, 2], default=1)
    p.add_argument("--estimator", choices=["theory", "heur", "iso"], default="heur")
    p.add_argument("--theta", type=float, default=0.5, help="Dorfler marking fraction in (0, 1)")
    p.add_argument("--tol", type=float, default=1e-2, help="stop once the exact energy error is below this")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--max-dofs", type=int, default=200_000)
    p.add_argument("--grid-n", type=int, default=4, help="initial mesh is an n x n grid of squares")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    return p


def parse_args(argv=None) -> CliConfig:
    ns = build_parser().parse_args(argv)
    return CliConfig(**vars(ns))


class _Dumper:
    """Observer writing indicators and VTK files; a mesh snapshot is written
    once its iteration's cuts are known."""

    def __init__(self, out: Path):
        self.out = out
        self.pending = None

    def __call__(self, snap):
        self.flush()
        write_indicators_csv(self.out / f"indicators_{snap.iteration}.csv", snap.indicators)
        self.pending = (
            snap,
            snap.mesh.vertices.copy(),
            [list(c) for c in snap.mesh.cells],
            cell_averages(snap.solution.projection),
            snap.indicators.eta2 if snap.indicators.kind.anisotropic else snap.indicators.iso_cell,
        )

    def flush(self):
        if self.pending is None:
            return
        snap, xy, cells, u_avg, eta2 = self.pending
        write_snapshot(self.out, snap.iteration, xy, cells, u_avg, eta2, snap.cuts)
        self.pending = None


def write_summary(path: Path, cfg: CliConfig, log, rate, elapsed: float) -> None:
    f = log.final
    lines = [
        f"case: {cfg.case}",
        f"order: {cfg.order}",
        f"estimator: {cfg.estimator}",
        f"theta: {cfg.theta}",
        f"tol: {cfg.tol}",
        f"seed: {cfg.seed}",
        f"iterations: {len(log.records)}",
        f"stop_reason: {log.stop_reason}",
        f"final_ndof: {f.ndof}",
        f"final_err: {f.err:.6e}",
        f"final_estimator: {f.estimator:.6e}",
        f"rate_burn_in: {cfg.burn_in}",
        f"fitted_rate: {'nan' if rate is None else f'{rate:.6f}'}",
        f"wall_time_s: {elapsed:.2f}",
    ]
    path.write_text("\n".join(lines) + "\n")


def run(cfg: CliConfig) -> int:
    """Run one adaptive computation and write its outputs; returns the exit status."""
    np.random.seed(cfg.seed)  # nothing in the loop is random; kept for reproducible extensions
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        acfg = cfg.adapt_config()
        case = get_case(cfg.case, cfg.order)
        dumper = _Dumper(out)
        log = adaptive_loop(acfg, case, observer=dumper)
        dumper.flush()
    except (AnisoVemError, ValueError) as exc:
        it = getattr(exc, "iteration", None)
        where = f" (iteration {it})" if it is not None else ""
        print(f"anisovem: error{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    write_run_csv(out / "run.csv", log)
    write_mesh(out / "mesh_final.txt", log.mesh)
    try:
        rate = fit_rate(log, burn_in=cfg.burn_in)
    except InsufficientData:
        rate = None
    write_summary(out / "summary.txt", cfg, log, rate, time.perf_counter() - t0)
    f = log.final
    rate_txt = "n/a" if rate is None else f"{rate:.3f}"
    print(f"{log.stop_reason}: {len(log.records)} iterations, N={f.ndof}, err={f.err:.3e}, rate={rate_txt}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
