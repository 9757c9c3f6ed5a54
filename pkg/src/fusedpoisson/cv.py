"""Day-of-week balanced K-fold cross-validation over penalty grids."""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmOptions, solve
from .data import RentalPanel, StationRegistry
from .graph import ProximityGraph, build_proximity
from .model import mean_surface
from .penalty import PenaltyConfig
from .projection import build_plan

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldPlan:
    """``fold_of_day[t]`` is the fold holding day t of the panel."""

    n_folds: int
    fold_of_day: np.ndarray

    def days(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_day == k)

    def split(self, panel: RentalPanel, k: int) -> tuple[RentalPanel, RentalPanel]:
        """(training panel, held-out panel) for fold k. With one fold both are the full panel."""
        held = self.fold_of_day == k
        if self.n_folds == 1:
            return panel, panel
        return panel.subset_days(~held), panel.subset_days(held)

    def as_dict(self) -> dict:
        return {"n_folds": self.n_folds, "fold_of_day": self.fold_of_day.tolist()}


def make_folds(panel: RentalPanel, n_folds: int = 7, seed: int = 0) -> FoldPlan:
    """Shuffle the days of each weekday (seeded), then deal them round-robin over the folds.

    The dealing pointer carries over from one weekday to the next, so fold
    sizes differ by at most one as well as the per-weekday counts.
    """
    T = panel.n_days
    if n_folds < 1:
        raise ValueError("need at least one fold")
    if n_folds > T:
        raise ValueError(f"{n_folds} folds requested but the panel has only {T} days")
    rng = np.random.default_rng(seed)
    fold = np.empty(T, dtype=np.int64)
    pos = 0
    for d in range(panel.dims.n_days_of_week):
        days = np.flatnonzero(panel.dow == d)
        days = days[rng.permutation(days.size)]
        fold[days] = (pos + np.arange(days.size)) % n_folds
        pos = (pos + days.size) % n_folds
    return FoldPlan(n_folds, fold)


def mspr(observed, predicted) -> float:
    """Mean squared Pearson residual."""
    y = np.asarray(observed, dtype=float).ravel()
    mu = np.asarray(predicted, dtype=float).ravel()
    if y.shape != mu.shape:
        raise ValueError("observed and predicted lengths differ")
    if y.size == 0:
        raise ValueError("empty input")
    if np.any(~(mu > 0)):
        raise ValueError("predicted means must be positive")
    return float(np.mean((y - mu) ** 2 / mu))


def log_grid(lo: float = 1e-2, hi: float = 1e3, n: int = 8) -> tuple[float, ...]:
    return tuple(float(v) for v in np.geomspace(lo, hi, n))


@dataclass(frozen=True)
class GridSpec:
    lam: tuple[float, ...] = field(default_factory=log_grid)
    lam_net: tuple[float, ...] = field(default_factory=log_grid)
    lam_hour: tuple[float, ...] = field(default_factory=log_grid)
    radii: tuple[float, ...] = (float("nan"),)

    def __post_init__(self):
        for name in ("lam", "lam_net", "lam_hour", "radii"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"grid list {name!r} is empty")
            object.__setattr__(self, name, vals)
        for v in self.lam + self.lam_net + self.lam_hour:
            if not v >= 0:
                raise ValueError("penalty grid values must be non-negative")

    def points(self) -> list[tuple[float, float, float]]:
        return list(itertools.product(self.lam, self.lam_net, self.lam_hour))

    def as_dict(self) -> dict:
        return {"lambda": list(self.lam), "lambda_N": list(self.lam_net),
                "lambda_H": list(self.lam_hour), "radii": list(self.radii)}


@dataclass(frozen=True)
class CvRow:
    r: float
    lam: float
    lam_net: float
    lam_hour: float
    fold: int | str
    mspr: float
    converged: bool
    iterations: int = 0


@dataclass
class CvResult:
    best: tuple[float, float, float, float]
    best_cv: float
    rows: list[CvRow]

    def averages(self) -> list[CvRow]:
        return [r for r in self.rows if r.fold == "avg"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "lambda", "lambda_N", "lambda_H", "fold", "mspr", "converged"])
            for row in self.rows:
                w.writerow([repr(row.r), repr(row.lam), repr(row.lam_net), repr(row.lam_hour),
                            row.fold, repr(row.mspr), int(row.converged)])


def traversal_order(points) -> list[int]:
    """Largest penalties first, so each fit warm-starts from a more regularized neighbour."""
    return sorted(range(len(points)), key=lambda i: tuple(-v for v in (points[i][1], points[i][2], points[i][0])))


def _graph_for(source, r: float) -> ProximityGraph:
    if isinstance(source, ProximityGraph):
        return source
    if isinstance(source, StationRegistry):
        return build_proximity(source, r)
    if isinstance(source, dict):
        return source[r]
    raise TypeError("graph source must be a ProximityGraph, StationRegistry or dict")


def _fold_task(args):
    panel, graph, folds, k, points, rho, opts = args
    train, test = folds.split(panel, k)
    plan = build_plan(graph, panel.dims)
    out = [None] * len(points)
    state = None
    for i in traversal_order(points):
        lam, lam_net, lam_hour = points[i]
        cfg = PenaltyConfig(lam, lam_net, lam_hour, rho=rho)
        est, rep, state = solve(train, graph, cfg, opts=opts, plan=plan, warm_start=state)
        out[i] = (mspr(test.y, mean_surface(est, test)), rep.converged, rep.iterations)
    return out


def grid_search(panel: RentalPanel, graphs, grid: GridSpec, folds: FoldPlan, *,
                rho: float = 1.0, opts: AdmmOptions | None = None, workers: int = 1) -> CvResult:
    """Score every (r, grid point) by the fold-averaged MSPR and pick the smallest.

    Unconverged fits are kept in the table but excluded from selection unless
    nothing converged. Ties go to the larger penalties.
    """
    opts = opts or AdmmOptions()
    points = grid.points()
    tasks, keys = [], []
    for r in grid.radii:
        graph = _graph_for(graphs, r)
        for k in range(folds.n_folds):
            tasks.append((panel, graph, folds, k, points, rho, opts))
            keys.append((r, k))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]
    by_key = dict(zip(keys, results))
    rows: list[CvRow] = []
    candidates = []
    for r in grid.radii:
        for i, (lam, lam_net, lam_hour) in enumerate(points):
            scores, conv = [], True
            for k in range(folds.n_folds):
                m, c, iters = by_key[(r, k)][i]
                rows.append(CvRow(r, lam, lam_net, lam_hour, k + 1, m, c, iters))
                scores.append(m)
                conv = conv and c
            avg = float(np.mean(scores))
            rows.append(CvRow(r, lam, lam_net, lam_hour, "avg", avg, conv))
            candidates.append((avg, conv, (r, lam, lam_net, lam_hour)))
    best_cv, best = select_winner(candidates)
    return CvResult(best, best_cv, rows)


def select_winner(candidates, rel_tie: float = 1e-12):
    """Smallest CV among converged entries (all entries if none converged).

    ``candidates`` holds (cv, converged, (r, lambda, lambda_N, lambda_H)).
    Scores within ``rel_tie`` of the minimum tie; the tie goes to the largest
    total penalty, then to lambda_N, lambda_H, lambda in that order.
    """
    pool = [c for c in candidates if c[1]] or list(candidates)
    if len(pool) < len(candidates):
        log.info("%d grid points excluded from selection (not converged)", len(candidates) - len(pool))
    best_cv = min(c[0] for c in pool)
    tied = [c for c in pool if c[0] <= best_cv + rel_tie * abs(best_cv)]
    winner = max(tied, key=lambda c: (c[2][1] + c[2][2] + c[2][3], c[2][2], c[2][3], c[2][1]))
    return winner[0], winner[2]
