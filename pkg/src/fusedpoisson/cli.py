"""Command-line driver: fit, cv, predict, mc, synth, export-graph.

Every option can also come from a JSON document passed with ``--config``;
explicit flags win over the document, which wins over the built-in defaults.
The fully resolved configuration is written next to every output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .admm import AdmmOptions, solve
from .complexity import FusionTolerance, estimate_networks, intersection_edges, model_complexity
from .cv import GridSpec, log_grid, make_folds, grid_search, mspr
from .data import (CalendarDims, PanelError, load_panel, load_registry, parse_weekday,
                   planted_clusters, synth_panel, write_panel)
from .graph import GraphError, build_proximity, export_edge_list, export_graphml
from .model import ParamState, mean_surface, read_bundle, write_bundle
from .penalty import PenaltyConfig

log = logging.getLogger("fusedpoisson")

EXIT_OK, EXIT_USAGE, EXIT_UNCONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    rentals: str | None = None
    stations: str | None = None
    weather: str | None = None
    output: str = "out"
    hours: int = 24
    time_scale: float = 1.0
    radius: float = 1500.0
    lam: float = 0.0
    lam_net: float = 0.0
    lam_hour: float = 0.0
    rho: float = 1.0
    grid_lambda: list = field(default_factory=lambda: list(log_grid()))
    grid_lambda_net: list = field(default_factory=lambda: list(log_grid()))
    grid_lambda_hour: list = field(default_factory=lambda: list(log_grid()))
    grid_radii: list | None = None
    folds: int = 7
    seed: int = 0
    workers: int = 0
    max_iter: int = 2000
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    fuse_tol: float = 1e-6
    figures: bool = False
    # synth
    n_stations: int = 30
    n_days: int = 28
    n_clusters: int = 3
    base_rate: float = 0.5
    # predict / mc
    bundle: str | None = None
    effects: str | None = None
    export_edges: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusedpoisson", description="Fused-Lasso Poisson regression for station count panels.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        # defaults are None so that unset flags fall through to the config file
        sp.add_argument("--config", help="JSON document with option values")
        sp.add_argument("--output", "-o", help="output directory")
        if data:
            sp.add_argument("--data", help="directory holding rentals.csv, stations.csv, weather.csv; 'toy' for the bundled sample")
            sp.add_argument("--rentals")
            sp.add_argument("--stations")
            sp.add_argument("--weather")
            sp.add_argument("--hours", type=int)
            sp.add_argument("--time-scale", dest="time_scale", type=float,
                            help="divide the day index by this to get t (e.g. 7 for weeks)")

    def solver(sp):
        sp.add_argument("--rho", type=float)
        sp.add_argument("--max-iter", dest="max_iter", type=int)
        sp.add_argument("--eps-abs", dest="eps_abs", type=float)
        sp.add_argument("--eps-rel", dest="eps_rel", type=float)
        sp.add_argument("--fuse-tol", dest="fuse_tol", type=float)
        sp.add_argument("--figures", action="store_true", default=None, help="also render PNG figures")

    f = sub.add_parser("fit", help="fit one penalty setting")
    common(f)
    solver(f)
    f.add_argument("--radius", type=float, help="neighbourhood radius in metres")
    f.add_argument("--lambda", dest="lam", type=float)
    f.add_argument("--lambda-net", dest="lam_net", type=float)
    f.add_argument("--lambda-hour", dest="lam_hour", type=float)

    c = sub.add_parser("cv", help="cross-validate a penalty grid, then refit the winner")
    common(c)
    solver(c)
    c.add_argument("--radius", type=float)
    c.add_argument("--grid-lambda", dest="grid_lambda", type=_floats)
    c.add_argument("--grid-lambda-net", dest="grid_lambda_net", type=_floats)
    c.add_argument("--grid-lambda-hour", dest="grid_lambda_hour", type=_floats)
    c.add_argument("--grid-radii", dest="grid_radii", type=_floats)
    c.add_argument("--folds", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=int, help="parallel fold tasks (0 = all cores)")
    c.add_argument("--dry-run", action="store_true", help="print the task matrix and exit")

    pr = sub.add_parser("predict", help="fitted means for a panel from a parameter bundle")
    common(pr)
    pr.add_argument("--bundle")
    pr.add_argument("--effects", help="'hour,day' such as 8,Tu: per-station linear predictor export")

    m = sub.add_parser("mc", help="model complexity of a parameter bundle")
    common(m)
    m.add_argument("--bundle")
    m.add_argument("--radius", type=float)
    m.add_argument("--fuse-tol", dest="fuse_tol", type=float)
    m.add_argument("--export-edges", dest="export_edges", action="store_true", default=None)

    s = sub.add_parser("synth", help="write a synthetic dataset with planted station clusters")
    common(s, data=False)
    s.add_argument("--n-stations", dest="n_stations", type=int)
    s.add_argument("--n-days", dest="n_days", type=int)
    s.add_argument("--n-clusters", dest="n_clusters", type=int)
    s.add_argument("--hours", type=int)
    s.add_argument("--base-rate", dest="base_rate", type=float)
    s.add_argument("--seed", type=int)

    e = sub.add_parser("export-graph", help="write the proximity graph as an edge list and GraphML")
    common(e)
    e.add_argument("--radius", type=float)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config document must be a JSON object")
        unknown = sorted(set(doc) - CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(doc)
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values)


def _toy_dir() -> Path:
    return Path(str(resources.files("fusedpoisson") / "toy"))


def _data_paths(cfg: RunConfig) -> tuple[Path, Path, Path]:
    base = None
    if cfg.data:
        base = _toy_dir() if cfg.data == "toy" else Path(cfg.data)
    paths = []
    for name in ("rentals", "stations", "weather"):
        explicit = getattr(cfg, name)
        if explicit:
            paths.append(Path(explicit))
        elif base is not None:
            paths.append(base / f"{name}.csv")
        else:
            raise UsageError(f"no {name} file: pass --data DIR or --{name} PATH")
    return tuple(paths)


def _load(cfg: RunConfig):
    rentals, stations, weather = _data_paths(cfg)
    panel = load_panel(rentals, stations, weather, dims=CalendarDims(cfg.hours, 7), time_scale=cfg.time_scale)
    registry = load_registry(stations)
    return panel, registry


def _opts(cfg: RunConfig) -> AdmmOptions:
    return AdmmOptions(eps_abs=cfg.eps_abs, eps_rel=cfg.eps_rel, max_iter=cfg.max_iter)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"command": command, **cfg.as_dict()})
    return out


def _fit_and_write(panel, registry, graph, pcfg: PenaltyConfig, cfg: RunConfig, out: Path, extra=None):
    est, report, state = solve(panel, graph, pcfg, opts=_opts(cfg))
    with open(out / "solve_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in state.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"penalty": pcfg.as_dict(), "radius_m": graph.radius_m, "converged": report.converged}
    meta.update(extra or {})
    write_bundle(est, out / "bundle", panel.station_ids, extra=meta)
    _write_json(out / "report.json", report.as_dict())
    mc = model_complexity(graph, est, FusionTolerance(cfg.fuse_tol))
    _write_json(out / "mc.json", mc.as_dict())
    if cfg.figures:
        from . import plotting
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        plotting.hourly_effects(est, fig_dir / "hourly_effects.png", panel.station_ids)
        plotting.station_map(registry, est.theta, fig_dir / "theta_map.png", graph.undirected_edges, "theta")
        plotting.residual_trace(state.history, fig_dir / "residuals.png")
    log.info("fit: %d iterations, converged=%s, objective=%.6f, MC=%.4f",
             report.iterations, report.converged, report.objective, mc.mc)
    return est, report


def cmd_fit(cfg: RunConfig) -> int:
    panel, registry = _load(cfg)
    graph = build_proximity(registry, cfg.radius)
    pcfg = PenaltyConfig(cfg.lam, cfg.lam_net, cfg.lam_hour, rho=cfg.rho)
    out = _out(cfg, "fit")
    _, report = _fit_and_write(panel, registry, graph, pcfg, cfg, out)
    return EXIT_OK if report.converged else EXIT_UNCONVERGED


def cmd_cv(cfg: RunConfig, dry_run: bool = False) -> int:
    panel, registry = _load(cfg)
    radii = tuple(cfg.grid_radii) if cfg.grid_radii else (cfg.radius,)
    grid = GridSpec(tuple(cfg.grid_lambda), tuple(cfg.grid_lambda_net), tuple(cfg.grid_lambda_hour), radii)
    folds = make_folds(panel, cfg.folds, cfg.seed)
    if dry_run:
        print("r,fold,lambda,lambda_N,lambda_H,train_days,test_days")
        for r in grid.radii:
            for k in range(folds.n_folds):
                n_test = len(folds.days(k))
                for lam, ln, lh in grid.points():
                    print(f"{r!r},{k + 1},{lam!r},{ln!r},{lh!r},{panel.n_days - n_test if folds.n_folds > 1 else panel.n_days},{n_test}")
        return EXIT_OK
    out = _out(cfg, "cv")
    workers = cfg.workers or (os.cpu_count() or 1)
    result = grid_search(panel, registry, grid, folds, rho=cfg.rho, opts=_opts(cfg), workers=workers)
    result.write_csv(out / "cv_table.csv")
    r, lam, ln, lh = result.best
    _write_json(out / "winner.json", {"r": r, "lambda": lam, "lambda_N": ln, "lambda_H": lh,
                                      "cv": result.best_cv, "folds": folds.as_dict()})
    graph = build_proximity(registry, r)
    _, report = _fit_and_write(panel, registry, graph, PenaltyConfig(lam, ln, lh, rho=cfg.rho), cfg, out,
                               extra={"cv": result.best_cv})
    if cfg.figures:
        from . import plotting
        plotting.cv_curve(result.rows, out / "figures" / "cv_curve.png")
    all_conv = all(row.converged for row in result.rows)
    return EXIT_OK if report.converged and all_conv else EXIT_UNCONVERGED


def linear_effects(params: ParamState, hour: int, dow: int) -> np.ndarray:
    """Per-station theta + shared hour and day effects + the station's interactions at (hour, dow)."""
    phi = params.phi()
    dow_part = phi.phi_dow[:, dow] - params.theta
    return phi.phi_hod[:, hour] + dow_part


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.bundle:
        raise UsageError("predict needs --bundle")
    params, header = read_bundle(cfg.bundle)
    panel, _ = _load(cfg)
    if params.dims != panel.dims or params.n_stations != panel.n_stations:
        raise UsageError("bundle dimensions do not match the panel")
    if list(header.get("station_ids", panel.station_ids)) != list(panel.station_ids):
        raise UsageError("bundle stations do not match the panel")
    out = _out(cfg, "predict")
    mu = mean_surface(params, panel)
    o = panel.obs
    with open(out / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write("station,date,hour,mu_hat\n")
        for i in range(panel.n):
            fh.write(f"{panel.station_ids[o.station[i]]},{panel.dates[o.day[i]]},{o.hour[i]},{float(mu[i])!r}\n")
    summary = {"n": panel.n, "mspr": mspr(panel.y, mu), "mean_observed": float(panel.y.mean()),
               "mean_predicted": float(mu.mean())}
    if cfg.effects:
        try:
            h_txt, d_txt = cfg.effects.split(",")
            hour, dow = int(h_txt), parse_weekday(d_txt.strip(), panel.dims)
        except ValueError as exc:
            raise UsageError(f"--effects expects 'hour,day', got {cfg.effects!r}") from exc
        if not 0 <= hour < panel.dims.n_hours:
            raise UsageError(f"hour {hour} out of range")
        eff = linear_effects(params, hour, dow)
        with open(out / "effects.csv", "w", encoding="utf-8") as fh:
            fh.write("station,hour,dow,linear_predictor\n")
            for sid, v in zip(panel.station_ids, eff):
                fh.write(f"{sid},{hour},{d_txt.strip()},{float(v)!r}\n")
        summary["effects"] = {"hour": hour, "dow": d_txt.strip()}
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_mc(cfg: RunConfig) -> int:
    if not cfg.bundle:
        raise UsageError("mc needs --bundle")
    params, header = read_bundle(cfg.bundle)
    stations = Path(cfg.stations) if cfg.stations else _data_paths(cfg)[1]
    registry = load_registry(stations)
    if len(registry) != params.n_stations:
        raise UsageError("bundle and station registry disagree on the number of stations")
    graph = build_proximity(registry, cfg.radius)
    out = _out(cfg, "mc")
    tol = FusionTolerance(cfg.fuse_tol)
    report = model_complexity(graph, params, tol)
    _write_json(out / "mc.json", report.as_dict())
    if cfg.export_edges:
        edge_dir = out / "intersection_edges"
        edge_dir.mkdir(exist_ok=True)
        for name, edges in intersection_edges(graph, estimate_networks(params.phi(), tol)).items():
            export_edge_list(edge_dir / f"{name}.csv", edges, registry.station_ids)
    print(f"MC = {report.mc:.6f} ({report.numerator}/{report.p})")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    dims = CalendarDims(cfg.hours, 7)
    registry, truth, labels = planted_clusters(cfg.n_stations, cfg.n_clusters, dims, seed=cfg.seed,
                                               base_rate=cfg.base_rate)
    panel = synth_panel(truth, cfg.n_days, seed=cfg.seed, dims=dims)
    out = _out(cfg, "synth")
    write_panel(panel, out / "rentals.csv", out / "stations.csv", out / "weather.csv", registry)
    write_bundle(truth, out / "truth", panel.station_ids, extra={"clusters": labels.tolist()})
    return EXIT_OK


def cmd_export_graph(cfg: RunConfig) -> int:
    stations = Path(cfg.stations) if cfg.stations else _data_paths(cfg)[1]
    registry = load_registry(stations)
    graph = build_proximity(registry, cfg.radius)
    out = _out(cfg, "export-graph")
    export_edge_list(out / "edges.csv", graph.undirected_edges, registry.station_ids)
    export_graphml(out / "graph.graphml", graph, registry)
    _write_json(out / "graph.json", {"n_stations": graph.n_stations, "radius_m": graph.radius_m,
                                     "n_edges": int(len(graph.undirected_edges)),
                                     "n_components": graph.n_components()})
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "cv":
            return cmd_cv(cfg, dry_run=args.dry_run)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "mc":
            return cmd_mc(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        return cmd_export_graph(cfg)
    except (UsageError, PanelError, GraphError, ValueError, OSError, KeyError) as exc:
        print(f"fusedpoisson: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
