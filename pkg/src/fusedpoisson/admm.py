"""Three-step ADMM for the penalized Poisson objective.

Split variables: the likelihood block x = (Theta, Theta_H, Theta_D) with Delta
and the fusion blocks (Gamma, Psi) on one side, the consensus vector Z (in
``PrimalLayout`` order) on the other, with constraints x = Z,
Gamma = D_theta Z and Psi = D_hod Z. Duals are kept in scaled form.

Each constraint block carries its own penalty (rho, rho_gamma, rho_psi).
With all three equal this is the textbook single-rho iteration; separate
penalties let residual balancing act on each block, and a block whose
fusion penalty is zero drops out (its constraint is vacuous).

Step 1 minimizes, with c = Z - U,
    nll(x, Delta) + lam |interactions|_1 + rho/2 |x - c|^2
by IRLS passes (see ``step1``), then applies the proximal maps of the
fusion penalties to Gamma and Psi. Step 2 is the weighted projection onto
the constraint set, Step 3 the dual ascent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CalendarDims, RentalPanel
from .graph import PrimalLayout, ProximityGraph
from .model import ConvergenceError, DesignRankError, ParamState, fit_unpenalized
from .penalty import PenaltyConfig, objective, update_gamma, update_psi
from .projection import ProjectionPlan, build_plan, project
from .step1 import Step1Workspace, cd_sweeps, quadratic_lasso, working_set

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmOptions:
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    max_iter: int = 2000
    gamma_weight: float = 1.0      # initial rho_gamma / rho
    psi_weight: float = 1.0        # initial rho_psi / rho
    adapt_rho: bool = True
    balance_ratio: float = 10.0
    balance_factor: float = 2.0
    adapt_every: int = 5
    adapt_until: int = 1000
    relative_balance: bool = True
    irls_passes: int = 1
    inner: str = "active_set"
    inner_tol: float = 1e-9
    cd_max_sweeps: int = 500
    projection_method: str = "structured"

    def __post_init__(self):
        if self.inner not in ("active_set", "cd"):
            raise ValueError(f"unknown inner solver {self.inner!r}")
        if self.eps_abs < 0 or self.eps_rel < 0 or self.max_iter < 1:
            raise ValueError("invalid stopping options")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdmmState:
    """Primal, auxiliary and scaled dual blocks of one ADMM run."""

    params: ParamState          # likelihood block (x and Delta)
    gamma: np.ndarray           # (1 + H° + D°) * M, operator row order
    psi: np.ndarray             # H * S, hour-major
    z: np.ndarray               # consensus vector, PrimalLayout order
    s_gamma: np.ndarray
    s_psi: np.ndarray
    u: np.ndarray
    t_gamma: np.ndarray
    t_psi: np.ndarray
    rho: float
    rho_gamma: float
    rho_psi: float
    iteration: int = 0
    history: list = field(default_factory=list)

    def copy(self) -> "AdmmState":
        return AdmmState(self.params.copy(), self.gamma.copy(), self.psi.copy(), self.z.copy(),
                         self.s_gamma.copy(), self.s_psi.copy(), self.u.copy(), self.t_gamma.copy(),
                         self.t_psi.copy(), self.rho, self.rho_gamma, self.rho_psi,
                         self.iteration, list(self.history))


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    primal_residual: float
    dual_residual: float
    eps_primal: float
    eps_dual: float
    objective: float
    converged: bool
    rho: float

    def as_dict(self) -> dict:
        return asdict(self)


# -- layout conversions -----------------------------------------------------

def params_to_layout(params: ParamState) -> np.ndarray:
    return np.concatenate([params.dow_int.T.ravel(), params.theta, params.hod_int.T.ravel(),
                           params.hod_shared, params.dow_shared])


def layout_to_params(vec: np.ndarray, delta: np.ndarray, n_stations: int, dims: CalendarDims) -> ParamState:
    """Map a consensus vector back to parameters; station 0's interactions are forced to zero."""
    lay = PrimalLayout(n_stations, dims)
    S = n_stations
    dow = vec[lay.dow_int].reshape(dims.dow_free, S).T.copy()
    hod = vec[lay.hod_int].reshape(dims.hod_free, S).T.copy()
    dow[0] = 0.0
    hod[0] = 0.0
    return ParamState(vec[lay.theta].copy(), hod, vec[lay.hod_shared].copy(), dow,
                      vec[lay.dow_shared].copy(), np.array(delta, dtype=float), dims)


def _cold_start(panel: RentalPanel) -> ParamState:
    """No-interaction fit (every interaction fused away), or a flat rate if that model is degenerate."""
    try:
        return fit_unpenalized(panel, "no_interaction", tol=1e-6, max_iter=50)
    except (DesignRankError, ConvergenceError):
        start = ParamState.zeros(panel.n_stations, panel.dims)
        rate = max(panel.y.mean(), 1e-3) / float(np.mean(panel.capacity))
        start.theta[:] = np.log(rate)
        return start


def init_state(panel: RentalPanel, plan: ProjectionPlan, cfg: PenaltyConfig, opts: AdmmOptions,
               start: ParamState | None = None) -> AdmmState:
    if start is None:
        start = _cold_start(panel)
    params = start.copy()
    z = params_to_layout(params)
    s_gamma = plan.d_theta @ z
    s_psi = plan.d_hod @ z
    rho_g = cfg.rho * opts.gamma_weight if cfg.lam_net > 0 else 0.0
    rho_p = cfg.rho * opts.psi_weight if cfg.lam_hour > 0 else 0.0
    return AdmmState(params, s_gamma.copy(), s_psi.copy(), z, s_gamma, s_psi,
                     np.zeros_like(z), np.zeros_like(s_gamma), np.zeros_like(s_psi),
                     float(cfg.rho), rho_g, rho_p)


# -- the three steps --------------------------------------------------------

def step1_primal(state: AdmmState, panel: RentalPanel, cfg: PenaltyConfig, graph: ProximityGraph,
                 opts: AdmmOptions | None = None, workspace: Step1Workspace | None = None) -> dict:
    """Update (x, Delta) by IRLS passes, then Gamma and Psi by their proximal maps.

    Each IRLS pass solves the weighted-Lasso model exactly by feature-sign
    search (``inner="active_set"``) or approximately by block coordinate
    descent (``inner="cd"``). A backtracking search on the true Step-1
    objective guards every pass, so the objective never increases.
    """
    opts = opts or AdmmOptions()
    ws = workspace or Step1Workspace(panel)
    rho, lam = state.rho, cfg.lam
    c = layout_to_params(state.z - state.u, np.zeros(5), panel.n_stations, panel.dims)
    p = state.params
    f_old = ws.objective(p, c, lam, rho)
    work = 0
    inner_ok = True
    c_struct = ws.to_struct(c)
    for _ in range(opts.irls_passes):
        eta, w, r = working_set(ws, p)
        if opts.inner == "cd":
            cand = p.copy()
            sweeps, change = cd_sweeps(ws, cand, c, w, r, lam, rho, opts.inner_tol, opts.cd_max_sweeps)
            work += sweeps
            inner_ok = inner_ok and change <= opts.inner_tol
        else:
            hess = ws.hessian(w, rho)
            lin = ws.linear_term(w * (eta + r)) + rho * np.where(ws.prox, c_struct, 0.0)
            b, ok = quadratic_lasso(hess, lin, lam, ws.lasso, ws.to_struct(p), ws.fixed,
                                    kkt_tol=opts.inner_tol)
            work += 1
            inner_ok = inner_ok and ok
            cand = ws.from_struct(b)
        f_new = ws.objective(cand, c, lam, rho)
        t = 1.0
        while not f_new <= f_old and t > 1e-6:
            t *= 0.5
            cand = _blend(p, cand, t)
            f_new = ws.objective(cand, c, lam, rho)
        if not f_new <= f_old:
            break
        move = max(np.max(np.abs(a - b), initial=0.0) for a, b in zip(_flat(cand), _flat(p)))
        p, f_old = cand, f_new
        if move <= 1e-10 * (1.0 + max(np.max(np.abs(a), initial=0.0) for a in _flat(p))):
            break
    if not inner_ok:
        # the guarded pass still decreased the objective; ADMM tolerates inexact steps
        log.debug("step-1 inner solver stopped above its KKT tolerance")
    state.params = p
    dims = panel.dims
    if state.rho_gamma > 0:
        gshape = (1 + dims.hod_free + dims.dow_free, graph.n_pairs)
        gcfg = PenaltyConfig(cfg.lam, cfg.lam_net, cfg.lam_hour, state.rho_gamma)
        state.gamma = update_gamma(state.s_gamma.reshape(gshape), state.t_gamma.reshape(gshape),
                                   gcfg, graph).ravel()
    if state.rho_psi > 0:
        state.psi = update_psi(state.s_psi, state.t_psi,
                               PenaltyConfig(cfg.lam, cfg.lam_net, cfg.lam_hour, state.rho_psi))
    return {"inner_work": work, "step1_objective": f_old, "inner_ok": inner_ok}


def _flat(p: ParamState):
    return (p.theta, p.hod_int, p.hod_shared, p.dow_int, p.dow_shared, p.delta)


def _blend(a: ParamState, b: ParamState, t: float) -> ParamState:
    return ParamState(*(x + t * (y - x) for x, y in zip(_flat(a), _flat(b))), a.dims)


def step2_project(state: AdmmState, plan: ProjectionPlan, method: str = "structured") -> ProjectionPlan:
    """Project onto the constraint set; returns the plan refactored for the current weights."""
    plan = plan.reweighted(state.rho_gamma / state.rho, state.rho_psi / state.rho)
    x = params_to_layout(state.params)
    state.z, state.s_gamma, state.s_psi = project(
        plan, x + state.u, state.gamma + state.t_gamma, state.psi + state.t_psi, method)
    # a block with zero weight is unconstrained: it simply follows the projection
    if state.rho_gamma == 0:
        state.gamma = state.s_gamma.copy()
    if state.rho_psi == 0:
        state.psi = state.s_psi.copy()
    return plan


def step3_dual(state: AdmmState) -> tuple[float, float, float]:
    """Scaled dual ascent; returns the primal residual norms of the x, Gamma and Psi blocks."""
    rx = params_to_layout(state.params) - state.z
    rg = state.gamma - state.s_gamma
    rp = state.psi - state.s_psi
    state.u += rx
    if state.rho_gamma > 0:
        state.t_gamma += rg
    if state.rho_psi > 0:
        state.t_psi += rp
    return float(np.linalg.norm(rx)), float(np.linalg.norm(rg)), float(np.linalg.norm(rp))


# -- driver -----------------------------------------------------------------

def estimate_from_state(state: AdmmState, panel: RentalPanel) -> ParamState:
    """Feasible estimate: the projected Z blocks with Delta from the likelihood step."""
    return layout_to_params(state.z, state.params.delta, panel.n_stations, panel.dims)


def solve(panel: RentalPanel, graph: ProximityGraph, cfg: PenaltyConfig, *,
          opts: AdmmOptions | None = None, plan: ProjectionPlan | None = None,
          warm_start: AdmmState | ParamState | None = None, callback=None):
    """Run ADMM until the primal and dual residuals meet the standard tolerances.

    Returns (estimate, report, state). ``warm_start`` may be the final state of
    a previous solve on a panel of the same shape (duals and penalties are
    reused) or a ParamState.
    """
    opts = opts or AdmmOptions()
    if graph.n_stations != panel.n_stations:
        raise ValueError("graph and panel disagree on the number of stations")
    plan = plan or build_plan(graph, panel.dims)
    if isinstance(warm_start, AdmmState):
        state = warm_start.copy()
        state.history = []
        state.iteration = 0
        if cfg.lam_net == 0:
            state.rho_gamma, state.t_gamma[:] = 0.0, 0.0
        elif state.rho_gamma == 0:
            state.rho_gamma = state.rho * opts.gamma_weight
        if cfg.lam_hour == 0:
            state.rho_psi, state.t_psi[:] = 0.0, 0.0
        elif state.rho_psi == 0:
            state.rho_psi = state.rho * opts.psi_weight
    else:
        state = init_state(panel, plan, cfg, opts, warm_start)
    ws = Step1Workspace(panel)
    n_c = state.z.size + state.gamma.size + state.psi.size
    root_n = np.sqrt(n_c)
    converged = False
    r_norm = s_norm = eps_pri = eps_dual = np.inf
    for it in range(1, opts.max_iter + 1):
        info = step1_primal(state, panel, cfg, graph, opts, ws)
        z_old, sg_old, sp_old = state.z, state.s_gamma, state.s_psi
        plan = step2_project(state, plan, opts.projection_method)
        rx, rg, rp = step3_dual(state)
        # dual residual blocks: rho_b times the change of the block's image of z
        sx = state.rho * float(np.linalg.norm(state.z - z_old))
        sg = state.rho_gamma * float(np.linalg.norm(state.s_gamma - sg_old))
        sp_ = state.rho_psi * float(np.linalg.norm(state.s_psi - sp_old))
        r_norm = float(np.sqrt(rx * rx + rg * rg + rp * rp))
        s_norm = float(np.sqrt(sx * sx + sg * sg + sp_ * sp_))
        x = params_to_layout(state.params)
        prim = np.sqrt(x @ x + state.gamma @ state.gamma + state.psi @ state.psi)
        aux = np.sqrt(state.z @ state.z + state.s_gamma @ state.s_gamma + state.s_psi @ state.s_psi)
        dual = np.sqrt((state.rho ** 2) * (state.u @ state.u)
                       + (state.rho_gamma ** 2) * (state.t_gamma @ state.t_gamma)
                       + (state.rho_psi ** 2) * (state.t_psi @ state.t_psi))
        eps_pri = root_n * opts.eps_abs + opts.eps_rel * max(prim, aux)
        eps_dual = root_n * opts.eps_abs + opts.eps_rel * dual
        state.iteration = it
        record = {"iter": it, "r_primal": r_norm, "r_dual": s_norm, "eps_primal": float(eps_pri),
                  "eps_dual": float(eps_dual), "rho": state.rho, "rho_gamma": state.rho_gamma,
                  "rho_psi": state.rho_psi, "inner_work": info["inner_work"],
                  "step1_objective": info["step1_objective"]}
        state.history.append(record)
        if callback is not None:
            callback(record)
        if log.isEnabledFor(logging.DEBUG):
            log.debug(json.dumps(record, sort_keys=True))
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break
        if opts.adapt_rho and it % opts.adapt_every == 0 and it <= opts.adapt_until:
            _balance(state, (rx, sx), (rg, sg), (rp, sp_), opts,
                     float(eps_pri / eps_dual) if opts.relative_balance else 1.0)
    est = estimate_from_state(state, panel)
    report = SolveReport(state.iteration, r_norm, s_norm, float(eps_pri), float(eps_dual),
                         objective(est, panel, graph, cfg), converged, state.rho)
    if not converged:
        log.warning("ADMM stopped after %d iterations without meeting tolerances "
                    "(r=%.3g/%.3g, s=%.3g/%.3g)", state.iteration, r_norm, eps_pri, s_norm, eps_dual)
    return est, report, state


def _balance(state: AdmmState, x_res, g_res, p_res, opts: AdmmOptions, scale: float = 1.0) -> None:
    """Residual balancing, applied to each constraint block on its own.

    Dual residuals are multiplied by ``scale`` (eps_primal / eps_dual) first,
    so the balance is struck between residuals relative to their tolerances.
    """
    mu, tau = opts.balance_ratio, opts.balance_factor

    def factor(r, s):
        s = s * scale
        if r > mu * s:
            return tau
        if s > mu * r:
            return 1.0 / tau
        return 1.0

    fx = factor(*x_res)
    if fx != 1.0:
        state.rho *= fx
        state.u /= fx
    if state.rho_gamma > 0:
        fg = factor(*g_res)
        if fg != 1.0:
            state.rho_gamma *= fg
            state.t_gamma /= fg
    if state.rho_psi > 0:
        fp = factor(*p_res)
        if fp != 1.0:
            state.rho_psi *= fp
            state.t_psi /= fp
