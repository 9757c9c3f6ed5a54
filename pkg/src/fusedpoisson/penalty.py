"""Lasso, network-fusion and hourly-fusion penalties with their proximal maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import ProximityGraph
from .model import ParamState, neg_loglik
from .data import RentalPanel


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 0.0
    lam_net: float = 0.0
    lam_hour: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if min(self.lam, self.lam_net, self.lam_hour) < 0:
            raise ValueError("penalty weights must be non-negative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "lambda_N": self.lam_net, "lambda_H": self.lam_hour, "rho": self.rho}


def lasso_penalty(params: ParamState) -> float:
    return float(np.abs(params.hod_int).sum() + np.abs(params.dow_int).sum())


def gamma_blocks(params: ParamState, graph: ProximityGraph) -> np.ndarray:
    """Gamma in row order: sqrt(2)*intercept differences, then hour and day phi differences.

    Shape (1 + H° + D°, M); column m belongs to directed pair m.
    """
    src, dst = graph.pairs[:, 0], graph.pairs[:, 1]
    dtheta = params.theta[src] - params.theta[dst]
    dh = (params.hod_int[src] - params.hod_int[dst]).T + dtheta
    dd = (params.dow_int[src] - params.dow_int[dst]).T + dtheta
    return np.vstack([np.sqrt(2.0) * dtheta[None, :], dh, dd])


def station_norms(gamma: np.ndarray, graph: ProximityGraph) -> np.ndarray:
    """Euclidean norm of each station's group within a Gamma array."""
    sq = np.bincount(graph.pairs[:, 0], weights=(gamma ** 2).sum(axis=0), minlength=graph.n_stations)
    return np.sqrt(sq)


def eval_p_N(params: ParamState, graph: ProximityGraph) -> float:
    """Group-Lasso network penalty, sum_s sqrt(|N(s)|) * ||gamma_s||.

    Uses the split into 2*(theta_s - theta_s')^2 plus phi differences over
    non-baseline hours and days, which is algebraically the phi form.
    """
    if graph.n_pairs == 0:
        return 0.0
    norms = station_norms(gamma_blocks(params, graph), graph)
    return float(np.sum(np.sqrt(graph.degree) * norms))


def eval_p_N_phi(params: ParamState, graph: ProximityGraph) -> float:
    """The same penalty written directly over all hours and days of phi."""
    phi = params.phi()
    total = 0.0
    for s, nbrs in enumerate(graph.neighbor_sets):
        if len(nbrs) == 0:
            continue
        acc = np.sum((phi.phi_hod[s] - phi.phi_hod[nbrs]) ** 2) + np.sum((phi.phi_dow[s] - phi.phi_dow[nbrs]) ** 2)
        total += np.sqrt(len(nbrs) * acc)
    return float(total)


def psi_blocks(params: ParamState) -> np.ndarray:
    """psi[s, h] = phi[s, h+1] - phi[s, h] with hour wraparound."""
    phi = params.phi().phi_hod
    return np.roll(phi, -1, axis=1) - phi


def eval_p_H(params: ParamState) -> float:
    return float(np.abs(psi_blocks(params)).sum())


def objective(params: ParamState, panel: RentalPanel, graph: ProximityGraph, cfg: PenaltyConfig) -> float:
    """Penalized negative log-likelihood minimized by the solver."""
    val = neg_loglik(params, panel)
    if cfg.lam:
        val += cfg.lam * lasso_penalty(params)
    if cfg.lam_net:
        val += cfg.lam_net * eval_p_N(params, graph)
    if cfg.lam_hour:
        val += cfg.lam_hour * eval_p_H(params)
    return val


def scalar_soft_threshold(x, kappa):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)


def group_soft_threshold(v, kappa: float) -> np.ndarray:
    """(1 - kappa/||v||)_+ v, with 0 mapped to 0."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm <= kappa or norm == 0.0:
        return np.zeros_like(v)
    return (1.0 - kappa / norm) * v


def update_gamma(s_gamma: np.ndarray, t_gamma: np.ndarray, cfg: PenaltyConfig,
                 graph: ProximityGraph) -> np.ndarray:
    """Per-station group soft-threshold of S - T with threshold sqrt(|N(s)|) lam_N / rho."""
    if s_gamma.shape != t_gamma.shape or s_gamma.shape[-1] != graph.n_pairs:
        raise ValueError("Gamma block shapes do not match the graph")
    v = s_gamma - t_gamma
    if cfg.lam_net == 0 or graph.n_pairs == 0:
        return v
    kappa = np.sqrt(graph.degree) * cfg.lam_net / cfg.rho
    norms = station_norms(v, graph)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > kappa, 1.0 - kappa / norms, 0.0)
    return v * scale[graph.pairs[:, 0]]


def update_psi(s_psi: np.ndarray, t_psi: np.ndarray, cfg: PenaltyConfig) -> np.ndarray:
    return scalar_soft_threshold(s_psi - t_psi, cfg.lam_hour / cfg.rho)
