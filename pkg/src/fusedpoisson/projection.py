"""Projection onto the fusion constraint set (the second ADMM step).

The projection solves (I + a D_theta' D_theta + b D_hod' D_hod) z = r, where
a and b are the penalty weights of the Gamma and Psi constraints relative to
the likelihood block (both 1 in the plain formulation). Every
station-indexed block of that matrix is a polynomial in the network
Laplacian, so rotating each block by the Laplacian eigenvectors E splits the
system into one small dense system per eigenvalue (size q = D° + 1 + H°),
coupled only through the H° shared hour effects. The plan stores a blocked
Cholesky factor of the rotated matrix:

    L = [[L_k (block diagonal over eigenvalues)   0  ],
         [B_k (border rows, one per eigenvalue)  L_s ]]

with L_k L_k' = A_k, B_k = C_k L_k^{-T} and L_s L_s' the Schur complement
on the shared hour effects. The factor depends only on (graph, dims).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .data import CalendarDims
from .graph import NetLaplacian, PrimalLayout, ProximityGraph, constraint_operators, laplacian_eig


class FactorizationError(ArithmeticError):
    pass


def hour_chain_matrix(n: int) -> np.ndarray:
    """tridiag(-1, 2, -1) of size n: cyclic hour differences with the baseline hour pinned at zero."""
    return 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)


def station_block_pattern(dims: CalendarDims) -> np.ndarray:
    """Coefficient of each Laplacian eigenvalue (of D_net'D_net) in the per-eigen block.

    Order within the block: day interactions, intercept, hour interactions.
    """
    D1, H1 = dims.dow_free, dims.hod_free
    q = D1 + 1 + H1
    G = np.zeros((q, q))
    v = D1
    G[v, v] = 2.0 + H1 + D1
    others = [j for j in range(q) if j != v]
    G[others, others] = 1.0
    G[v, others] = 1.0
    G[others, v] = 1.0
    return G


@dataclass(frozen=True)
class ProjectionPlan:
    graph: ProximityGraph
    dims: CalendarDims
    eig: NetLaplacian
    chol_blocks: np.ndarray      # (S, q, q) lower factors L_k
    chol_inv: np.ndarray         # (S, q, q) inverses of L_k
    border: np.ndarray           # (S, H°, q) border blocks B_k
    shared_chol: np.ndarray      # (H°, H°) factor of the shared-hour Schur complement
    d_theta: sp.csr_matrix
    d_hod: sp.csr_matrix
    w_gamma: float = 1.0
    w_psi: float = 1.0

    @property
    def layout(self) -> PrimalLayout:
        return PrimalLayout(self.graph.n_stations, self.dims)

    @cached_property
    def reduced_matrix(self) -> sp.csc_matrix:
        """P-bar: the normal-equation matrix without the shared day-effect columns."""
        n = self.layout.n_projected
        Dt = self.d_theta[:, :n]
        Dh = self.d_hod[:, :n]
        return (sp.eye(n) + self.w_gamma * (Dt.T @ Dt) + self.w_psi * (Dh.T @ Dh)).tocsc()

    def reweighted(self, w_gamma: float, w_psi: float) -> "ProjectionPlan":
        """Same graph and operators, refactored for new constraint weights."""
        if w_gamma == self.w_gamma and w_psi == self.w_psi:
            return self
        return _factor(self.graph, self.dims, self.eig, self.d_theta, self.d_hod, w_gamma, w_psi)

    @cached_property
    def _sparse_lu(self):
        return spla.splu(self.reduced_matrix)

    def rotation(self) -> sp.csr_matrix:
        """W: E on every station block, identity on the shared hour effects."""
        S, q, H1 = self.graph.n_stations, self.layout.q, self.dims.hod_free
        return sp.block_diag([sp.kron(sp.eye(q), self.eig.eigenvectors), sp.eye(H1)]).tocsr()

    def dense_factor(self) -> np.ndarray:
        """Assemble L in the un-permuted (block-major) order, for verification."""
        S, q, H1 = self.graph.n_stations, self.layout.q, self.dims.hod_free
        n = q * S + H1
        L = np.zeros((n, n))
        idx = np.arange(q)[None, :] * S + np.arange(S)[:, None]   # idx[k, j] = j*S + k
        for k in range(S):
            L[np.ix_(idx[k], idx[k])] = self.chol_blocks[k]
            L[np.ix_(q * S + np.arange(H1), idx[k])] = self.border[k]
        L[q * S:, q * S:] = self.shared_chol
        return L

    def solve(self, b: np.ndarray, method: str = "structured") -> np.ndarray:
        """Solve P-bar z = b."""
        if method == "sparse":
            return self._sparse_lu.solve(b)
        if method != "structured":
            raise ValueError(f"unknown method {method!r}")
        S, q = self.graph.n_stations, self.layout.q
        E = self.eig.eigenvectors
        b_st = b[:q * S].reshape(q, S)
        b_sh = b[q * S:]
        bt = (b_st @ E).T                                    # (S, q): row k holds E'b_j at k
        y = np.einsum("kij,kj->ki", self.chol_inv, bt)
        y_sh = scipy.linalg.solve_triangular(
            self.shared_chol, b_sh - np.einsum("khj,kj->h", self.border, y), lower=True)
        z_sh = scipy.linalg.solve_triangular(self.shared_chol, y_sh, lower=True, trans="T")
        rhs = y - np.einsum("khj,h->kj", self.border, z_sh)
        zt = np.einsum("kji,kj->ki", self.chol_inv, rhs)     # L_k^{-T} rhs_k
        z_st = E @ zt                                        # (S, q)
        return np.concatenate([z_st.T.ravel(), z_sh])


def build_plan(graph: ProximityGraph, dims: CalendarDims,
               w_gamma: float = 1.0, w_psi: float = 1.0) -> ProjectionPlan:
    eig = laplacian_eig(graph)
    d_theta, d_hod = constraint_operators(graph, dims)
    return _factor(graph, dims, eig, d_theta, d_hod, w_gamma, w_psi)


def _factor(graph, dims, eig, d_theta, d_hod, w_gamma, w_psi) -> ProjectionPlan:
    if not (w_gamma >= 0 and w_psi >= 0):
        raise ValueError("constraint weights must be non-negative")
    S, H1 = graph.n_stations, dims.hod_free
    q = dims.dow_free + 1 + H1
    kappa = 4.0 * eig.eigenvalues                 # eigenvalues of D_net'D_net
    G = station_block_pattern(dims)
    chain = w_psi * hour_chain_matrix(H1)
    base = np.eye(q)
    base[q - H1:, q - H1:] += chain
    A = base[None, :, :] + (w_gamma * kappa)[:, None, None] * G[None, :, :]
    try:
        Lk = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("per-eigenvalue block is not positive definite") from exc
    Lk_inv = np.tril(np.linalg.inv(Lk))
    C = np.zeros((S, H1, q))
    C[:, :, q - H1:] = eig.e_r[:, None, None] * chain[None, :, :]
    border = np.einsum("khj,kij->khi", C, Lk_inv)            # C_k L_k^{-T}
    schur = np.eye(H1) + S * chain - np.einsum("khj,kgj->hg", border, border)
    try:
        Ls = np.linalg.cholesky(schur)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("shared-hour Schur complement is not positive definite") from exc
    return ProjectionPlan(graph, dims, eig, Lk, Lk_inv, border, Ls, d_theta, d_hod,
                          float(w_gamma), float(w_psi))


def project(plan: ProjectionPlan, x_target: np.ndarray, gamma_target: np.ndarray,
            psi_target: np.ndarray, method: str = "structured"):
    """Weighted Euclidean projection of (x, Gamma, Psi) onto {Gamma = D_theta x, Psi = D_hod x}.

    ``x_target`` follows ``PrimalLayout``; Gamma and Psi are flat in operator
    row order. Returns (z, D_theta z, D_hod z); the shared day effects pass
    through unchanged because their operator columns are zero.
    """
    lay = plan.layout
    x_target = np.asarray(x_target, dtype=float)
    gamma_target = np.asarray(gamma_target, dtype=float).ravel()
    psi_target = np.asarray(psi_target, dtype=float).ravel()
    if (x_target.shape != (lay.size,) or gamma_target.shape != (plan.d_theta.shape[0],)
            or psi_target.shape != (plan.d_hod.shape[0],)):
        raise ValueError("projection inputs do not match the plan dimensions")
    b = x_target + plan.w_gamma * (plan.d_theta.T @ gamma_target) + plan.w_psi * (plan.d_hod.T @ psi_target)
    n = lay.n_projected
    z = np.empty(lay.size)
    z[:n] = plan.solve(b[:n], method)
    z[n:] = x_target[n:]
    return z, plan.d_theta @ z, plan.d_hod @ z


def dense_projection(plan: ProjectionPlan, x_target, gamma_target, psi_target):
    """Reference solve of the full normal equations with a dense matrix."""
    Dt = plan.d_theta.toarray()
    Dh = plan.d_hod.toarray()
    a, c = plan.w_gamma, plan.w_psi
    P = np.eye(Dt.shape[1]) + a * (Dt.T @ Dt) + c * (Dh.T @ Dh)
    b = x_target + a * (Dt.T @ np.ravel(gamma_target)) + c * (Dh.T @ np.ravel(psi_target))
    z = np.linalg.solve(P, b)
    return z, Dt @ z, Dh @ z
