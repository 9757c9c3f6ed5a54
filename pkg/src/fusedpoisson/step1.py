"""Weighted-Lasso subproblem of the likelihood step.

One IRLS pass replaces the Poisson log-likelihood by its weighted
least-squares model, giving

    min_b 1/2 b'Qb - g'b + lam |b_int|_1,    Q = X'WX + rho * P,

where P is the identity on every coordinate that appears in the consensus
constraint (everything except Delta). Q has an arrow shape: a small global
block (Delta, shared hour and day effects) plus one dense block per station
(intercept and that station's interactions), connected only through the
global block. ``StationHessian`` assembles those blocks from per-cell weight
sums and solves with a Schur complement on the global block.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .data import RentalPanel
from .model import ETA_CLAMP, MU_FLOOR, ParamState, design_matrix
from .penalty import scalar_soft_threshold


class Step1Workspace:
    """Per-panel index arrays and the coordinate map used by the Step-1 solvers.

    Structured coordinates: the global block [Delta (5), shared hours, shared
    days] followed by one block per station [theta_s, hour interactions, day
    interactions]. Station 0's interaction slots exist but are held at zero.
    """

    def __init__(self, panel: RentalPanel):
        o = panel.obs
        d = panel.dims
        self.S, self.H, self.D = panel.n_stations, d.n_hours, d.n_days_of_week
        self.H1, self.D1 = d.hod_free, d.dow_free
        self.dims = d
        self.station, self.hour, self.dow = o.station, o.hour, o.dow
        self.sh = o.station * self.H + o.hour
        self.sd = o.station * self.D + o.dow
        self.shd = self.sh * self.D + o.dow
        self.offset = o.log_offset
        self.y = panel.y
        air = np.zeros((len(o.air), 3))
        for k in range(1, 4):
            air[:, k - 1] = o.air == k
        self.xdelta = np.column_stack([o.time, o.rain, air])
        self.delta_active = np.any(self.xdelta != 0, axis=0)
        self.g = 5 + self.H1 + self.D1
        self.q = 1 + self.H1 + self.D1
        self.size = self.g + self.S * self.q
        fixed = np.zeros(self.size, dtype=bool)
        fixed[:5] = ~self.delta_active
        fixed[self.g + 1:self.g + self.q] = True          # station 0 interactions
        self.fixed = fixed
        lasso = np.zeros((self.S, self.q), dtype=bool)
        lasso[:, 1:] = True
        self.lasso = np.concatenate([np.zeros(self.g, dtype=bool), lasso.ravel()])
        self.prox = np.ones(self.size, dtype=bool)
        self.prox[:5] = False
        self._panel = panel
        self._X = None

    @property
    def X(self) -> sp.csr_matrix:
        if self._X is None:
            self._X = design_matrix(self._panel)
        return self._X

    def eta(self, p: ParamState) -> np.ndarray:
        """Linear predictor without offset: a per-cell table plus the Delta terms."""
        hod = np.zeros((self.S, self.H))
        hod[:, 1:] = p.hod_shared + p.hod_int
        dow = np.zeros((self.S, self.D))
        dow[:, 1:] = p.dow_shared + p.dow_int
        cell = p.theta[:, None, None] + hod[:, :, None] + dow[:, None, :]
        return cell.ravel()[self.shd] + self.xdelta @ p.delta

    def objective(self, p: ParamState, c: ParamState, lam: float, rho: float) -> float:
        """Exact Step-1 objective: nll + lam |interactions|_1 + rho/2 |x - c|^2."""
        log_mu = np.clip(self.eta(p), -ETA_CLAMP, ETA_CLAMP) + self.offset
        val = np.sum(np.exp(log_mu)) - self.y @ log_mu
        val += lam * (np.abs(p.hod_int).sum() + np.abs(p.dow_int).sum())
        val += 0.5 * rho * sum(np.sum((a - b) ** 2) for a, b in _prox_blocks(p, c))
        return float(val)

    def to_struct(self, p: ParamState) -> np.ndarray:
        blocks = np.column_stack([p.theta, p.hod_int, p.dow_int])
        return np.concatenate([p.delta, p.hod_shared, p.dow_shared, blocks.ravel()])

    def from_struct(self, b: np.ndarray) -> ParamState:
        H1, D1 = self.H1, self.D1
        blocks = b[self.g:].reshape(self.S, self.q)
        hod = blocks[:, 1:1 + H1].copy()
        dow = blocks[:, 1 + H1:].copy()
        hod[0] = 0.0
        dow[0] = 0.0
        return ParamState(blocks[:, 0].copy(), hod, b[5:5 + H1].copy(), dow,
                          b[5 + H1:self.g].copy(), b[:5].copy(), self.dims)

    def cell_sums(self, v: np.ndarray) -> np.ndarray:
        return np.bincount(self.shd, weights=v, minlength=self.S * self.H * self.D).reshape(
            self.S, self.H, self.D)

    def linear_term(self, v: np.ndarray) -> np.ndarray:
        """X'v in structured coordinates."""
        V = self.cell_sums(v)
        Vsh, Vsd = V.sum(axis=2), V.sum(axis=1)
        blocks = np.column_stack([Vsh.sum(axis=1), Vsh[:, 1:], Vsd[:, 1:]])
        return np.concatenate([self.xdelta.T @ v, Vsh.sum(axis=0)[1:], Vsd.sum(axis=0)[1:], blocks.ravel()])

    def hessian(self, w: np.ndarray, rho: float) -> "StationHessian":
        S, H1, D1, g, q = self.S, self.H1, self.D1, self.g, self.q
        W = self.cell_sums(w)
        WX = np.stack([self.cell_sums(w * self.xdelta[:, k]) for k in range(5)])   # (5, S, H, D)
        Wsh, Wsd = W.sum(axis=2), W.sum(axis=1)
        hh = slice(1, 1 + H1)
        dd = slice(1 + H1, q)

        B = np.zeros((S, q, q))
        B[:, 0, 0] = Wsh.sum(axis=1)
        B[:, 0, hh] = Wsh[:, 1:]
        B[:, 0, dd] = Wsd[:, 1:]
        B[:, hh, dd] = W[:, 1:, 1:]
        B = B + np.transpose(B, (0, 2, 1))
        B[:, 0, 0] /= 2.0
        ih, idd = np.arange(1, 1 + H1), np.arange(1 + H1, q)
        B[:, ih, ih] = Wsh[:, 1:]
        B[:, idd, idd] = Wsd[:, 1:]
        B += rho * np.eye(q)

        C = np.zeros((S, q, g))
        WXsh, WXsd = WX.sum(axis=3), WX.sum(axis=2)            # (5, S, H), (5, S, D)
        C[:, 0, :5] = WXsh.sum(axis=2).T
        C[:, hh, :5] = np.transpose(WXsh[:, :, 1:], (1, 2, 0))
        C[:, dd, :5] = np.transpose(WXsd[:, :, 1:], (1, 2, 0))
        hs = slice(5, 5 + H1)
        ds = slice(5 + H1, g)
        C[:, 0, hs] = Wsh[:, 1:]
        C[:, 0, ds] = Wsd[:, 1:]
        C[:, ih, 5 + np.arange(H1)] = Wsh[:, 1:]
        C[:, idd, 5 + H1 + np.arange(D1)] = Wsd[:, 1:]
        C[:, dd, hs] = np.transpose(W[:, 1:, 1:], (0, 2, 1))
        C[:, hh, ds] = W[:, 1:, 1:]

        G = np.zeros((g, g))
        G[:5, :5] = self.xdelta.T @ (w[:, None] * self.xdelta)
        G[:5, hs] = WXsh.sum(axis=1)[:, 1:]
        G[:5, ds] = WXsd.sum(axis=1)[:, 1:]
        G[hs, ds] = W.sum(axis=0)[1:, 1:]
        G[hs, :5] = G[:5, hs].T
        G[ds, :5] = G[:5, ds].T
        G[ds, hs] = G[hs, ds].T
        G[hs, hs] = np.diag(Wsh.sum(axis=0)[1:] + rho)
        G[ds, ds] = np.diag(Wsd.sum(axis=0)[1:] + rho)
        return StationHessian(G, C, B)

    def struct_design(self) -> sp.csc_matrix:
        """The sparse design with columns in structured order (zero columns for fixed slots)."""
        S, H1, D1, g, q = self.S, self.H1, self.D1, self.g, self.q
        X = self.X
        cols = np.full(self.size, X.shape[1])
        cols[:g] = np.arange(g)
        for s in range(S):
            base = g + s * q
            cols[base] = g + s
            if s > 0:
                cols[base + 1:base + 1 + H1] = g + S + (s - 1) * H1 + np.arange(H1)
                cols[base + 1 + H1:base + q] = g + S + (S - 1) * H1 + (s - 1) * D1 + np.arange(D1)
        Xz = sp.hstack([X, sp.csr_matrix((X.shape[0], 1))]).tocsc()
        return Xz[:, cols]

    def reference_quadratic(self, w: np.ndarray, rho: float) -> "SparseQuadratic":
        X = self.struct_design()
        return SparseQuadratic(X.T @ sp.diags(w) @ X + sp.diags(rho * self.prox.astype(float)))


def _prox_blocks(p: ParamState, c: ParamState):
    return ((p.theta, c.theta), (p.hod_int[1:], c.hod_int[1:]), (p.dow_int[1:], c.dow_int[1:]),
            (p.hod_shared, c.hod_shared), (p.dow_shared, c.dow_shared))


class StationHessian:
    """Arrow-shaped symmetric matrix [[G, C'], [C, blockdiag(B_s)]] in structured order."""

    def __init__(self, G: np.ndarray, C: np.ndarray, B: np.ndarray):
        self.G, self.C, self.B = G, C, B
        self.g = G.shape[0]
        self.S, self.q = B.shape[0], B.shape[1]

    def matvec(self, b: np.ndarray) -> np.ndarray:
        bg = b[:self.g]
        bs = b[self.g:].reshape(self.S, self.q)
        out_g = self.G @ bg + np.tensordot(self.C, bs, axes=([0, 1], [0, 1]))
        out_s = self.C @ bg + (self.B @ bs[:, :, None])[:, :, 0]
        return np.concatenate([out_g, out_s.ravel()])

    def toarray(self) -> np.ndarray:
        n = self.g + self.S * self.q
        M = np.zeros((n, n))
        M[:self.g, :self.g] = self.G
        for s in range(self.S):
            sl = slice(self.g + s * self.q, self.g + (s + 1) * self.q)
            M[sl, sl] = self.B[s]
            M[sl, :self.g] = self.C[s]
            M[:self.g, sl] = self.C[s].T
        return M

    def solve(self, free: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Solve the system restricted to ``free`` coordinates; the others are returned as 0."""
        g = self.g
        fg = free[:g]
        fs = free[g:].reshape(self.S, self.q)
        B = self.B * (fs[:, :, None] & fs[:, None, :])
        idx = np.arange(self.q)
        B[:, idx, idx] += ~fs
        C = self.C * fs[:, :, None] * fg[None, None, :]
        G = self.G * np.outer(fg, fg) + np.diag(~fg).astype(float)
        rg = np.where(fg, rhs[:g], 0.0)
        rs = np.where(fs, rhs[g:].reshape(self.S, self.q), 0.0)
        L = np.linalg.cholesky(B)
        # B^{-1} [C, r] through the batched Cholesky factor
        Y = _chol_solve(L, np.concatenate([C, rs[:, :, None]], axis=2))
        BiC, Bir = Y[:, :, :g], Y[:, :, g]
        schur = G - np.tensordot(C, BiC, axes=([0, 1], [0, 1]))
        xg = np.linalg.solve(schur, rg - np.tensordot(C, Bir, axes=([0, 1], [0, 1])))
        xs = Bir - BiC @ xg
        out = np.concatenate([xg, xs.ravel()])
        out[~free] = 0.0
        return out


def _chol_solve(L: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Batched solve of (L L') X = R for lower-triangular L."""
    Linv = np.linalg.inv(L)
    return np.transpose(Linv, (0, 2, 1)) @ (Linv @ R)


class SparseQuadratic:
    """Same interface as ``StationHessian`` for a generic sparse Q (reference and tests)."""

    def __init__(self, Q: sp.spmatrix):
        self.Q = sp.csc_matrix(Q)

    def matvec(self, b):
        return self.Q @ b

    def solve(self, free, rhs):
        idx = np.flatnonzero(free)
        out = np.zeros(self.Q.shape[0])
        if idx.size:
            out[idx] = np.atleast_1d(spla.spsolve(self.Q[idx][:, idx].tocsc(), rhs[idx]))
        return out


def quadratic_lasso(Q, g: np.ndarray, lam: float, lasso: np.ndarray, beta: np.ndarray,
                    fixed: np.ndarray | None = None, *, kkt_tol: float = 1e-9,
                    max_iter: int = 100) -> tuple[np.ndarray, bool]:
    """Minimize 1/2 b'Qb - g'b + lam |b[lasso]|_1 with b[fixed] = 0, by feature-sign search.

    Each iteration fixes the signs on an active set, solves that linear system
    exactly and moves to the best point on the segment towards it, checking
    every point where a coordinate changes sign. ``Q`` needs ``matvec`` and
    ``solve(free_mask, rhs)``. Returns (b, kkt_satisfied).
    """
    n = len(g)
    fixed = np.zeros(n, dtype=bool) if fixed is None else fixed
    beta = np.where(fixed, 0.0, np.asarray(beta, dtype=float))

    def F(b):
        return 0.5 * b @ Q.matvec(b) - g @ b + lam * np.abs(b[lasso]).sum()

    scale = max(1.0, float(np.max(np.abs(g), initial=0.0)))
    tol = kkt_tol * scale
    Qb = Q.matvec(beta)
    f = 0.5 * beta @ Qb - g @ beta + lam * np.abs(beta[lasso]).sum()
    for _ in range(max_iter):
        grad = Qb - g
        zero = lasso & (beta == 0) & ~fixed
        signs = np.where(lasso, np.sign(beta), 0.0)
        active = ~fixed & ~zero
        resid = np.where(active, grad + lam * signs, 0.0)
        viol = zero & (np.abs(grad) > lam + tol)
        if not viol.any() and np.max(np.abs(resid), initial=0.0) <= tol:
            return beta, True
        moved = False
        picks = ("all", "one") if viol.any() else ("all",)
        for pick in picks:
            act = active.copy()
            sg = signs.copy()
            if viol.any():
                add = viol.copy()
                if pick == "one":
                    add[:] = False
                    add[np.argmax(np.where(viol, np.abs(grad), -np.inf))] = True
                act |= add
                sg[add] = -np.sign(grad[add])
            cand = Q.solve(act, g - lam * sg)
            if not np.all(np.isfinite(cand)):
                break
            d = cand - beta
            Qd = Q.matvec(d)
            # smooth part along the segment: f_s(t) = f_s(0) + t grad'd + t^2/2 d'Qd
            gd, dQd = grad @ d, d @ Qd
            f_smooth0 = f - lam * np.abs(beta[lasso]).sum()
            cross = lasso & (beta != 0) & (np.sign(cand) != np.sign(beta))
            ts = sorted({1.0} | {float(t) for t in -beta[cross] / d[cross] if 0.0 < t < 1.0})
            best, fbest, tbest = None, f, 0.0
            for t in ts:
                b = beta + t * d
                if t < 1.0:
                    # the coordinate(s) reaching zero at t land exactly on it
                    hit = cross & (np.abs(-beta / np.where(d == 0, 1.0, d) - t) <= 1e-12)
                    b[hit] = 0.0
                fb = f_smooth0 + t * gd + 0.5 * t * t * dQd + lam * np.abs(b[lasso]).sum()
                if fb < fbest:
                    best, fbest, tbest = b, fb, t
            if best is not None and fbest < f - 1e-15 * abs(f):
                beta = best
                Qb = Q.matvec(beta)
                f = F(beta)
                moved = True
                break
        if not moved:
            return beta, False
    return beta, False


def cd_sweeps(ws: Step1Workspace, p: ParamState, c: ParamState, w: np.ndarray, r: np.ndarray,
              lam: float, rho: float, tol: float, max_sweeps: int) -> tuple[int, float]:
    """Block coordinate descent on the weighted least-squares model; ``r`` = z - eta, updated in place.

    Coordinates in one block touch disjoint observations, so each block is a
    closed-form update. Stops when the largest coordinate change is below tol.
    """
    S, H, D = ws.S, ws.H, ws.D
    wsum_s = np.bincount(ws.station, weights=w, minlength=S)
    wsum_h = np.bincount(ws.hour, weights=w, minlength=H)[1:]
    wsum_d = np.bincount(ws.dow, weights=w, minlength=D)[1:]
    wsum_sh = np.bincount(ws.sh, weights=w, minlength=S * H).reshape(S, H)[1:, 1:]
    wsum_sd = np.bincount(ws.sd, weights=w, minlength=S * D).reshape(S, D)[1:, 1:]
    wxx = (w[:, None] * ws.xdelta ** 2).sum(axis=0)
    change = np.inf
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        change = 0.0

        g = np.bincount(ws.station, weights=w * r, minlength=S)
        new = (g + wsum_s * p.theta + rho * c.theta) / (wsum_s + rho)
        d = new - p.theta
        p.theta = new
        r -= d[ws.station]
        change = max(change, np.max(np.abs(d), initial=0.0))

        g = np.bincount(ws.hour, weights=w * r, minlength=H)[1:]
        new = (g + wsum_h * p.hod_shared + rho * c.hod_shared) / (wsum_h + rho)
        d = new - p.hod_shared
        p.hod_shared = new
        r -= np.concatenate([[0.0], d])[ws.hour]
        change = max(change, np.max(np.abs(d), initial=0.0))

        g = np.bincount(ws.dow, weights=w * r, minlength=D)[1:]
        new = (g + wsum_d * p.dow_shared + rho * c.dow_shared) / (wsum_d + rho)
        d = new - p.dow_shared
        p.dow_shared = new
        r -= np.concatenate([[0.0], d])[ws.dow]
        change = max(change, np.max(np.abs(d), initial=0.0))

        if S > 1 and H > 1:
            g = np.bincount(ws.sh, weights=w * r, minlength=S * H).reshape(S, H)[1:, 1:]
            old = p.hod_int[1:]
            new = scalar_soft_threshold(g + wsum_sh * old + rho * c.hod_int[1:], lam) / (wsum_sh + rho)
            d = np.zeros((S, H))
            d[1:, 1:] = new - old
            p.hod_int[1:] = new
            r -= d.ravel()[ws.sh]
            change = max(change, np.max(np.abs(d)))

        if S > 1 and D > 1:
            g = np.bincount(ws.sd, weights=w * r, minlength=S * D).reshape(S, D)[1:, 1:]
            old = p.dow_int[1:]
            new = scalar_soft_threshold(g + wsum_sd * old + rho * c.dow_int[1:], lam) / (wsum_sd + rho)
            d = np.zeros((S, D))
            d[1:, 1:] = new - old
            p.dow_int[1:] = new
            r -= d.ravel()[ws.sd]
            change = max(change, np.max(np.abs(d)))

        for k in range(5):
            if not ws.delta_active[k]:
                continue
            col = ws.xdelta[:, k]
            step = float((w * col) @ r) / wxx[k]
            p.delta[k] += step
            r -= step * col
            change = max(change, abs(step) * np.sqrt(wxx[k] / max(wsum_s.sum(), 1e-300)))

        if change <= tol:
            break
    return sweep, change


def working_set(ws: Step1Workspace, p: ParamState):
    """(eta, w, r) with IRLS weights w = mu and r = z - eta = y/mu - 1."""
    eta = ws.eta(p)
    w = np.maximum(np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP) + ws.offset), MU_FLOOR)
    return eta, w, ws.y / w - 1.0
