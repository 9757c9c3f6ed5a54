"""Poisson regression with station-specific hourly and daily effects.

log(mu_i / C_s) = theta_s + alpha t + beta_rain z_rain + <beta_air, z_air>
                  + hod_h + dow_d + hod_{s,h} + dow_{s,d}

Baselines (hour 0, day-of-week 0, air category 0 and all interactions of
station 0) are structural zeros. The station-0 interaction rows exist in the
arrays for convenience but are always zero.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .data import CalendarDims, RentalPanel

log = logging.getLogger(__name__)

ETA_CLAMP = 40.0
MU_FLOOR = 1e-10
DELTA_NAMES = ("alpha", "beta_rain", "beta_air_1", "beta_air_2", "beta_air_3")


class ConvergenceError(RuntimeError):
    pass


class DesignRankError(ValueError):
    pass


@dataclass
class ParamState:
    theta: np.ndarray
    hod_int: np.ndarray
    hod_shared: np.ndarray
    dow_int: np.ndarray
    dow_shared: np.ndarray
    delta: np.ndarray
    dims: CalendarDims = field(default_factory=CalendarDims)

    def __post_init__(self):
        S = len(self.theta)
        H1, D1 = self.dims.hod_free, self.dims.dow_free
        expected = {"hod_int": (S, H1), "hod_shared": (H1,), "dow_int": (S, D1),
                    "dow_shared": (D1,), "delta": (5,)}
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        self.theta = np.asarray(self.theta, dtype=float)
        if S and (np.any(self.hod_int[0] != 0) or np.any(self.dow_int[0] != 0)):
            raise ValueError("interactions of the baseline station must be zero")

    @classmethod
    def zeros(cls, n_stations: int, dims: CalendarDims | None = None) -> "ParamState":
        dims = dims or CalendarDims()
        return cls(np.zeros(n_stations), np.zeros((n_stations, dims.hod_free)),
                   np.zeros(dims.hod_free), np.zeros((n_stations, dims.dow_free)),
                   np.zeros(dims.dow_free), np.zeros(5), dims)

    @property
    def n_stations(self) -> int:
        return len(self.theta)

    @property
    def n_free(self) -> int:
        return self.dims.n_params(self.n_stations)

    def copy(self) -> "ParamState":
        return ParamState(self.theta.copy(), self.hod_int.copy(), self.hod_shared.copy(),
                          self.dow_int.copy(), self.dow_shared.copy(), self.delta.copy(), self.dims)

    def to_free(self) -> np.ndarray:
        """Free parameters in design-column order (see ``design_matrix``)."""
        return np.concatenate([self.delta, self.hod_shared, self.dow_shared, self.theta,
                               self.hod_int[1:].ravel(), self.dow_int[1:].ravel()])

    @classmethod
    def from_free(cls, vec, n_stations: int, dims: CalendarDims) -> "ParamState":
        vec = np.asarray(vec, dtype=float)
        S, H1, D1 = n_stations, dims.hod_free, dims.dow_free
        cuts = np.cumsum([5, H1, D1, S, (S - 1) * H1])
        delta, hs, ds, theta, hi, di = np.split(vec, cuts)
        hod = np.zeros((S, H1))
        hod[1:] = hi.reshape(S - 1, H1)
        dow = np.zeros((S, D1))
        dow[1:] = di.reshape(S - 1, D1)
        return cls(theta, hod, hs, dow, ds, delta, dims)

    def phi(self) -> "PhiView":
        return PhiView.from_params(self)

    def interactions_zeroed(self) -> "ParamState":
        out = self.copy()
        out.hod_int[:] = 0.0
        out.dow_int[:] = 0.0
        return out


@dataclass(frozen=True)
class PhiView:
    """Combined station-specific hourly and daily effects."""

    phi_hod: np.ndarray
    phi_dow: np.ndarray

    @classmethod
    def from_params(cls, p: ParamState) -> "PhiView":
        hod = np.concatenate([np.zeros((p.n_stations, 1)), p.hod_int + p.hod_shared], axis=1)
        dow = np.concatenate([np.zeros((p.n_stations, 1)), p.dow_int + p.dow_shared], axis=1)
        return cls(p.theta[:, None] + hod, p.theta[:, None] + dow)


def design_matrix(panel: RentalPanel, model_kind: str = "full_interaction") -> sp.csr_matrix:
    """Sparse design in free-parameter order.

    Columns: alpha, rain, air 1..3, shared hours 1.., shared days 1..,
    station intercepts, then (full model only) station-hour and station-day
    interactions for stations 1.. .
    """
    o = panel.obs
    n, S = panel.n, panel.n_stations
    H1, D1 = panel.dims.hod_free, panel.dims.dow_free
    rows, cols, vals = [], [], []
    idx = np.arange(n)

    def add(mask, col, val=1.0):
        r = idx[mask]
        rows.append(r)
        cols.append(np.broadcast_to(col, r.shape) if np.ndim(col) == 0 else col[mask])
        vals.append(np.broadcast_to(val, r.shape) if np.ndim(val) == 0 else val[mask])

    everything = np.ones(n, dtype=bool)
    add(everything, 0, o.time)
    add(everything, 1, o.rain)
    add(o.air > 0, 1 + o.air)
    base = 5
    add(o.hour > 0, base + o.hour - 1)
    base += H1
    add(o.dow > 0, base + o.dow - 1)
    base += D1
    add(everything, base + o.station)
    base += S
    if model_kind == "full_interaction":
        add((o.station > 0) & (o.hour > 0), base + (o.station - 1) * H1 + o.hour - 1)
        base += (S - 1) * H1
        add((o.station > 0) & (o.dow > 0), base + (o.station - 1) * D1 + o.dow - 1)
        base += (S - 1) * D1
    elif model_kind != "no_interaction":
        raise ValueError(f"unknown model kind {model_kind!r}")
    X = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, base))
    X.eliminate_zeros()
    return X


def linear_predictor(params: ParamState, panel: RentalPanel) -> np.ndarray:
    """eta_i without the capacity offset, clamped to +-ETA_CLAMP."""
    o = panel.obs
    hod = np.concatenate([[0.0], params.hod_shared])
    dow = np.concatenate([[0.0], params.dow_shared])
    hod_int = np.concatenate([np.zeros((params.n_stations, 1)), params.hod_int], axis=1)
    dow_int = np.concatenate([np.zeros((params.n_stations, 1)), params.dow_int], axis=1)
    air = np.concatenate([[0.0], params.delta[2:5]])
    eta = (params.theta[o.station] + params.delta[0] * o.time + params.delta[1] * o.rain
           + air[o.air] + hod[o.hour] + dow[o.dow]
           + hod_int[o.station, o.hour] + dow_int[o.station, o.dow])
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def mean_surface(params: ParamState, panel: RentalPanel) -> np.ndarray:
    return np.exp(linear_predictor(params, panel) + panel.obs.log_offset)


def mean(params: ParamState, panel: RentalPanel, i: int) -> float:
    if not 0 <= i < panel.n:
        raise IndexError(f"observation index {i} out of range")
    return float(mean_surface(params, panel)[i])


def neg_loglik(params: ParamState, panel: RentalPanel) -> float:
    """sum(mu) - sum(y log mu); the log(y!) constant is dropped."""
    log_mu = linear_predictor(params, panel) + panel.obs.log_offset
    return float(np.sum(np.exp(log_mu)) - np.dot(panel.y, log_mu))


def neg_loglik_grad(params: ParamState, panel: RentalPanel) -> np.ndarray:
    """Gradient with respect to the free parameters (``ParamState.to_free`` order)."""
    mu = mean_surface(params, panel)
    return design_matrix(panel).T @ (mu - panel.y)


def irls_working_set(params: ParamState, panel: RentalPanel):
    """IRLS weights w = mu and working response z = eta + y/mu - 1."""
    eta = linear_predictor(params, panel)
    w = np.maximum(np.exp(eta + panel.obs.log_offset), MU_FLOOR)
    return w, eta + panel.y / w - 1.0


def fit_unpenalized(panel: RentalPanel, model_kind: str = "full_interaction", *,
                    tol: float = 1e-8, max_iter: int = 200, ridge: float | None = None,
                    start: ParamState | None = None) -> ParamState:
    """Maximum likelihood by damped Newton-IRLS on the sparse design.

    The full-interaction model gets a 1e-8 ridge so that cells whose counts are
    all zero do not drive their coefficient to minus infinity.
    """
    X = design_matrix(panel, model_kind)
    colsum = np.asarray(abs(X).sum(axis=0)).ravel()
    if np.any(colsum == 0):
        raise DesignRankError(f"design has {int(np.sum(colsum == 0))} all-zero column(s)")
    if ridge is None:
        ridge = 1e-8 if model_kind == "full_interaction" else 0.0
    y, off = panel.y, panel.obs.log_offset
    p = X.shape[1]

    if start is not None:
        beta = start.to_free()[:p] if model_kind == "full_interaction" else _no_int_vec(start)
    else:
        beta = np.zeros(p)
        k0 = 5 + panel.dims.hod_free + panel.dims.dow_free
        beta[k0:k0 + panel.n_stations] = np.log(max(y.mean(), 1e-3) / np.exp(off).mean())

    def objective(b):
        eta = np.clip(X @ b, -ETA_CLAMP, ETA_CLAMP) + off
        return np.sum(np.exp(eta)) - y @ eta + 0.5 * ridge * b @ b

    f = objective(beta)
    for it in range(max_iter):
        eta = np.clip(X @ beta, -ETA_CLAMP, ETA_CLAMP) + off
        mu = np.exp(eta)
        score = X.T @ (y - mu) - ridge * beta
        if np.max(np.abs(score)) <= tol * max(1.0, np.sqrt(y.sum() / len(y))):
            break
        hess = (X.T @ sp.diags(mu) @ X + ridge * sp.eye(p)).tocsc()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                step = spla.spsolve(hess, score)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise DesignRankError("singular information matrix") from exc
        if not np.all(np.isfinite(step)):
            raise DesignRankError("singular information matrix")
        t = 1.0
        while True:
            cand = beta + t * step
            fc = objective(cand)
            if fc <= f + 1e-12 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        beta, f = cand, fc
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations "
                               f"(max |score| = {np.max(np.abs(score)):.3g})")
    log.debug("IRLS %s converged in %d iterations", model_kind, it)
    if model_kind == "full_interaction":
        return ParamState.from_free(beta, panel.n_stations, panel.dims)
    full = np.zeros(panel.dims.n_params(panel.n_stations))
    full[:p] = beta
    return ParamState.from_free(full, panel.n_stations, panel.dims)


def _no_int_vec(params: ParamState) -> np.ndarray:
    d = params.dims
    return params.to_free()[:5 + d.hod_free + d.dow_free + params.n_stations]


# -- bundle I/O -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_bundle(params: ParamState, directory, station_ids, extra: dict | None = None) -> None:
    """Write one CSV per parameter block plus a JSON header with the dimensions."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dims = params.dims
    header = {
        "format": "fusedpoisson-bundle/1",
        "n_stations": params.n_stations,
        "n_hours": dims.n_hours,
        "n_days_of_week": dims.n_days_of_week,
        "station_ids": list(station_ids),
        "files": ["delta.csv", "shared.csv", "theta.csv", "hod.csv", "dow.csv"],
    }
    if extra:
        header.update(extra)
    (d / "bundle.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(d / "delta.csv", "w", encoding="utf-8") as fh:
        fh.write("name,value\n")
        for k, name in enumerate(DELTA_NAMES):
            fh.write(f"{name},{_fmt(params.delta[k])}\n")
    with open(d / "shared.csv", "w", encoding="utf-8") as fh:
        fh.write("kind,index,value\n")
        for h, v in enumerate(params.hod_shared, start=1):
            fh.write(f"hod,{h},{_fmt(v)}\n")
        for k, v in enumerate(params.dow_shared, start=1):
            fh.write(f"dow,{k},{_fmt(v)}\n")
    with open(d / "theta.csv", "w", encoding="utf-8") as fh:
        fh.write("station_id,theta\n")
        for sid, v in zip(station_ids, params.theta):
            fh.write(f"{sid},{_fmt(v)}\n")
    for name, arr in (("hod", params.hod_int), ("dow", params.dow_int)):
        with open(d / f"{name}.csv", "w", encoding="utf-8") as fh:
            fh.write("station_id," + ",".join(f"{name}_{k}" for k in range(1, arr.shape[1] + 1)) + "\n")
            for sid, row in zip(station_ids, arr):
                fh.write(sid + "," + ",".join(_fmt(v) for v in row) + "\n")


def read_bundle(directory) -> tuple[ParamState, dict]:
    d = Path(directory)
    header = json.loads((d / "bundle.json").read_text(encoding="utf-8"))
    dims = CalendarDims(header["n_hours"], header["n_days_of_week"])
    S = header["n_stations"]

    def table(name):
        lines = (d / name).read_text(encoding="utf-8").strip().splitlines()
        return [line.split(",") for line in lines[1:]]

    delta = np.array([float(r[1]) for r in table("delta.csv")])
    shared = table("shared.csv")
    hod_shared = np.array([float(r[2]) for r in shared if r[0] == "hod"])
    dow_shared = np.array([float(r[2]) for r in shared if r[0] == "dow"])
    theta = np.array([float(r[1]) for r in table("theta.csv")])
    hod = np.array([[float(v) for v in r[1:]] for r in table("hod.csv")]).reshape(S, dims.hod_free)
    dow = np.array([[float(v) for v in r[1:]] for r in table("dow.csv")]).reshape(S, dims.dow_free)
    if len(theta) != S:
        raise ValueError("bundle theta length does not match its header")
    return ParamState(theta, hod, hod_shared, dow, dow_shared, delta, dims), header
