"""Model complexity: counting fused coefficient groups through intersection networks.

Two estimates are "fused" when they fall in the same tolerance class. The
hourly effects live on a multilayer graph (stations x hours, with each station
linked to itself at the neighbouring hours, cyclically); the daily effects are
counted one single-layer graph per day.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.cluster.hierarchy import DisjointSet

from .data import CalendarDims
from .graph import ProximityGraph, component_labels
from .model import ParamState, PhiView

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionTolerance:
    eps_fuse: float = 1e-6
    mode: str = "absolute"

    def __post_init__(self):
        if not self.eps_fuse >= 0:
            raise ValueError("eps_fuse must be non-negative")
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown tolerance mode {self.mode!r}")

    def resolve(self, values: np.ndarray) -> float:
        if self.mode == "relative":
            return self.eps_fuse * max(1.0, float(np.max(np.abs(values), initial=0.0)))
        return self.eps_fuse


def fusion_classes(values, tol: float) -> np.ndarray:
    """Integer class per value: sort, then cut wherever consecutive values differ by more than tol.

    Classes are transitive by construction. When classes are separated by
    more than 2*tol and each spans at most tol, they coincide with the
    pairwise |a - b| <= tol relation.
    """
    v = np.asarray(values, dtype=float)
    flat = v.ravel()
    if flat.size == 0:
        return np.zeros(v.shape, dtype=np.int64)
    order = np.argsort(flat, kind="stable")
    cut = np.diff(flat[order]) > tol
    cls = np.empty(flat.size, dtype=np.int64)
    cls[order] = np.concatenate([[0], np.cumsum(cut)])
    return cls.reshape(v.shape)


@dataclass(frozen=True)
class EstimateNetworks:
    """Equality classes of the estimates; edges are pairs sharing a class.

    ``hod_class`` is (S, |H|), built jointly over all station-hour values so
    that cross-layer comparisons are consistent; ``dow_class`` is (S, |D|).
    """

    hod_class: np.ndarray
    dow_class: np.ndarray

    def hod_edge(self, s, h, s2, h2) -> bool:
        return bool(self.hod_class[s, h] == self.hod_class[s2, h2])

    def dow_edge(self, s, s2, d) -> bool:
        return bool(self.dow_class[s, d] == self.dow_class[s2, d])


def estimate_networks(phi: PhiView, tol: FusionTolerance = FusionTolerance()) -> EstimateNetworks:
    hod, dow = np.asarray(phi.phi_hod), np.asarray(phi.phi_dow)
    return EstimateNetworks(fusion_classes(hod, tol.resolve(hod)), fusion_classes(dow, tol.resolve(dow)))


def _intersected_edges(graph: ProximityGraph, cls: np.ndarray) -> np.ndarray:
    e = graph.undirected_edges
    if len(e) == 0:
        return e.reshape(0, 2)
    return e[cls[e[:, 0]] == cls[e[:, 1]]]


def _eigen_labels(n: int, edges: np.ndarray, rel_tol: float = 1e-9):
    """Component labels from the Laplacian null space; None when the result is not trustworthy."""
    L = np.zeros((n, n))
    if len(edges):
        np.add.at(L, (edges[:, 0], edges[:, 1]), -1.0)
        np.add.at(L, (edges[:, 1], edges[:, 0]), -1.0)
        L[np.diag_indices(n)] = -L.sum(axis=1)
    vals, vecs = scipy.linalg.eigh(L)
    scale = max(float(vals.max(initial=0.0)), 1.0)
    zero = vals < rel_tol * scale
    n_zero = int(zero.sum())
    # a second eigenvalue group near the cut makes the count ambiguous
    if np.any((vals >= rel_tol * scale) & (vals < 1e3 * rel_tol * scale)):
        return None
    V = vecs[:, zero]
    # rows of V agree within a component and are orthogonal across components,
    # at distance at least sqrt(2/n); cluster rows by each station in turn
    thresh = 0.25 * np.sqrt(2.0 / n)
    labels = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for s in range(n):
        if labels[s] >= 0:
            continue
        cluster = np.ones(n, dtype=bool)
        for i in range(n_zero):
            cluster &= np.abs(V[:, i] - V[s, i]) <= thresh / np.sqrt(n_zero)
        cluster &= labels < 0
        labels[cluster] = nxt
        nxt += 1
    if nxt != n_zero or (len(edges) and np.any(labels[edges[:, 0]] != labels[edges[:, 1]])):
        return None
    return labels


def layer_components(graph: ProximityGraph, classes: np.ndarray, *, method: str = "union_find",
                     rel_tol: float = 1e-9) -> tuple[np.ndarray, int]:
    """Components of the proximity graph restricted to edges whose endpoints share a class.

    ``classes`` holds one equality-class id per station for the layer. Returns
    labels numbered 0.. by first appearance, and the component count.
    """
    S = graph.n_stations
    edges = _intersected_edges(graph, np.asarray(classes))
    if method == "eigen":
        labels = _eigen_labels(S, edges, rel_tol)
        if labels is not None:
            return _first_appearance(labels), int(labels.max(initial=-1) + 1)
        warnings.warn("Laplacian null space is ambiguous at this threshold; using union-find",
                      RuntimeWarning, stacklevel=2)
    elif method != "union_find":
        raise ValueError(f"unknown component method {method!r}")
    labels = component_labels(S, edges)
    return labels, int(labels.max(initial=-1) + 1)


def _first_appearance(labels: np.ndarray) -> np.ndarray:
    lookup: dict[int, int] = {}
    return np.array([lookup.setdefault(int(x), len(lookup)) for x in labels], dtype=np.int64)


def initial_label_matrix(graph: ProximityGraph, hod_class: np.ndarray, *,
                         method: str = "union_find") -> np.ndarray:
    """M0: one row per hour layer, labels unique across the whole matrix (starting at 1)."""
    S, H = hod_class.shape
    M = np.zeros((H, S), dtype=np.int64)
    offset = 1
    for h in range(H):
        labels, n_h = layer_components(graph, hod_class[:, h], method=method)
        M[h] = labels + offset
        offset += n_h
    return M


def link_layers(M: np.ndarray, hod_class: np.ndarray, order) -> tuple[np.ndarray, bool]:
    """One linking pass over consecutive layers of ``order``.

    For each component in layer order[i], scan its stations until one has an
    equal estimate at layer order[i+1] inside a differently labelled
    component; both components then take the smaller label. Components are
    identified by label within a row.
    """
    M = np.array(M, dtype=np.int64, copy=True)
    changed = False
    order = list(order)
    for a, b in zip(order[:-1], order[1:]):
        for lab in np.unique(M[a]):
            ind = np.flatnonzero(M[a] == lab)
            for s in ind:
                if hod_class[s, a] != hod_class[s, b]:
                    continue
                other = np.flatnonzero(M[b] == M[b, s])
                m1, m2 = int(M[a, ind].min()), int(M[b, other].min())
                if m1 == m2:
                    continue
                m = min(m1, m2)
                M[a, ind] = m
                M[b, other] = m
                changed = True
                break
    return M, changed


def count_multilayer_components(graph: ProximityGraph, hod_class: np.ndarray, *,
                                method: str = "union_find", max_passes: int | None = None) -> int:
    """Components of the multilayer proximity graph intersected with the hourly estimate network."""
    S, H = hod_class.shape
    M = initial_label_matrix(graph, hod_class, method=method)
    forward = list(range(H))
    wrap = [H - 1] + list(range(H - 1))
    limit = max_passes if max_passes is not None else S * H + 1
    for _ in range(limit):
        M, c1 = link_layers(M, hod_class, forward)
        M, c2 = link_layers(M, hod_class, wrap)
        if not (c1 or c2):
            return int(np.unique(M).size)
    raise RuntimeError("layer linking did not reach a fixed point")


def multilayer_components_direct(graph: ProximityGraph, hod_class: np.ndarray) -> int:
    """Union-find on the explicit node-layer graph (node index h*S + s)."""
    S, H = hod_class.shape
    ds = DisjointSet(range(S * H))
    e = graph.undirected_edges
    for h in range(H):
        for a, b in e:
            if hod_class[a, h] == hod_class[b, h]:
                ds.merge(h * S + int(a), h * S + int(b))
        nxt = (h + 1) % H
        if nxt != h:
            for s in np.flatnonzero(hod_class[:, h] == hod_class[:, nxt]):
                ds.merge(h * S + int(s), nxt * S + int(s))
    return ds.n_subsets


@dataclass(frozen=True)
class ComplexityReport:
    n_unpenalized: int
    multilayer_components: int
    day_components: dict
    numerator: int
    p: int
    mc: float

    def as_dict(self) -> dict:
        return {"n_unpenalized": self.n_unpenalized, "multilayer_components": self.multilayer_components,
                "day_components": self.day_components, "numerator": self.numerator,
                "p": self.p, "mc": self.mc}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def model_complexity(graph: ProximityGraph, estimates: PhiView | ParamState,
                     tol: FusionTolerance = FusionTolerance(), *, method: str = "union_find",
                     dims: CalendarDims | None = None) -> ComplexityReport:
    """MC: unfused groups (unpenalized count, hourly multilayer components, non-baseline day
    components) over the number of free parameters. The raw ratio is reported, never clamped."""
    if isinstance(estimates, ParamState):
        dims = estimates.dims
        estimates = estimates.phi()
    S, H = estimates.phi_hod.shape
    D = estimates.phi_dow.shape[1]
    if graph.n_stations != S:
        raise ValueError("graph and estimates disagree on the number of stations")
    dims = dims or CalendarDims(H, D)
    nets = estimate_networks(estimates, tol)
    multi = count_multilayer_components(graph, nets.hod_class, method=method)
    days = {}
    for d in range(1, D):
        _, n_d = layer_components(graph, nets.dow_class[:, d], method=method)
        days[str(d)] = n_d
    num = dims.n_unpenalized + multi + sum(days.values())
    p = dims.n_params(S)
    return ComplexityReport(dims.n_unpenalized, multi, days, num, p, num / p)


def intersection_edges(graph: ProximityGraph, nets: EstimateNetworks) -> dict:
    """Edge lists of every intersection network, keyed by layer name."""
    out = {}
    for h in range(nets.hod_class.shape[1]):
        out[f"hod_{h}"] = _intersected_edges(graph, nets.hod_class[:, h])
    for d in range(nets.dow_class.shape[1]):
        out[f"dow_{d}"] = _intersected_edges(graph, nets.dow_class[:, d])
    return out
