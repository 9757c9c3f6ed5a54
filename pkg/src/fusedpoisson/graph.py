"""Station proximity networks, their difference operators and Laplacian spectra."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.cluster.hierarchy import DisjointSet

from .data import CalendarDims, StationRegistry

EARTH_RADIUS_M = 6_371_000.0


class GraphError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def haversine_matrix(lat, lon) -> np.ndarray:
    """Pairwise great-circle distances in meters."""
    phi = np.radians(np.asarray(lat, dtype=float))
    lam = np.radians(np.asarray(lon, dtype=float))
    dphi = phi[:, None] - phi[None, :]
    dlam = lam[:, None] - lam[None, :]
    a = np.sin(dphi / 2) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class ProximityGraph:
    """Symmetric neighbour structure on stations.

    ``pairs`` lists every directed pair (s, s') with s' a neighbour of s,
    sorted by s then s'; row m of the incidence operator belongs to pairs[m].
    Each undirected edge therefore appears twice.
    """

    n_stations: int
    radius_m: float
    pairs: np.ndarray

    def __post_init__(self):
        pairs = self.pairs
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise GraphError("pairs must be an (M, 2) array")
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise GraphError("self loops are not allowed")
        fwd = {(int(a), int(b)) for a, b in pairs}
        if len(fwd) != len(pairs) or any((b, a) not in fwd for a, b in fwd):
            raise GraphError("neighbour relation must be symmetric without duplicates")

    @classmethod
    def from_edges(cls, n_stations: int, edges, radius_m: float = float("nan")) -> "ProximityGraph":
        """Build from undirected edges given as (s, s') index pairs."""
        edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        both = np.vstack([edges, edges[:, ::-1]])
        both = np.unique(both, axis=0)
        order = np.lexsort((both[:, 1], both[:, 0]))
        return cls(n_stations, radius_m, both[order])

    @property
    def n_pairs(self) -> int:
        """M, the number of directed neighbour pairs."""
        return len(self.pairs)

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 0], minlength=self.n_stations)

    @cached_property
    def neighbor_sets(self) -> tuple[np.ndarray, ...]:
        starts = np.concatenate([[0], np.cumsum(self.degree)])
        return tuple(self.pairs[starts[s]:starts[s + 1], 1] for s in range(self.n_stations))

    @cached_property
    def row_index(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): m for m, (a, b) in enumerate(self.pairs)}

    @cached_property
    def undirected_edges(self) -> np.ndarray:
        return self.pairs[self.pairs[:, 0] < self.pairs[:, 1]]

    def n_components(self) -> int:
        return count_components(self.n_stations, self.undirected_edges)


def build_proximity(registry: StationRegistry, radius_m: float) -> ProximityGraph:
    """Stations closer than ``radius_m`` (strictly, as the crow flies) are neighbours."""
    if len(registry) == 0:
        raise GraphError("empty station registry")
    if not radius_m > 0:
        raise GraphError("radius must be positive")
    dist = haversine_matrix(registry.latitude, registry.longitude)
    adj = dist < radius_m
    np.fill_diagonal(adj, False)
    src, dst = np.nonzero(adj)
    return ProximityGraph(len(registry), float(radius_m), np.column_stack([src, dst]))


def incidence_matrix(graph: ProximityGraph) -> sp.csr_matrix:
    """D_net: row for pair (s, s') is e_s - e_{s'}."""
    M, S = graph.n_pairs, graph.n_stations
    rows = np.repeat(np.arange(M), 2)
    cols = graph.pairs.ravel()
    vals = np.tile([1.0, -1.0], M)
    return sp.csr_matrix((vals, (rows, cols)), shape=(M, S))


def laplacian(graph: ProximityGraph) -> sp.csr_matrix:
    """Standard graph Laplacian, equal to half of D_net' D_net."""
    D = incidence_matrix(graph)
    return (0.5 * (D.T @ D)).tocsr()


def count_components(n: int, edges) -> int:
    ds = DisjointSet(range(n))
    for a, b in edges:
        ds.merge(int(a), int(b))
    return ds.n_subsets


def component_labels(n: int, edges) -> np.ndarray:
    """Label per node, numbered by first appearance."""
    ds = DisjointSet(range(n))
    for a, b in edges:
        ds.merge(int(a), int(b))
    roots = [ds[k] for k in range(n)]
    lookup: dict[int, int] = {}
    return np.array([lookup.setdefault(r, len(lookup)) for r in roots], dtype=np.int64)


@dataclass(frozen=True)
class NetLaplacian:
    """Eigen-decomposition of half the graph Laplacian.

    ``eigenvalues`` are sorted in non-increasing order with ``eigenvectors`` as
    matching columns; ``e_r`` is E' 1, the projection of the all-ones vector.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    e_r: np.ndarray

    def n_zero(self, rel_tol: float = 1e-9) -> int:
        scale = max(float(self.eigenvalues.max(initial=0.0)), 1.0)
        return int(np.sum(self.eigenvalues < rel_tol * scale))


def laplacian_eig(graph: ProximityGraph) -> NetLaplacian:
    L_tilde = 0.5 * laplacian(graph).toarray()
    try:
        vals, vecs = scipy.linalg.eigh(L_tilde)
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(L_tilde + np.eye(graph.n_stations))
        raise NumericalError(f"Laplacian eigendecomposition failed (cond(I+L)={cond:.3g})") from exc
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = np.ascontiguousarray(vecs[:, ::-1])
    return NetLaplacian(L_tilde, vals, vecs, vecs.sum(axis=0))


@dataclass(frozen=True)
class MultilayerGraph:
    """Station graph replicated over hour layers, each station chained to itself cyclically."""

    base: ProximityGraph
    n_layers: int

    def node(self, station, layer):
        return layer * self.base.n_stations + station

    @property
    def n_nodes(self) -> int:
        return self.base.n_stations * self.n_layers

    @cached_property
    def intra_edges(self) -> np.ndarray:
        """((s, h), (s', h)) as node-index pairs, one row per undirected edge and layer."""
        e = self.base.undirected_edges
        S = self.base.n_stations
        return np.vstack([e + h * S for h in range(self.n_layers)]) if len(e) else np.empty((0, 2), int)

    @cached_property
    def inter_edges(self) -> np.ndarray:
        S, H = self.base.n_stations, self.n_layers
        s = np.tile(np.arange(S), H)
        h = np.repeat(np.arange(H), S)
        return np.column_stack([self.node(s, h), self.node(s, (h + 1) % H)])


@dataclass(frozen=True)
class PrimalLayout:
    """Index layout of the consensus vector (Theta, Theta_H, Theta_D) used by the projection.

    Order: station-day interactions (day-major), station intercepts, station-hour
    interactions (hour-major), shared hour effects, shared day effects.
    Baseline entries are excluded; station 0's interaction slots are present
    (they are pinned to zero by the likelihood step, not by the layout).
    """

    n_stations: int
    dims: CalendarDims

    @property
    def q(self) -> int:
        """Per-station block count: day interactions, intercept, hour interactions."""
        return self.dims.dow_free + 1 + self.dims.hod_free

    @property
    def dow_int(self) -> slice:
        return slice(0, self.dims.dow_free * self.n_stations)

    @property
    def theta(self) -> slice:
        start = self.dims.dow_free * self.n_stations
        return slice(start, start + self.n_stations)

    @property
    def hod_int(self) -> slice:
        start = (self.dims.dow_free + 1) * self.n_stations
        return slice(start, start + self.dims.hod_free * self.n_stations)

    @property
    def hod_shared(self) -> slice:
        start = self.q * self.n_stations
        return slice(start, start + self.dims.hod_free)

    @property
    def dow_shared(self) -> slice:
        start = self.q * self.n_stations + self.dims.hod_free
        return slice(start, start + self.dims.dow_free)

    @property
    def size(self) -> int:
        return self.q * self.n_stations + self.dims.hod_free + self.dims.dow_free

    @property
    def n_projected(self) -> int:
        """Length of the block the projection actually solves for (shared day effects excluded)."""
        return self.q * self.n_stations + self.dims.hod_free


def constraint_operators(graph: ProximityGraph, dims: CalendarDims) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse maps from the consensus vector to the Gamma and Psi blocks.

    Gamma rows: sqrt(2) D_net theta, then for each non-baseline hour
    D_net(theta + hour interactions), then for each non-baseline day
    D_net(theta + day interactions).
    Psi rows (hour-major): phi[s, h+1] - phi[s, h] cyclically, with the
    baseline-hour term phi[s, 0] - theta_s = 0.
    """
    S, H1, D1 = graph.n_stations, dims.hod_free, dims.dow_free
    lay = PrimalLayout(S, dims)
    Dn = incidence_matrix(graph)
    M = graph.n_pairs
    Z = sp.csr_matrix((M, S))

    def col_blocks(theta_coef, hod_h=None, dow_d=None):
        blocks = [Dn if d == dow_d else Z for d in range(D1)]
        blocks.append(theta_coef)
        blocks += [Dn if h == hod_h else Z for h in range(H1)]
        blocks.append(sp.csr_matrix((M, H1 + D1)))
        return sp.hstack(blocks)

    rows = [col_blocks(np.sqrt(2.0) * Dn)]
    rows += [col_blocks(Dn, hod_h=h) for h in range(H1)]
    rows += [col_blocks(Dn, dow_d=d) for d in range(D1)]
    D_theta = sp.vstack(rows).tocsr()

    # a[s, h] = shared_h + int[s, h] for h >= 1; a[s, 0] = 0.
    H = dims.n_hours
    r, c, v = [], [], []
    for h in range(H):
        for s in range(S):
            row = h * S + s
            for hh, sign in (((h + 1) % H, 1.0), (h, -1.0)):
                if hh == 0:
                    continue
                r += [row, row]
                c += [lay.hod_int.start + (hh - 1) * S + s, lay.hod_shared.start + hh - 1]
                v += [sign, sign]
    D_hod = sp.csr_matrix((v, (r, c)), shape=(H * S, lay.size))
    D_hod.sum_duplicates()
    return D_theta, D_hod


def export_edge_list(path, edges, station_ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source,target\n")
        for a, b in edges:
            fh.write(f"{station_ids[a]},{station_ids[b]}\n")


def export_graphml(path, graph: ProximityGraph, registry: StationRegistry) -> None:
    import networkx as nx

    g = nx.Graph()
    for k, sid in enumerate(registry.station_ids):
        g.add_node(sid, latitude=float(registry.latitude[k]), longitude=float(registry.longitude[k]),
                   capacity=int(registry.capacity[k]))
    g.add_edges_from((registry.station_ids[a], registry.station_ids[b]) for a, b in graph.undirected_edges)
    nx.write_graphml(g, path)
