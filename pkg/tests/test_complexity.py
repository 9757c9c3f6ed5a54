import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusedpoisson.complexity import (FusionTolerance, count_multilayer_components, estimate_networks,
                                     fusion_classes, initial_label_matrix, layer_components, link_layers,
                                     model_complexity, multilayer_components_direct)
from fusedpoisson.data import CalendarDims
from fusedpoisson.graph import ProximityGraph
from fusedpoisson.model import ParamState, PhiView

from conftest import path_graph, random_graph

# Four stations on a path, three hour layers. Letters are estimate values.
#   h0: a a b b    h1: a a b c    h2: d a b c
# Components: {0,1 at h0-h1 and 1 at h2}, {2 at all hours, 3 at h0}, {3 at h1-h2}, {0 at h2}.
FIG3 = np.array([[0, 0, 1, 1], [0, 0, 1, 2], [3, 0, 1, 2]]).T


def test_illustrative_multilayer_example_has_four_components():
    g = path_graph(4)
    assert count_multilayer_components(g, FIG3) == 4
    assert count_multilayer_components(g, FIG3, method="eigen") == 4
    assert multilayer_components_direct(g, FIG3) == 4


def test_equal_estimates_on_path_form_one_component():
    labels, n = layer_components(path_graph(5), np.zeros(5, dtype=int))
    assert n == 1 and not labels.any()


def test_distinct_middle_station_splits_path():
    labels, n = layer_components(path_graph(3), np.array([0, 1, 0]))
    assert n == 3
    assert labels.tolist() == [0, 1, 2]


@given(st.integers(1, 40), st.floats(0.0, 0.3), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_eigen_method_matches_union_find(S, p, k, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(S, rng, p)
    cls = rng.integers(0, k, S)
    a = layer_components(g, cls)
    b = layer_components(g, cls, method="eigen")
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[0], b[0])


def test_unknown_method():
    with pytest.raises(ValueError):
        layer_components(path_graph(3), np.zeros(3, dtype=int), method="spectral")


def test_initial_labels_are_unique_across_layers():
    M = initial_label_matrix(path_graph(4), FIG3)
    assert M.shape == (3, 4)
    assert np.unique(M).size == 2 + 3 + 4


def test_link_without_equalities_changes_nothing():
    cls = np.arange(12).reshape(4, 3)
    M = initial_label_matrix(path_graph(4), cls)
    M2, changed = link_layers(M, cls, [0, 1, 2])
    assert not changed
    np.testing.assert_array_equal(M, M2)


def test_identical_layers_link_to_one_label():
    cls = np.zeros((5, 4), dtype=int)
    M = initial_label_matrix(path_graph(5), cls)
    changed = True
    while changed:
        M, changed = link_layers(M, cls, range(4))
    assert np.unique(M).size == 1


def test_wraparound_only_connection():
    # station 0 equals itself only between the last and first hour
    cls = np.array([[7, 1, 2, 7], [3, 4, 5, 6]])
    g = ProximityGraph.from_edges(2, [])
    assert count_multilayer_components(g, cls) == 7
    assert multilayer_components_direct(g, cls) == 7


def test_no_equalities_anywhere():
    S, H = 6, 5
    assert count_multilayer_components(path_graph(S), np.arange(S * H).reshape(S, H)) == S * H


@given(st.integers(1, 20), st.integers(2, 6), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_layer_linking_matches_explicit_graph(S, H, k, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(S, rng, rng.uniform(0, 0.5))
    cls = rng.integers(0, k, (S, H))
    assert count_multilayer_components(g, cls) == multilayer_components_direct(g, cls)


def test_relabelling_stations_does_not_change_count():
    rng = np.random.default_rng(3)
    g = random_graph(12, rng, 0.3)
    cls = rng.integers(0, 3, (12, 5))
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    g2 = ProximityGraph.from_edges(12, inv[g.undirected_edges])
    assert count_multilayer_components(g2, cls[perm]) == count_multilayer_components(g, cls)


def test_tolerance_classes():
    v = np.array([0.0, 5e-7, 2.0, 2.0 + 9e-7, 4.0])
    assert fusion_classes(v, 1e-6).tolist() == [0, 0, 1, 1, 2]
    assert fusion_classes(v, 0.0).tolist() == [0, 1, 2, 3, 4]
    rel = FusionTolerance(1e-3, "relative")
    assert rel.resolve(np.array([10.0])) == pytest.approx(1e-2)
    with pytest.raises(ValueError):
        FusionTolerance(-1.0)


@given(st.integers(2, 30), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_classes_match_pairwise_relation_when_separated(n, seed):
    rng = np.random.default_rng(seed)
    tol = 1e-3
    centers = np.arange(rng.integers(1, 6)) * 10 * tol
    v = rng.choice(centers, n) + rng.uniform(0, tol, n)
    cls = fusion_classes(v, tol)
    pair = np.abs(v[:, None] - v[None, :]) <= tol
    np.testing.assert_array_equal(cls[:, None] == cls[None, :], pair)


def _phi(hod, dow):
    return PhiView(np.asarray(hod, float), np.asarray(dow, float))


def test_mc_without_fusion():
    S, dims = 4, CalendarDims(5, 3)
    rng = np.random.default_rng(0)
    phi = _phi(rng.normal(size=(S, 5)), rng.normal(size=(S, 3)))
    rep = model_complexity(path_graph(S), phi, dims=dims)
    assert rep.numerator == dims.n_unpenalized + S * 5 + 2 * S
    assert rep.p == dims.n_params(S)
    assert rep.mc == pytest.approx(rep.numerator / rep.p)


def test_mc_with_complete_fusion():
    S, dims = 6, CalendarDims(5, 3)
    phi = _phi(np.tile(np.arange(5.0), (S, 1)), np.tile([0.0, 10.0, 20.0], (S, 1)))
    rep = model_complexity(path_graph(S), phi, dims=dims)
    assert rep.multilayer_components == 5
    assert rep.numerator == dims.n_unpenalized + 5 + 2
    assert rep.mc < 0.5


def test_mc_default_dims_constant():
    p = ParamState.zeros(3)
    p.theta[:] = [0.0, 1.0, 2.0]
    rep = model_complexity(path_graph(3), p)
    assert rep.n_unpenalized == 34
    assert rep.p == 34 + 3 + 2 * 29
    assert '"mc"' in rep.to_json()


def test_adding_an_equality_never_raises_the_count():
    rng = np.random.default_rng(5)
    for _ in range(30):
        g = random_graph(8, rng, 0.4)
        cls = rng.integers(0, 6, (8, 4))
        before = count_multilayer_components(g, cls)
        s, h = rng.integers(8), rng.integers(4)
        merged = cls.copy()
        merged[merged == merged[s, h]] = merged[rng.integers(8), rng.integers(4)]
        assert count_multilayer_components(g, merged) <= before


def test_estimate_networks_predicates():
    phi = _phi([[1.0, 2.0], [1.0, 3.0]], [[0.0, 4.0], [0.0, 4.0]])
    nets = estimate_networks(phi)
    assert nets.hod_edge(0, 0, 1, 0)
    assert not nets.hod_edge(0, 1, 1, 1)
    assert nets.dow_edge(0, 1, 1)
