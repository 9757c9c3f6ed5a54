import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusedpoisson.data import CalendarDims
from fusedpoisson.graph import PrimalLayout, ProximityGraph
from fusedpoisson.projection import build_plan, dense_projection, hour_chain_matrix, project

from conftest import random_graph


def _instance(S, H, D, seed, p=0.4):
    rng = np.random.default_rng(seed)
    g = random_graph(S, rng, p)
    dims = CalendarDims(H, D)
    plan = build_plan(g, dims)
    x = rng.normal(size=PrimalLayout(S, dims).size)
    gam = rng.normal(size=plan.d_theta.shape[0])
    psi = rng.normal(size=plan.d_hod.shape[0])
    return plan, x, gam, psi


@given(st.integers(1, 9), st.integers(2, 6), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_structured_matches_dense(S, H, D, seed):
    plan, x, gam, psi = _instance(S, H, D, seed)
    z, sg, sp_ = project(plan, x, gam, psi)
    zd, _, _ = dense_projection(plan, x, gam, psi)
    assert np.linalg.norm(z - zd) <= 1e-9 * max(1.0, np.linalg.norm(zd))
    np.testing.assert_allclose(sg, plan.d_theta @ z, atol=1e-12)
    np.testing.assert_allclose(sp_, plan.d_hod @ z, atol=1e-12)


def test_sparse_path_matches():
    plan, x, gam, psi = _instance(8, 5, 3, 1)
    a = project(plan, x, gam, psi, method="structured")[0]
    b = project(plan, x, gam, psi, method="sparse")[0]
    np.testing.assert_allclose(a, b, atol=1e-10)
    with pytest.raises(ValueError):
        project(plan, x, gam, psi, method="lu")


def test_factor_reconstructs_rotated_matrix():
    plan, *_ = _instance(6, 4, 3, 2, p=0.6)
    L = plan.dense_factor()
    W = plan.rotation().toarray()
    Pbar = plan.reduced_matrix.toarray()
    # L is stored in block-major order, the same order W uses for its columns
    np.testing.assert_allclose(L @ L.T, W.T @ Pbar @ W, atol=1e-10)


@pytest.mark.parametrize("a,b", [(0.0, 0.0), (0.3, 2.5), (7.0, 0.0), (0.0, 11.0)])
def test_reweighted_plan(a, b):
    plan, x, gam, psi = _instance(7, 4, 3, 3)
    w = plan.reweighted(a, b)
    assert (w.w_gamma, w.w_psi) == (a, b)
    z = project(w, x, gam, psi)[0]
    np.testing.assert_allclose(z, dense_projection(w, x, gam, psi)[0], atol=1e-10)
    assert plan.reweighted(1.0, 1.0) is plan
    with pytest.raises(ValueError):
        plan.reweighted(-1.0, 1.0)


def test_zero_weights_are_identity():
    plan, x, gam, psi = _instance(5, 3, 2, 4)
    np.testing.assert_allclose(project(plan.reweighted(0, 0), x, gam, psi)[0], x, atol=1e-14)


def test_feasible_input_is_fixed_point():
    plan, x, _, _ = _instance(6, 4, 2, 5)
    z, sg, sp_ = project(plan, x, plan.d_theta @ x, plan.d_hod @ x)
    np.testing.assert_allclose(z, x, atol=1e-10)


def test_edgeless_graph():
    g = ProximityGraph.from_edges(3, [])
    dims = CalendarDims(3, 2)
    plan = build_plan(g, dims)
    rng = np.random.default_rng(0)
    x = rng.normal(size=PrimalLayout(3, dims).size)
    psi = rng.normal(size=plan.d_hod.shape[0])
    z = project(plan, x, np.zeros(0), psi)[0]
    np.testing.assert_allclose(z, dense_projection(plan, x, np.zeros(0), psi)[0], atol=1e-12)


def test_shape_mismatch():
    plan, x, gam, psi = _instance(4, 3, 2, 6)
    with pytest.raises(ValueError):
        project(plan, x[:-1], gam, psi)


def test_hour_chain():
    np.testing.assert_array_equal(hour_chain_matrix(3), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
