import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusedpoisson.data import CalendarDims
from fusedpoisson.graph import ProximityGraph
from fusedpoisson.model import ParamState, neg_loglik
from fusedpoisson.penalty import (PenaltyConfig, eval_p_H, eval_p_N, eval_p_N_phi, gamma_blocks,
                                  group_soft_threshold, objective, psi_blocks, scalar_soft_threshold,
                                  station_norms, update_gamma, update_psi)

from conftest import random_graph, random_truth


def test_two_station_network_penalty():
    g = ProximityGraph.from_edges(2, [(0, 1)])
    p = ParamState.zeros(2)
    p.theta[1] = 1.0
    # every one of the 24 hourly and 7 daily effects differs by one, seen from both stations
    assert eval_p_N(p, g) == pytest.approx(2 * np.sqrt(31))
    assert eval_p_N_phi(p, g) == pytest.approx(2 * np.sqrt(31))


@given(st.integers(2, 6), st.integers(2, 5), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_network_penalty_forms_agree(S, H, D, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(S, rng)
    p = random_truth(S, CalendarDims(H, D), rng, sparsity=0.7)
    assert eval_p_N(p, g) == pytest.approx(eval_p_N_phi(p, g), rel=1e-12, abs=1e-12)


def test_hourly_penalty_wraps_around():
    p = ParamState.zeros(1, CalendarDims(4, 1))
    p.hod_shared[:] = [1.0, 0.0, 0.0]      # phi = (0, 1, 0, 0)
    np.testing.assert_allclose(psi_blocks(p), [[1.0, -1.0, 0.0, 0.0]])
    assert eval_p_H(p) == 2.0


def test_constant_shift_is_not_penalized():
    rng = np.random.default_rng(0)
    g = random_graph(5, rng)
    p = random_truth(5, CalendarDims(4, 3), rng)
    q = p.copy()
    q.theta += 3.0
    assert eval_p_N(q, g) == pytest.approx(eval_p_N(p, g))
    assert eval_p_H(q) == pytest.approx(eval_p_H(p))


def test_objective_adds_terms(small_problem):
    panel, graph, truth = small_problem
    cfg = PenaltyConfig(0.5, 2.0, 0.25)
    expect = (neg_loglik(truth, panel) + 0.5 * (np.abs(truth.hod_int).sum() + np.abs(truth.dow_int).sum())
              + 2.0 * eval_p_N(truth, graph) + 0.25 * eval_p_H(truth))
    assert objective(truth, panel, graph, cfg) == pytest.approx(expect)


def test_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(lam=-1)
    with pytest.raises(ValueError):
        PenaltyConfig(rho=0)


def test_soft_thresholds():
    np.testing.assert_allclose(scalar_soft_threshold([-3, -0.5, 0.5, 2], 1.0), [-2, 0, 0, 1])
    np.testing.assert_allclose(group_soft_threshold([3.0, 4.0], 2.5), [1.5, 2.0])
    assert not group_soft_threshold([3.0, 4.0], 5.0).any()
    assert not group_soft_threshold([0.0, 0.0], 0.0).any()


def test_gamma_update_is_the_proximal_map():
    rng = np.random.default_rng(1)
    g = random_graph(6, rng, p=0.6)
    rows = 4
    s = rng.normal(size=(rows, g.n_pairs))
    t = rng.normal(scale=0.3, size=(rows, g.n_pairs))
    cfg = PenaltyConfig(lam_net=0.7, rho=1.3)
    got = update_gamma(s, t, cfg, g)

    x = cp.Variable((rows, g.n_pairs))
    pen = 0
    for k in range(6):
        cols = np.flatnonzero(g.pairs[:, 0] == k)
        if cols.size:
            pen += np.sqrt(cols.size) * cp.norm(cp.vec(x[:, cols], order="F"), 2)
    cp.Problem(cp.Minimize(cfg.lam_net * pen + cfg.rho / 2 * cp.sum_squares(x - (s - t)))).solve(
        solver=cp.CLARABEL)
    np.testing.assert_allclose(got, x.value, atol=1e-6)


def test_gamma_update_zeroes_weak_groups():
    g = ProximityGraph.from_edges(3, [(0, 1), (1, 2)])
    s = np.full((2, g.n_pairs), 0.01)
    out = update_gamma(s, np.zeros_like(s), PenaltyConfig(lam_net=1.0), g)
    assert not out.any()
    assert station_norms(out, g).shape == (3,)


def test_psi_update():
    out = update_psi(np.array([2.0, -0.1]), np.array([0.5, 0.0]), PenaltyConfig(lam_hour=1.0, rho=2.0))
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_gamma_blocks_shape():
    g = ProximityGraph.from_edges(3, [(0, 1)])
    p = ParamState.zeros(3, CalendarDims(5, 3))
    assert gamma_blocks(p, g).shape == (1 + 4 + 2, 2)
