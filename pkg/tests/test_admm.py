import json
import logging

import numpy as np
import pytest

from fusedpoisson.admm import AdmmOptions, AdmmState, init_state, layout_to_params, params_to_layout, solve
from fusedpoisson.graph import ProximityGraph
from fusedpoisson.model import fit_unpenalized
from fusedpoisson.penalty import PenaltyConfig, eval_p_H, eval_p_N, objective
from fusedpoisson.projection import build_plan

from oracle import reference_fit


def test_matches_reference_solver(small_problem):
    panel, graph, _ = small_problem
    cfg = PenaltyConfig(0.5, 1.0, 0.5)
    est, rep, _ = solve(panel, graph, cfg)
    _, ref_val = reference_fit(panel, graph, cfg)
    assert rep.converged
    assert abs(rep.objective - ref_val) <= 1e-4 * abs(ref_val)


@pytest.mark.parametrize("opts", [AdmmOptions(inner="cd"), AdmmOptions(projection_method="sparse"),
                                  AdmmOptions(adapt_rho=False), AdmmOptions(irls_passes=3)])
def test_solver_variants_agree(small_problem, opts):
    panel, graph, _ = small_problem
    cfg = PenaltyConfig(0.3, 0.5, 0.2)
    base = solve(panel, graph, cfg)[1].objective
    other = solve(panel, graph, cfg, opts=opts)[1]
    assert other.converged
    assert other.objective == pytest.approx(base, rel=1e-5)


def test_zero_penalties_skip_fusion_blocks(small_problem):
    panel, graph, _ = small_problem
    est, rep, state = solve(panel, graph, PenaltyConfig())
    assert state.rho_gamma == 0 and state.rho_psi == 0
    ref = fit_unpenalized(panel)
    assert rep.objective == pytest.approx(objective(ref, panel, graph, PenaltyConfig()), rel=1e-8)


def test_estimate_is_feasible(small_problem):
    panel, graph, _ = small_problem
    est, _, state = solve(panel, graph, PenaltyConfig(0.2, 0.5, 0.5))
    assert not est.hod_int[0].any() and not est.dow_int[0].any()
    plan = build_plan(graph, panel.dims)
    np.testing.assert_allclose(plan.d_theta @ state.z, state.s_gamma, atol=1e-10)


def test_warm_start_reuses_state(small_problem):
    panel, graph, _ = small_problem
    cold = solve(panel, graph, PenaltyConfig(0.5, 1.0, 0.5))
    warm = solve(panel, graph, PenaltyConfig(0.5, 1.2, 0.5), warm_start=cold[2])
    fresh = solve(panel, graph, PenaltyConfig(0.5, 1.2, 0.5))
    assert warm[1].iterations < fresh[1].iterations
    assert warm[1].objective == pytest.approx(fresh[1].objective, rel=1e-5)
    # the source state is left untouched
    assert cold[2].iteration == cold[1].iterations


def test_warm_start_switches_blocks_on_and_off(small_problem):
    panel, graph, _ = small_problem
    _, _, st = solve(panel, graph, PenaltyConfig(0.5))
    _, rep, st2 = solve(panel, graph, PenaltyConfig(0.5, 1.0, 1.0), warm_start=st)
    assert st2.rho_gamma > 0 and st2.rho_psi > 0 and rep.converged
    _, rep3, st3 = solve(panel, graph, PenaltyConfig(0.5), warm_start=st2)
    assert st3.rho_gamma == 0 and rep3.converged


def test_progress_records(small_problem, caplog):
    panel, graph, _ = small_problem
    seen = []
    with caplog.at_level(logging.DEBUG, logger="fusedpoisson.admm"):
        _, rep, state = solve(panel, graph, PenaltyConfig(0.1, 0.1, 0.1), callback=seen.append)
    assert len(seen) == rep.iterations == len(state.history)
    lines = [json.loads(r.message) for r in caplog.records if r.message.startswith("{")]
    assert len(lines) == rep.iterations
    assert {"iter", "r_primal", "r_dual", "eps_primal", "eps_dual", "rho"} <= set(lines[0])


def test_unconverged_is_reported(small_problem, caplog):
    panel, graph, _ = small_problem
    with caplog.at_level(logging.WARNING):
        _, rep, _ = solve(panel, graph, PenaltyConfig(1, 10, 1), opts=AdmmOptions(max_iter=3))
    assert not rep.converged and rep.iterations == 3
    assert "without meeting tolerances" in caplog.text


def test_input_checks(small_problem):
    panel, _, _ = small_problem
    with pytest.raises(ValueError):
        solve(panel, ProximityGraph.from_edges(3, []), PenaltyConfig())
    with pytest.raises(ValueError):
        AdmmOptions(inner="newton")
    with pytest.raises(ValueError):
        AdmmOptions(max_iter=0)


def test_layout_round_trip(small_problem):
    _, _, truth = small_problem
    back = layout_to_params(params_to_layout(truth), truth.delta, truth.n_stations, truth.dims)
    np.testing.assert_array_equal(back.to_free(), truth.to_free())


def test_init_state(small_problem):
    panel, graph, _ = small_problem
    plan = build_plan(graph, panel.dims)
    st = init_state(panel, plan, PenaltyConfig(lam_net=1.0), AdmmOptions())
    assert isinstance(st, AdmmState)
    assert st.rho_gamma == 1.0 and st.rho_psi == 0.0
    np.testing.assert_allclose(st.s_gamma, plan.d_theta @ st.z)


def test_heavy_penalties_fuse(small_problem):
    panel, graph, _ = small_problem
    est, rep, _ = solve(panel, graph, PenaltyConfig(0, 1e4, 1e4))
    assert rep.converged
    assert eval_p_N(est, graph) < 1e-3 and eval_p_H(est) < 1e-3
