import cvxpy as cp
import numpy as np
import pytest

from fusedpoisson.data import CalendarDims, synth_panel
from fusedpoisson.model import ParamState
from fusedpoisson.step1 import Step1Workspace, SparseQuadratic, cd_sweeps, quadratic_lasso, working_set


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(1)
    dims = CalendarDims(5, 3)
    truth = ParamState.zeros(6, dims)
    truth.theta[:] = rng.normal(1, 0.3, 6)
    truth.hod_int[1:] = rng.normal(0, 0.3, (5, 4))
    panel = synth_panel(truth, 9, seed=3, dims=dims)
    ws = Step1Workspace(panel)
    w = rng.random(panel.n) + 0.5
    return ws, w, truth, rng


def test_hessian_matches_reference(setup):
    ws, w, _, _ = setup
    H, R = ws.hessian(w, 0.7), ws.reference_quadratic(w, 0.7)
    free = ~ws.fixed
    np.testing.assert_allclose(H.toarray()[np.ix_(free, free)], R.Q.toarray()[np.ix_(free, free)], atol=1e-9)


def test_linear_term_and_matvec(setup):
    ws, w, _, rng = setup
    free = ~ws.fixed
    v = rng.normal(size=len(w))
    np.testing.assert_allclose(ws.linear_term(v)[free], (ws.struct_design().T @ v)[free], atol=1e-10)
    H, R = ws.hessian(w, 0.7), ws.reference_quadratic(w, 0.7)
    b = rng.normal(size=ws.size) * free
    np.testing.assert_allclose(H.matvec(b)[free], R.matvec(b)[free], atol=1e-9)


def test_structured_solve(setup):
    ws, w, _, rng = setup
    H, R = ws.hessian(w, 0.7), ws.reference_quadratic(w, 0.7)
    rhs = rng.normal(size=ws.size)
    sub = ~ws.fixed & (rng.random(ws.size) < 0.7)
    np.testing.assert_allclose(H.solve(sub, rhs), R.solve(sub, rhs), atol=1e-10)


def test_struct_round_trip(setup):
    ws, _, truth, rng = setup
    p = truth.copy()
    p.delta[:] = rng.normal(size=5) * 0.1
    b = ws.to_struct(p)
    np.testing.assert_array_equal(ws.to_struct(ws.from_struct(b)), b)


@pytest.mark.parametrize("lam", [0.0, 1.0, 5.0])
def test_active_set_structured_vs_sparse(setup, lam):
    ws, w, _, rng = setup
    H, R = ws.hessian(w, 0.7), ws.reference_quadratic(w, 0.7)
    g = np.random.default_rng(11).normal(size=ws.size) * 10
    b1, ok1 = quadratic_lasso(H, g, lam, ws.lasso, np.zeros(ws.size), ws.fixed)
    b2, ok2 = quadratic_lasso(R, g, lam, ws.lasso, np.zeros(ws.size), ws.fixed)
    assert ok1 and ok2
    np.testing.assert_allclose(b1, b2, atol=1e-8)


def test_active_set_matches_generic_solver():
    rng = np.random.default_rng(4)
    n = 12
    A = rng.normal(size=(20, n))
    Q = A.T @ A + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 5
    lasso = np.arange(n) >= 3
    import scipy.sparse as sp
    b, ok = quadratic_lasso(SparseQuadratic(sp.csr_matrix(Q)), g, 2.0, lasso, np.zeros(n))
    x = cp.Variable(n)
    cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, Q) - g @ x + 2.0 * cp.norm1(x[3:]))).solve(solver=cp.CLARABEL)
    assert ok
    np.testing.assert_allclose(b, x.value, atol=1e-6)


def test_cd_agrees_with_active_set(setup):
    ws, _, truth, _ = setup
    p = truth.copy()
    c = truth.copy()
    eta, w, r = working_set(ws, p)
    lam, rho = 0.5, 1.0
    cd = p.copy()
    cd_sweeps(ws, cd, c, w, r.copy(), lam, rho, 1e-12, 5000)   # updates its residual in place
    H = ws.hessian(w, rho)
    lin = ws.linear_term(w * (eta + r)) + rho * np.where(ws.prox, ws.to_struct(c), 0.0)
    b, ok = quadratic_lasso(H, lin, lam, ws.lasso, ws.to_struct(p), ws.fixed)
    assert ok
    np.testing.assert_allclose(ws.to_struct(cd), b, atol=1e-8)
