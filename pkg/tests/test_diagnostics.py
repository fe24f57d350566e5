import json

import numpy as np
import pytest

from freehorizon.cost import CostSpec, stage_cost
from freehorizon.diagnostics import (
    CheckReport,
    OracleFailedError,
    check_bellman_consistency,
    check_first_hit_minimality,
    check_jacobians,
    check_lyapunov_decrease,
    dare_fixed_point,
    goal_linearization,
)
from freehorizon.dynamics import Model
from freehorizon.horizon import ACResult, SweepRecord, solve_acocp
from freehorizon.ilqr import Problem, SolveResult
from freehorizon.cost import trajectory_cost

UNI = Model("unicycle")
UNI_COST = CostSpec(goal=[1, 1, np.pi / 2], Q=[1, 1, 1], R=[0.1, 0.1], Q_T=[5, 5, 5])
UNI_PROBLEM = Problem(UNI, UNI_COST, [0, 0, 0])
DI = Model("double_integrator", dt=0.1)


def _riccati_from(P, A, B, Q, R, n_iter=5000):
    # deliberately plain second implementation: value iteration on the gain form
    for _ in range(n_iter):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + K.T @ R @ K + (A - B @ K).T @ P @ (A - B @ K)
    return P


@pytest.fixture(scope="module")
def uni_result():
    return solve_acocp(UNI_PROBLEM, 0.05, 1, 200, 5)


@pytest.fixture(scope="module")
def di_setup():
    A, B = goal_linearization(DI, [0, 0])
    P, _ = dare_fixed_point(A, B, np.eye(2), np.eye(1))
    prob = Problem(DI, CostSpec(goal=[0, 0], Q=np.eye(2), R=[[1.0]], Q_T=P), [3.0, -1.0])
    return prob, solve_acocp(prob, 0.1, 1, 200, 5)


def test_dare_scalar_golden_ratio():
    P, K = dare_fixed_point(np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    phi = (1 + np.sqrt(5)) / 2
    np.testing.assert_allclose(P, phi * np.eye(2), atol=1e-11)
    np.testing.assert_allclose(K, phi / (phi + 1) * np.eye(2), atol=1e-11)


def test_dare_zero_dynamics_returns_q():
    Q = np.diag([2.0, 3.0])
    P, K = dare_fixed_point(np.zeros((2, 2)), np.eye(2), Q, np.eye(2))
    np.testing.assert_allclose(P, Q, atol=1e-15)
    np.testing.assert_allclose(K, 0, atol=1e-15)


def test_dare_double_integrator_independent_seed():
    A, B = goal_linearization(DI, [0, 0])
    P, _ = dare_fixed_point(A, B, np.eye(2), np.eye(1))
    P_zero = _riccati_from(np.zeros((2, 2)), A, B, np.eye(2), np.eye(1))
    np.testing.assert_allclose(P, P_zero, atol=1e-10, rtol=0)
    # the stationary point satisfies the algebraic equation
    BtP = B.T @ P
    resid = A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(np.eye(1) + BtP @ B, BtP @ A) + np.eye(2)
    assert np.abs(resid).max() <= 1e-9


def test_dare_same_fixed_point_from_any_psd_seed():
    A, B = goal_linearization(DI, [0, 0])
    ref, _ = dare_fixed_point(A, B, np.eye(2), np.eye(1))
    rng = np.random.default_rng(12)
    for _ in range(5):
        L = rng.normal(scale=10.0, size=(2, 2))
        P, _ = dare_fixed_point(A, B, np.eye(2), np.eye(1), P0=L @ L.T)
        np.testing.assert_allclose(P, ref, atol=1e-10, rtol=0)


def test_dare_unstabilizable_fails():
    with pytest.raises(OracleFailedError):
        dare_fixed_point([[2.0]], [[0.0]], [[1.0]], [[1.0]])


def test_check_jacobians():
    di = check_jacobians(DI, n_samples=50, seed=1)
    assert di.passed and di.worst_violation <= 1e-9
    car = check_jacobians(Model("car_like"), n_samples=100, seed=7)
    assert car.passed and car.worst_violation <= car.tolerance
    with pytest.raises(ValueError):
        check_jacobians(DI, n_samples=0)


def test_reports_are_reproducible_and_json():
    a = check_jacobians(UNI, n_samples=20, seed=3)
    b = check_jacobians(UNI, n_samples=20, seed=3)
    assert a.to_json() == b.to_json()
    obj = json.loads(a.to_json())
    assert set(obj) == {"name", "passed", "worst_violation", "tolerance", "details"}
    assert obj["passed"] == (obj["worst_violation"] <= obj["tolerance"])


def test_report_passed_iff_within_tolerance():
    for worst, tol in ((0.1, 0.2), (0.2, 0.2), (0.3, 0.2)):
        r = CheckReport("x", worst <= tol, worst, tol)
        assert r.passed == (r.worst_violation <= r.tolerance)


def test_bellman_exact_on_lqr_instance(di_setup):
    prob, res = di_setup
    rep = check_bellman_consistency(res, prob, stride=1, tol=1e-6)
    assert rep.passed, rep.worst_violation
    assert len(rep.details) >= res.T_star - 1


def test_bellman_on_unicycle(uni_result):
    rep = check_bellman_consistency(uni_result, UNI_PROBLEM, stride=5)
    assert rep.passed, rep.worst_violation
    last = [d for d in rep.details if d["k"] == uni_result.T_star - 1]
    if last:
        d = last[0]
        # one step from the boundary the cost-to-go is the stage cost plus M
        assert d["J_k"] == pytest.approx(d["stage_cost"] + 0.05, rel=1e-3)


def test_lyapunov_on_unicycle_and_lqr(uni_result, di_setup):
    rep = check_lyapunov_decrease(uni_result, UNI_PROBLEM)
    assert rep.passed, rep.worst_violation
    prob, res = di_setup
    assert check_lyapunov_decrease(res, prob).passed


def _stuck_result(problem, T):
    states = np.tile(problem.x0, (T + 1, 1))
    controls = np.zeros((T, problem.model.p))
    bd = trajectory_cost(problem.cost, states, controls)
    sol = SolveResult(states, controls, bd, True, 1, np.zeros((T, problem.model.p, problem.model.n)))
    rec = SweepRecord(T, bd.total, bd.transfer, bd.terminal, True, True, 1)
    return ACResult(T_star=T, J_M=bd.transfer + 0.01, M=0.01, solution=sol, sweep=[rec])


def test_lyapunov_fails_on_stuck_trajectory():
    prob = Problem(DI, CostSpec(goal=[0, 0], Q=np.eye(2), R=[[1.0]], Q_T=np.eye(2)), [1.0, 0.0])
    fake = _stuck_result(prob, 5)
    rep = check_lyapunov_decrease(fake, prob)
    assert not rep.passed
    # the re-solved cost-to-go is the same at every step, so the excess is the stage cost
    J0 = rep.details[0]["J_k"]
    assert rep.worst_violation == pytest.approx(stage_cost(prob.cost, prob.x0, [0.0]) / J0, rel=1e-9)


def test_first_hit_minimality(uni_result):
    assert check_first_hit_minimality(uni_result).passed
    bad_sweep = [SweepRecord(3, 1, 1, 0.0, True, True, 1)] + list(uni_result.sweep)
    bad = ACResult(uni_result.T_star, uni_result.J_M, uni_result.M, uni_result.solution, bad_sweep)
    rep = check_first_hit_minimality(bad)
    assert not rep.passed and rep.details == [{"T": 3}]
