import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_spd, random_symmetric
from phisd.dynamics import (
    MetricStage,
    RunTrace,
    SolverConfig,
    StageSwitch,
    Status,
    TraceRecord,
    deflated_residual,
    estimate_linear_rate,
    frame_update,
    initial_frame,
    optimal_step_size,
    reflected_direction,
    solve,
    verify_saddle,
)
from phisd.errors import ContractViolation, FrameCollapseError
from phisd.metric import DenseMetric, DiagonalMetric, IdentityMetric, m_orthonormalize
from phisd.problems import butterfly_problem, paper_quadratic_spectrum, quadratic_problem


def dense_phisd_reference(H_of, grad_of, x0, V0, Mmat, eta, tau, J, steps):
    """Explicit-matrix p-HiSD: projectors are formed as n x n arrays."""
    n, k = V0.shape
    Minv = np.linalg.inv(Mmat)
    x, V = x0.copy(), V0.copy()
    xs = [x.copy()]
    for _ in range(steps):
        H = H_of(x)
        for _ in range(J):
            for i in range(k):
                P = np.eye(n) - np.outer(V[:, i], V[:, i]) @ Mmat
                for j in range(i):
                    P -= 2 * np.outer(V[:, j], V[:, j]) @ Mmat
                V[:, i] = V[:, i] - tau * P @ Minv @ H @ V[:, i]
            # Gram-Schmidt in the M inner product, twice
            for i in range(k):
                for _ in range(2):
                    for j in range(i):
                        V[:, i] -= V[:, j] * (V[:, j] @ Mmat @ V[:, i])
                V[:, i] /= np.sqrt(V[:, i] @ Mmat @ V[:, i])
        R = np.eye(n) - 2 * V @ V.T @ Mmat
        x = x - eta * R @ Minv @ grad_of(x)
        xs.append(x.copy())
    return np.array(xs)


# -- elementary operations ---------------------------------------------------


def test_reflected_direction_identity(rng):
    g = rng.standard_normal(5)
    v = np.linalg.qr(rng.standard_normal((5, 1)))[0]
    d = reflected_direction(g, v, IdentityMetric(5))
    assert np.allclose(d, -(np.eye(5) - 2 * v @ v.T) @ g)


def test_reflected_direction_metric(rng):
    A = random_spd(rng, 6)
    V = m_orthonormalize(rng.standard_normal((6, 2)), A)
    g = rng.standard_normal(6)
    d = reflected_direction(g, V, DenseMetric(A))
    expected = -(np.eye(6) - 2 * V.vectors @ V.vectors.T @ A) @ np.linalg.solve(A, g)
    assert np.allclose(d, expected)


@given(st.integers(2, 8), st.integers(0, 10**6))
def test_deflated_residual_matches_matrix_form(n, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n))
    A = random_spd(rng, n)
    V = m_orthonormalize(rng.standard_normal((n, k)), A).vectors
    w = rng.standard_normal(n)
    for i in range(k):
        P = np.eye(n) - np.outer(V[:, i], V[:, i]) @ A
        for j in range(i):
            P -= 2 * np.outer(V[:, j], V[:, j]) @ A
        assert np.allclose(deflated_residual(i, V, w, DenseMetric(A)), P @ w)


def test_deflated_residual_bad_index(rng):
    with pytest.raises(ContractViolation):
        deflated_residual(2, np.eye(3)[:, :2], np.ones(3), IdentityMetric(3))


def test_frame_update_converges_to_generalized_eigenvectors(rng):
    n = 8
    H = random_symmetric(rng, n, 2, gap=0.5)
    A = random_spd(rng, n, cond=5)
    M = DenseMetric(A)
    F = m_orthonormalize(rng.standard_normal((n, 2)), M)
    for _ in range(3000):
        F = frame_update(F, H, M, tau=0.05)
    import scipy.linalg as sla

    w, U = sla.eigh(H, A)
    # span of frame equals span of the two lowest generalized eigenvectors
    proj = U[:, :2] @ U[:, :2].T @ A
    assert np.allclose(proj @ F.vectors, F.vectors, atol=1e-8)
    lam = np.diag(F.vectors.T @ H @ F.vectors)
    assert np.allclose(lam, w[:2], atol=1e-8)


def test_frame_update_collapse_raises():
    H = np.diag([-1.0, 1.0, 2.0])
    F = m_orthonormalize(np.eye(3)[:, :2] + 0.1, np.eye(3))
    with pytest.raises(FrameCollapseError, match="tau"):
        frame_update(F, H, IdentityMetric(3), tau=1e8)


def test_frame_update_k_zero():
    F = frame_update(np.zeros((3, 0)), np.eye(3), IdentityMetric(3), 0.1)
    assert F.k == 0


def test_initial_frame_eigen_and_random(rng):
    H = np.diag([-2.0, -1.0, 1.0, 3.0])
    F = initial_frame(H, IdentityMetric(4), 2)
    assert np.allclose(np.abs(F.vectors), np.eye(4)[:, :2])
    R = initial_frame(H, IdentityMetric(4), 2, "random", rng)
    assert R.orthonormality_error() < 1e-12


def test_optimal_step_size_quadratic():
    H = np.diag(paper_quadratic_spectrum())
    assert optimal_step_size(H, IdentityMetric(100)) == pytest.approx(2 / 101)


# -- configuration -----------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(k=-1), dict(eta=0.0), dict(tau=-1.0), dict(inner_iters=0), dict(grad_tol=0.0), dict(frame_init="bogus")],
)
def test_solver_config_validation(kwargs):
    base = dict(k=1, eta=0.1, tau=0.1)
    base.update(kwargs)
    with pytest.raises(ContractViolation):
        SolverConfig(**base)


def test_stage_switch_trigger_semantics():
    sw = StageSwitch(eta=1.0, window=3, rel_decrease_threshold=0.1)
    assert not sw.triggered([1.0, 1.0, 1.0])  # m = 2 < window
    assert sw.triggered([1.0, 0.5, 0.5, 0.9])  # 0.9 >= 0.9 * 1.0
    assert not sw.triggered([1.0, 0.5, 0.5, 0.89])
    with pytest.raises(ContractViolation):
        StageSwitch(eta=1.0, rel_decrease_threshold=1.5)


def test_metric_stage_rules(rng):
    with pytest.raises(ContractViolation):
        MetricStage(IdentityMetric(2), update="every_step")
    with pytest.raises(ContractViolation):
        MetricStage(lambda x, H: None, update="sometimes")
    calls = []
    stage = MetricStage(lambda x, H: calls.append(1) or IdentityMetric(2), "every_step", "probe")
    stage.build(None, None)
    assert calls == [1] and "probe" in repr(stage)


# -- solve ---------------------------------------------------------------------


def quadratic_setup():
    p = quadratic_problem(paper_quadratic_spectrum())
    return p, p.point("unit_gradient_start")


def test_solve_quadratic_standard_hisd_count():
    p, x0 = quadratic_setup()
    eta = 2 / 101
    tr = solve(p, x0, None, SolverConfig(k=1, eta=eta, tau=0.1, grad_tol=1e-8))
    # |g_m| = |1 - eta L|^m exactly for x0 along e_1 + e_n, so the first m
    # with |g_m| < 1e-8 is ceil(log(1e-8) / log(99/101))
    q = 99 / 101
    assert tr.status is Status.CONVERGED_INDEX_K
    assert tr.iterations == int(np.ceil(np.log(1e-8) / np.log(q)))
    assert np.allclose(tr.grad_norms, q ** np.arange(tr.iterations + 1), rtol=1e-9)
    assert tr.rate.q == pytest.approx(q, abs=1e-9)
    assert tr.morse_index == 1


def test_solve_at_saddle_stops_immediately():
    p, _ = quadratic_setup()
    tr = solve(p, np.zeros(100), None, SolverConfig(k=1, eta=0.01, tau=0.1))
    assert tr.status is Status.CONVERGED_INDEX_K and tr.iterations == 0


def test_solve_wrong_index_classification():
    p, x0 = quadratic_setup()
    tr = solve(p, x0, None, SolverConfig(k=2, eta=2 / 101, tau=0.1, grad_tol=1e-6))
    assert tr.status is Status.CONVERGED_WRONG_INDEX
    assert tr.status.exit_code == 2 and tr.morse_index == 1


def test_solve_diverges_and_budget():
    p, x0 = quadratic_setup()
    tr = solve(p, x0, None, SolverConfig(k=1, eta=0.5, tau=0.1))
    assert tr.status is Status.DIVERGED and tr.status.exit_code == 3
    tr = solve(p, x0, None, SolverConfig(k=1, eta=2 / 101, tau=0.1, max_iters=10))
    assert tr.status is Status.BUDGET_EXHAUSTED and tr.iterations == 10
    assert tr.rate is None


def test_solve_rejects_bad_input():
    p, x0 = quadratic_setup()
    with pytest.raises(ContractViolation):
        solve(p, x0[:5], None, SolverConfig(k=1, eta=0.01, tau=0.1))
    with pytest.raises(ContractViolation):
        solve(p, x0, [IdentityMetric(100), IdentityMetric(100)], SolverConfig(k=1, eta=0.01, tau=0.1))
    with pytest.raises(ContractViolation):
        solve(p, x0, None, None)


@pytest.mark.parametrize("k", [1, 2])
def test_solve_matches_dense_reference(rng, k):
    """Library iterates equal an explicit-matrix implementation on a nonlinear problem."""
    n = 6
    A = random_spd(rng, n, cond=4)
    B = random_symmetric(rng, n, k, gap=0.3)

    from phisd.problems import ProblemDefinition

    def grad(x):
        return B @ x + 0.1 * x**3

    p = ProblemDefinition(
        "cubic", n, lambda x: 0.5 * x @ B @ x + 0.025 * np.sum(x**4), grad, lambda x: B + np.diag(0.3 * x**2)
    )
    x0 = 0.3 * rng.standard_normal(n)
    cfg = SolverConfig(k=k, eta=0.05, tau=0.05, inner_iters=2, max_iters=40, grad_tol=1e-300)
    xs = []
    tr = solve(p, x0, DenseMetric(A), cfg, callback=lambda s, r: xs.append(s.x.copy()))
    V0 = initial_frame(p.hessian(x0), DenseMetric(A), k).vectors
    ref = dense_phisd_reference(p.hessian, grad, x0, V0, A, 0.05, 0.05, 2, 40)
    assert tr.iterations == 40
    assert np.max(np.abs(np.array(xs) - ref[1:])) < 1e-11


def test_two_stage_switch_fires_once():
    p = quadratic_problem(np.array([-1.0, 1.0, 50.0]))
    x0 = np.array([0.5, 0.5, 0.5])
    # stage 1 with a tiny step stagnates at once; stage 2 converges quickly
    cfg = SolverConfig(k=1, eta=1e-4, tau=0.1, grad_tol=1e-8, max_iters=500, stage_switch=StageSwitch(eta=1.0))
    M2 = DiagonalMetric([1.0, 1.0, 50.0])
    tr = solve(p, x0, [IdentityMetric(3), M2], cfg)
    assert tr.switch_iteration == 10
    stages = [r.stage for r in tr.records]
    assert stages[: 11] == [0] * 11 and set(stages[11:]) == {1}
    assert [r.eta for r in tr.records[11:]] == [1.0] * (len(tr.records) - 11)
    assert tr.status is Status.CONVERGED_INDEX_K
    assert tr.metric is M2


def test_every_step_metric_is_rebuilt():
    p = butterfly_problem()
    built = []

    def source(x, H):
        built.append(x.copy())
        return IdentityMetric(2)

    solve(p, np.array([0.3, 0.2]), MetricStage(source, "every_step"), SolverConfig(k=1, eta=0.01, tau=0.05, max_iters=7))
    assert len(built) == 7


def test_frame_errors_recorded_each_iteration():
    p, x0 = quadratic_setup()
    tr = solve(p, x0, None, SolverConfig(k=1, eta=2 / 101, tau=0.1, max_iters=25))
    assert len(tr.frame_errors) == 25 and max(tr.frame_errors) < 1e-12


# -- rate estimation -------------------------------------------------------------


def test_rate_estimate_exact_geometric():
    est = estimate_linear_rate(0.7 ** np.arange(30))
    assert est.ok and est.q == pytest.approx(0.7, rel=1e-12)
    assert est.window == (12, 30)


def test_rate_estimate_rejections():
    assert not estimate_linear_rate([1.0, 0.5, 0.25]).ok  # too few points
    assert "not decreasing" in estimate_linear_rate(np.ones(10)).reason
    noisy = np.exp(np.array([0, -1, 3, -4, 2, -6, 1, -8, 0, -10.0]))
    assert "residual" in estimate_linear_rate(noisy).reason


def test_rate_estimate_from_trace():
    recs = [TraceRecord(m, 0.5**m, 0.0, 1.0, 0) for m in range(10)]
    assert estimate_linear_rate(RunTrace(recs)).q == pytest.approx(0.5)


# -- saddle verification -----------------------------------------------------------


def test_verify_saddle_butterfly():
    p = butterfly_problem()
    rep = verify_saddle(p, p.reference("saddle").x, None, 1)
    assert rep.passed and rep.rayleigh_quotients[0] < 0
    rep = verify_saddle(p, p.reference("minimum_right").x, None, 1)
    assert not rep.index_ok and not rep.passed


def test_verify_saddle_with_supplied_frame():
    p = quadratic_problem(np.array([-2.0, -1.0, 3.0]))
    good = verify_saddle(p, np.zeros(3), None, 2, frame=np.eye(3)[:, :2])
    assert good.passed
    swapped = verify_saddle(p, np.zeros(3), None, 2, frame=np.eye(3)[:, [1, 0]])
    assert not swapped.ordering_ok
