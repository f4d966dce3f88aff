import numpy as np
import pytest

from conftest import bilinear_lattice_cost
from phevoc.solver import (PartitionedBfgs, QpStatus, SolverConfig, SolverStatus, kkt_residual, qp_subsolve,
                           solve)
from phevoc.transcription import Mesh, NlpProblem, transcribe


def quadratic_problem(center=2.0, lower=0.0, upper=1.0):
    return NlpProblem.from_functions(lambda z: float((z[0] - center) ** 2),
                                     lambda z: np.array([2.0 * (z[0] - center)]),
                                     [lower], [upper], initial_guess=[0.5])


def rosenbrock_problem(scale=1.0):
    """Rosenbrock on the line x + y = 1 inside [-2, 2]^2."""
    def objective(z):
        return scale * float((1.0 - z[0]) ** 2 + 100.0 * (z[1] - z[0] ** 2) ** 2)

    def gradient(z):
        r = z[1] - z[0] ** 2
        return scale * np.array([-2.0 * (1.0 - z[0]) - 400.0 * z[0] * r, 200.0 * r])

    return NlpProblem.from_functions(objective, gradient, [-2.0, -2.0], [2.0, 2.0],
                                     constraints=lambda z: np.array([z[0] + z[1] - 1.0]),
                                     jacobian=lambda z: np.array([[1.0, 1.0]]),
                                     initial_guess=[0.0, 1.0])


def line_minimum():
    """Refine a grid on x in [0, 1] for (1 - x)^2 + 100(1 - x - x^2)^2."""
    lo, hi = 0.0, 1.0
    for _ in range(12):
        xs = np.linspace(lo, hi, 201)
        vals = (1.0 - xs) ** 2 + 100.0 * (1.0 - xs - xs ** 2) ** 2
        k = int(np.argmin(vals))
        lo, hi = xs[max(k - 1, 0)], xs[min(k + 1, xs.size - 1)]
    return 0.5 * (lo + hi)


def test_bounded_quadratic():
    result = solve(quadratic_problem())
    assert result.success
    assert result.x[0] == pytest.approx(1.0)
    assert result.objective == pytest.approx(1.0)
    assert result.bound_multipliers[0] > 0


def test_unconstrained_interior_minimum():
    result = solve(quadratic_problem(center=0.3))
    assert result.success
    assert result.x[0] == pytest.approx(0.3, abs=1e-6)
    assert result.bound_multipliers[0] == 0.0


def test_constrained_rosenbrock():
    x_star = line_minimum()
    assert 0.55 < x_star < 0.65
    result = solve(rosenbrock_problem(), SolverConfig(kkt_tol=1e-9))
    assert result.success
    assert result.x[0] == pytest.approx(x_star, abs=1e-5)
    assert result.x[1] == pytest.approx(1.0 - x_star, abs=1e-5)
    assert result.constraint_violation <= 1e-9


def test_iteration_limit():
    result = solve(rosenbrock_problem(), SolverConfig(max_iter=2))
    assert result.status is SolverStatus.MAX_ITER
    assert not result.success
    assert result.iterations == 2
    assert len(result.history) == 2


def test_merit_decreases_while_penalty_is_fixed():
    result = solve(rosenbrock_problem(), SolverConfig(kkt_tol=1e-9))
    history = result.history
    assert set(history[0]) == {"iter", "objective", "kkt", "step_norm", "merit_penalty", "merit"}
    for prev, cur in zip(history, history[1:]):
        if cur["merit_penalty"] == prev["merit_penalty"]:
            assert cur["merit"] <= prev["merit"] + 1e-12 * max(1.0, abs(prev["merit"]))


def test_solver_is_deterministic():
    a = solve(rosenbrock_problem())
    b = solve(rosenbrock_problem())
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations


def test_objective_scaling_does_not_move_the_minimum():
    plain = solve(rosenbrock_problem(), SolverConfig(kkt_tol=1e-9))
    scaled = solve(rosenbrock_problem(scale=100.0), SolverConfig(kkt_tol=1e-9, relative_stationarity=True))
    assert scaled.success
    np.testing.assert_allclose(scaled.x, plain.x, atol=1e-5)
    # the reported residual stays absolute
    problem = rosenbrock_problem(scale=100.0)
    grad_norm = max(1.0, float(np.max(np.abs(problem.gradient(scaled.x)))))
    assert scaled.kkt <= 1e-9 * grad_norm * (1.0 + 1e-9)
    assert scaled.kkt == pytest.approx(kkt_residual(problem, scaled.x, scaled.multipliers), rel=1e-9, abs=1e-15)


def test_fixed_mode_solve_matches_lattice(bilinear_toy):
    problem = transcribe(bilinear_toy, Mesh(0.0, 1, 1.0), [0.0], np.ones(2), 0.0, 0.0)
    result = solve(problem.with_fixed_modes([0]), SolverConfig(kkt_tol=1e-10))
    lattice = bilinear_lattice_cost((0,), np.linspace(0.0, 1.0, 1001))
    assert result.success
    assert result.objective == pytest.approx(lattice, abs=1e-5)
    assert result.objective <= lattice + 1e-10


def test_kkt_residual():
    problem = NlpProblem.from_functions(lambda z: float((z[0] - 1.0) ** 2), lambda z: np.array([2.0 * (z[0] - 1.0)]),
                                        [-10.0], [10.0])
    assert kkt_residual(problem, np.array([1.0]), np.zeros(0)) == 0.0
    assert kkt_residual(problem, np.array([1.25]), np.zeros(0)) == pytest.approx(0.5)
    # stationarity is not divided by the gradient norm
    assert kkt_residual(problem, np.array([3.0]), np.zeros(0)) == pytest.approx(4.0)
    # at an upper bound the multiplier absorbs the gradient
    bounded = quadratic_problem()
    assert kkt_residual(bounded, np.array([1.0]), np.zeros(0)) == 0.0


def test_qp_newton_step():
    qp = qp_subsolve(np.diag([2.0, 4.0]), np.array([-2.0, -4.0]), np.zeros((0, 2)), np.zeros(0),
                     np.full(2, -10.0), np.full(2, 10.0))
    assert qp.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(qp.step, [1.0, 1.0])
    assert not qp.active.any()


def test_qp_binding_bound():
    qp = qp_subsolve(np.eye(1), np.array([-3.0]), np.zeros((0, 1)), np.zeros(0), np.array([-1.0]), np.array([1.0]))
    assert qp.status is QpStatus.OPTIMAL
    assert qp.step[0] == pytest.approx(1.0)
    assert qp.active[0] == 1
    assert qp.bound_multipliers[0] == pytest.approx(2.0)


def test_qp_equality_constrained_matches_kkt_system():
    rng = np.random.default_rng(21)
    n, m = 10, 3
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    K = np.block([[H, A.T], [A, np.zeros((m, m))]])
    expected = np.linalg.solve(K, np.concatenate([-g, b]))
    qp = qp_subsolve(H, g, A, b, np.full(n, -100.0), np.full(n, 100.0))
    assert qp.status is QpStatus.OPTIMAL
    np.testing.assert_allclose(qp.step, expected[:n], atol=1e-7)
    np.testing.assert_allclose(qp.multipliers, expected[n:], atol=1e-6)


def test_qp_reports_infeasible_linearization():
    qp = qp_subsolve(np.eye(2), np.zeros(2), np.array([[1.0, 1.0]]), np.array([5.0]), np.zeros(2), np.ones(2))
    assert qp.status is QpStatus.INFEASIBLE
    np.testing.assert_allclose(qp.step, [1.0, 1.0])


def test_bfgs_secant_update_and_reset():
    bfgs = PartitionedBfgs(np.array([[0, 1]]), 2, SolverConfig())
    bfgs.update(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]]))
    B = bfgs.matrix().toarray()
    np.testing.assert_allclose(B @ [1.0, 0.0], [2.0, 0.0], atol=1e-7)
    assert np.all(np.linalg.eigvalsh(B) > 0)

    bfgs.update(np.array([[1.0, 0.0]]), np.array([[-5.0, 0.0]]))
    np.testing.assert_allclose(bfgs.matrix().toarray(), np.eye(2), atol=1e-7)


def test_damped_update_stays_positive_definite():
    bfgs = PartitionedBfgs(np.array([[0, 1]]), 2, SolverConfig())
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = rng.normal(size=(1, 2))
        y = rng.normal(size=(1, 2))
        bfgs.update(s, y)
        assert np.all(np.linalg.eigvalsh(bfgs.matrix().toarray()) > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(kkt_tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(backtrack_ratio=1.5)


def test_optimal_status_bounds_the_absolute_residual():
    result = solve(rosenbrock_problem(scale=100.0), SolverConfig(kkt_tol=1e-6))
    assert result.success
    assert result.kkt <= 1e-6
