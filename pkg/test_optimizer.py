import numpy as np
import pytest
import scipy.sparse as sp

from errors import DomainError, QpInfeasible
from optimizer import (NlpProblem, NlpSettings, SolveStatus, finite_difference_jacobian, solve_nlp, solve_qp,
                       solve_qp_active_set)


def rosenbrock_residuals(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def rosenbrock_jacobian(x):
    return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])


def rosenbrock_problem(**kwargs):
    return NlpProblem(n=2, x0=np.array([-1.2, 1.0]), residuals=rosenbrock_residuals,
                      residual_jacobian=rosenbrock_jacobian, name="rosenbrock", **kwargs)


def parabola_problem(**kwargs):
    return NlpProblem(n=1, x0=np.zeros(1), objective=lambda x: float((x[0] - 2.0) ** 2),
                      gradient=lambda x: np.array([2.0 * (x[0] - 2.0)]), hessian=lambda x: np.array([[2.0]]),
                      **kwargs)


class TestQp:
    def test_one_dimensional_bound(self):
        sol = solve_qp(np.eye(1), np.zeros(1), lb=np.ones(1))
        assert sol.converged
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.z_lower[0] == pytest.approx(1.0, abs=1e-6)

    def test_one_dimensional_general_inequality(self):
        sol = solve_qp(np.eye(1), np.zeros(1), G=-np.eye(1), h=-np.ones(1))
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.z[0] == pytest.approx(1.0, abs=1e-6)

    def test_unconstrained_closed_form(self, rng):
        m = rng.standard_normal((5, 5))
        H = m @ m.T + 5 * np.eye(5)
        g = rng.standard_normal(5)
        sol = solve_qp(sp.csr_matrix(H), g)
        np.testing.assert_allclose(sol.x, -np.linalg.solve(H, g), atol=1e-8)

    def test_box_bounds_match_active_set_enumeration(self, rng):
        n = 20
        m = rng.standard_normal((n, n))
        H = 0.1 * m @ m.T + n * np.eye(n)
        g = rng.standard_normal(n)
        x_free = -np.linalg.solve(H, g)
        ub = np.full(n, np.inf)
        ub[:5] = x_free[:5] - 0.5
        ub[5:10] = x_free[5:10] + 5.0

        sol = solve_qp(H, g, ub=ub)
        oracle = solve_qp_active_set(H, g, ub=ub, max_rows=10)
        np.testing.assert_allclose(sol.x, oracle.x, atol=1e-6)
        np.testing.assert_allclose(sol.z_upper, oracle.z_upper, atol=1e-5)
        assert np.sum(oracle.z_upper > 1e-8) == 5

    def test_mixed_constraints_match_active_set_enumeration(self):
        H = np.diag([2.0, 1.0, 4.0])
        g = np.array([-2.0, -5.0, 1.0])
        A = np.array([[1.0, 1.0, 1.0]])
        b = np.array([1.0])
        G = np.array([[1.0, -1.0, 0.0]])
        h = np.array([-0.5])
        lb = np.array([-1.0, -1.0, 0.0])
        ub = np.array([1.0, 1.0, 1.0])

        sol = solve_qp(H, g, A, b, G, h, lb, ub)
        oracle = solve_qp_active_set(H, g, A, b, G, h, lb, ub)
        np.testing.assert_allclose(sol.x, oracle.x, atol=1e-7)
        np.testing.assert_allclose(sol.y, oracle.y, atol=1e-6)
        np.testing.assert_allclose(sol.z, oracle.z, atol=1e-6)
        np.testing.assert_allclose(sol.bound_dual, oracle.bound_dual, atol=1e-6)

    def test_fixed_bounds_become_equalities(self):
        sol = solve_qp(np.eye(2), np.array([-1.0, -1.0]), lb=np.array([0.3, -np.inf]), ub=np.array([0.3, np.inf]))
        np.testing.assert_allclose(sol.x, [0.3, 1.0], atol=1e-8)
        assert sol.z_lower[0] == pytest.approx(0.0, abs=1e-8)
        assert sol.z_upper[0] == pytest.approx(0.7, abs=1e-6)

    def test_crossed_bounds_are_infeasible(self):
        with pytest.raises(QpInfeasible):
            solve_qp(np.eye(1), np.zeros(1), lb=np.ones(1), ub=np.zeros(1))

    def test_oracle_rejects_large_problems(self):
        with pytest.raises(DomainError):
            solve_qp_active_set(np.eye(13), np.zeros(13), lb=np.zeros(13))


class TestNlp:
    def test_rosenbrock(self):
        sol = solve_nlp(rosenbrock_problem())
        assert sol.status is SolveStatus.CONVERGED
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-6)

    def test_active_inequality(self):
        sol = solve_nlp(parabola_problem(ineq=lambda x: x - 1.0, ineq_jacobian=lambda x: np.eye(1)))
        assert sol.converged
        assert sol.x[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.z_ineq[0] == pytest.approx(2.0, abs=1e-5)

    def test_active_upper_bound(self):
        sol = solve_nlp(parabola_problem(upper=np.ones(1)))
        assert sol.converged
        assert sol.x[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.z_upper[0] == pytest.approx(2.0, abs=1e-5)

    def test_converged_point_rechecked_independently(self):
        problem = rosenbrock_problem(ineq=lambda x: np.array([x[0] + x[1] - 1.5]),
                                     ineq_jacobian=lambda x: np.array([[1.0, 1.0]]))
        sol = solve_nlp(problem)
        assert sol.converged
        assert problem.violation(sol.x)[1] <= 1e-6
        J = rosenbrock_jacobian(sol.x)
        grad = J.T @ rosenbrock_residuals(sol.x) + sol.z_ineq[0] * np.array([1.0, 1.0])
        assert np.max(np.abs(grad)) <= 1e-5
        assert sol.z_ineq[0] >= 0

    def test_merit_decreases_on_accepted_steps(self):
        sol = solve_nlp(rosenbrock_problem())
        assert sol.merit_history
        assert all(after <= before + 1e-12 for before, after in sol.merit_history)

    def test_deterministic(self):
        first = solve_nlp(rosenbrock_problem())
        second = solve_nlp(rosenbrock_problem())
        np.testing.assert_array_equal(first.x, second.x)
        assert first.iterations == second.iterations

    def test_iteration_limit(self):
        sol = solve_nlp(rosenbrock_problem(), NlpSettings(max_iter=1))
        assert sol.status is SolveStatus.MAX_ITER
        assert not sol.converged

    def test_double_integrator_min_energy(self):
        # move 1 m in 1 s from rest to rest, piecewise-constant acceleration
        N, h = 10, 0.1
        n = 2 * (N + 1) + N
        P, V, A = slice(0, N + 1), slice(N + 1, 2 * N + 2), slice(2 * N + 2, n)

        def defects(z):
            p, v, a = z[P], z[V], z[A]
            return np.concatenate([p[1:] - p[:-1] - h * v[:-1] - 0.5 * h ** 2 * a,
                                   v[1:] - v[:-1] - h * a])

        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)
        for index, value in ((0, 0.0), (N, 1.0), (N + 1, 0.0), (2 * N + 1, 0.0)):
            lower[index] = upper[index] = value

        problem = NlpProblem(n=n, x0=np.zeros(n),
                             residuals=lambda z: np.sqrt(2 * h) * z[A],
                             residual_jacobian=lambda z: np.hstack([np.zeros((N, 2 * N + 2)), np.sqrt(2 * h) * np.eye(N)]),
                             eq=defects, eq_jacobian=lambda z: finite_difference_jacobian(defects, z),
                             lower=lower, upper=upper)
        sol = solve_nlp(problem)
        assert sol.converged
        energy = h * float(np.sum(sol.x[A] ** 2))
        # midpoint-rule Gram matrix of the two terminal constraints
        assert energy == pytest.approx(12.0 / (1.0 - h ** 2), rel=1e-5)
        assert energy == pytest.approx(12.0, rel=0.011)


def circle_in_box_problem():
    # x² = 4 inside [0, 3]; from x = 0.5 the linearized equality needs x = 4.25
    return NlpProblem(n=1, x0=np.array([0.5]), residuals=lambda x: np.array([x[0] - 3.0]),
                      residual_jacobian=lambda x: np.eye(1), eq=lambda x: np.array([x[0] ** 2 - 4.0]),
                      eq_jacobian=lambda x: np.array([[2.0 * x[0]]]), lower=np.zeros(1), upper=np.full(1, 3.0),
                      name="circle-in-box")


class TestElasticFallback:
    def test_first_linearization_is_infeasible(self):
        problem = circle_in_box_problem()
        with pytest.raises(QpInfeasible):
            solve_qp(np.eye(1), np.zeros(1), A=np.array([[1.0]]), b=-problem.eq_values(problem.x0),
                     lb=problem.lower - problem.x0, ub=problem.upper - problem.x0)

    def test_elastic_step_recovers(self):
        sol = solve_nlp(circle_in_box_problem(), NlpSettings(restoration=False))
        assert sol.converged
        assert sol.x[0] == pytest.approx(2.0, abs=1e-6)
        assert sol.feasibility <= 1e-6

    def test_without_elastic_or_restoration_reports_infeasible(self):
        sol = solve_nlp(circle_in_box_problem(), NlpSettings(restoration=False, elastic=False))
        assert sol.status is SolveStatus.INFEASIBLE
        assert "QP infeasible" in sol.message

    def test_active_bound_with_equality(self):
        problem = NlpProblem(n=2, x0=np.array([0.2, 0.3]),
                             residuals=lambda x: np.array([x[0] - 2.0, x[1]]),
                             residual_jacobian=lambda x: np.eye(2),
                             eq=lambda x: np.array([x[0] + x[1] - 1.5]),
                             eq_jacobian=lambda x: np.array([[1.0, 1.0]]),
                             lower=np.zeros(2), upper=np.array([1.0, 1.0]))
        sol = solve_nlp(problem)
        assert sol.converged
        np.testing.assert_allclose(sol.x, [1.0, 0.5], atol=1e-6)


class TestProblemChecks:
    def test_wrong_initial_guess_shape(self):
        with pytest.raises(DomainError):
            NlpProblem(n=3, x0=np.zeros(2))

    def test_crossed_bounds(self):
        with pytest.raises(DomainError):
            NlpProblem(n=1, x0=np.zeros(1), lower=np.ones(1), upper=np.zeros(1))

    def test_function_without_derivative(self):
        with pytest.raises(DomainError):
            NlpProblem(n=2, x0=np.zeros(2), residuals=rosenbrock_residuals)


def test_finite_difference_jacobian():
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(finite_difference_jacobian(rosenbrock_residuals, x), rosenbrock_jacobian(x), atol=1e-6)
