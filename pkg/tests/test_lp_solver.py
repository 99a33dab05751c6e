import numpy as np
import pytest
from scipy.optimize import linprog

from src.components.lp_solver import LpProblem, solve_lp
from src.exceptions import NumericError, ShapeError


def test_textbook_maximization():
    # max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18
    problem = LpProblem([-3.0, -5.0], a_ub=[[1, 0], [0, 2], [3, 2]], b_ub=[4, 12, 18])
    result = solve_lp(problem)
    np.testing.assert_allclose(result.x, [2.0, 6.0], atol=1e-9)
    assert result.objective == pytest.approx(-36.0)


def test_equality_and_negative_rhs():
    # min x + y s.t. x - y = -1, x + y >= 3
    problem = LpProblem([1.0, 1.0], a_ub=[[-1, -1]], b_ub=[-3], a_eq=[[1, -1]], b_eq=[-1])
    result = solve_lp(problem)
    assert result.objective == pytest.approx(3.0)
    assert result.x[0] - result.x[1] == pytest.approx(-1.0)


def test_free_and_boxed_variables():
    # min -|d| style vertex: min g.d with |d_i| <= 0.5
    g = np.array([1.0, -2.0, 0.5])
    problem = LpProblem(g, lower=np.full(3, -0.5), upper=np.full(3, 0.5))
    np.testing.assert_allclose(solve_lp(problem).x, -0.5 * np.sign(g), atol=1e-12)

    free = LpProblem([1.0], a_ub=[[-1.0]], b_ub=[2.0], lower=[-np.inf])
    assert solve_lp(free).x[0] == pytest.approx(-2.0)


def test_infeasible_problem():
    problem = LpProblem([1.0], a_ub=[[1.0], [-1.0]], b_ub=[1.0, -2.0])
    with pytest.raises(NumericError):
        solve_lp(problem)


def test_unbounded_problem():
    with pytest.raises(NumericError):
        solve_lp(LpProblem([-1.0, 0.0], a_ub=[[0.0, 1.0]], b_ub=[1.0]))


def test_redundant_equalities():
    problem = LpProblem([1.0, 2.0], a_eq=[[1, 1], [2, 2]], b_eq=[1, 2])
    result = solve_lp(problem)
    np.testing.assert_allclose(result.x, [1.0, 0.0], atol=1e-12)


def test_shape_validation():
    with pytest.raises(ShapeError):
        LpProblem([1.0, 1.0], a_ub=[[1.0]], b_ub=[1.0])
    with pytest.raises(NumericError):
        LpProblem([1.0], lower=[2.0], upper=[1.0])


def test_degenerate_problem_terminates():
    # classic cycling example for the largest-coefficient rule
    c = [-0.75, 150.0, -0.02, 6.0]
    a = [[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]]
    b = [0.0, 0.0, 1.0]
    result = solve_lp(LpProblem(c, a_ub=a, b_ub=b))
    assert result.objective == pytest.approx(-0.05)


@pytest.mark.parametrize("seed", range(10))
def test_agrees_with_scipy(seed):
    rng = np.random.default_rng(seed)
    m, n = 6, 4
    a = rng.standard_normal((m, n))
    b = rng.uniform(1.0, 2.0, m)
    c = rng.standard_normal(n)
    lower, upper = np.full(n, -1.0), np.full(n, 1.0)
    ours = solve_lp(LpProblem(c, a_ub=a, b_ub=b, lower=lower, upper=upper))
    reference = linprog(c, A_ub=a, b_ub=b, bounds=list(zip(lower, upper)), method="highs")
    assert reference.status == 0
    assert ours.objective == pytest.approx(reference.fun, abs=1e-8)
    assert np.all(a @ ours.x <= b + 1e-9)
