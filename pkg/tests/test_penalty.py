import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridembed.penalty import Constraints, merit, projected_gradient, solve, violation


def quadratic(c):
    def f(x):
        d = x - c
        return float(d @ d), 2 * d
    return f


def linear_cons(a, b, g=None, h=None):
    """``a x = b`` and ``g x <= h``."""
    g = np.zeros((0, len(a[0]))) if g is None else np.asarray(g, float)
    h = np.zeros(0) if h is None else np.asarray(h, float)
    a, b = np.asarray(a, float), np.asarray(b, float)

    def cons(x):
        return Constraints(a @ x - b, g @ x - h, lambda u, w: a.T @ u + g.T @ w)
    return cons


def test_projection_onto_hyperplane():
    # min |x - c|^2 s.t. sum(x) = 1 has the closed form c - (sum(c) - 1)/n
    c = np.array([0.3, -0.2, 0.9])
    res = solve(quadratic(c), linear_cons([[1, 1, 1]], [1]), np.zeros(3), np.full(3, -np.inf), np.full(3, np.inf))
    assert res.converged
    assert np.allclose(res.x, c - (c.sum() - 1) / 3, atol=1e-6)


def test_inequality_and_box():
    # min (x-2)^2 + (y-2)^2 s.t. x + y <= 1, 0 <= x <= 0.2
    res = solve(quadratic(np.array([2.0, 2.0])), linear_cons(np.zeros((0, 2)), np.zeros(0), [[1, 1]], [1]),
                np.zeros(2), np.array([0.0, -np.inf]), np.array([0.2, np.inf]))
    assert res.converged
    assert np.allclose(res.x, [0.2, 0.8], atol=1e-6)
    assert res.ineq_multipliers[0] > 0


def test_violation_and_projected_gradient():
    c = Constraints(np.array([0.1, -0.3]), np.array([-1.0, 0.2]), None)
    assert violation(c) == pytest.approx(0.3)
    assert projected_gradient(np.array([0.0]), np.array([5.0]), np.array([0.0]), np.array([1.0])) == 0


@settings(max_examples=20)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.floats(0.1, 100))
def test_merit_gradient(xs, weight):
    x = np.array(xs)
    cons = linear_cons([[1, 2, 0]], [0.5], [[0, 1, -1]], [0.1])
    f = quadratic(np.array([1.0, 0.0, -1.0]))
    lam, nu = np.array([0.3]), np.array([0.7])
    _, g = merit(x, f, cons, lam, nu, weight)
    h = 1e-6
    fd = np.array([(merit(x + h * e, f, cons, lam, nu, weight)[0] - merit(x - h * e, f, cons, lam, nu, weight)[0])
                   / (2 * h) for e in np.eye(3)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-5)


def test_iteration_limit_reported():
    res = solve(quadratic(np.zeros(2)), linear_cons([[1, 0], [1, 0]], [0, 1]), np.zeros(2),
                np.full(2, -np.inf), np.full(2, np.inf), max_outer=3)
    assert not res.converged
    assert res.rounds == 3
