"""Damped sparse Newton driver and its reporting contract."""

import numpy as np
import pytest
from scipy.sparse import csr_matrix, diags, eye, random as sprandom

from ringflow import NewtonReport, SingularJacobianError, newton_solve


def scalar_problem(f, fprime):
    res = lambda x: np.array([f(x[0])])
    jac = lambda x: csr_matrix([[fprime(x[0])]])
    return res, jac


def test_square_root_of_four():
    res, jac = scalar_problem(lambda x: x * x - 4.0, lambda x: 2.0 * x)
    x, report = newton_solve(res, jac, np.array([3.0]), tol=1e-12)
    assert report.converged
    assert report.iterations <= 6
    assert abs(x[0] - 2.0) < 1e-10


def test_linear_system_one_iteration(rng):
    n = 40
    A = diags([2.0 + rng.uniform(0, 1, n)], [0]).tocsr() + 0.1 * sprandom(
        n, n, density=0.05, random_state=7
    )
    b = rng.normal(size=n)
    res = lambda x: A @ x - b
    jac = lambda x: A
    x, report = newton_solve(res, jac, np.zeros(n), tol=1e-9)
    assert report.converged
    assert report.iterations == 1
    np.testing.assert_allclose(A @ x, b, atol=1e-9)


def test_residual_norms_decrease():
    res, jac = scalar_problem(lambda x: x**3 - 8.0, lambda x: 3.0 * x * x)
    _, report = newton_solve(res, jac, np.array([5.0]), tol=1e-10)
    assert report.converged
    norms = report.residual_norms
    assert len(norms) == report.iterations + 1
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_damping_rescues_overshoot():
    # full Newton on arctan diverges from x0 = 2; backtracking saves it
    res, jac = scalar_problem(np.arctan, lambda x: 1.0 / (1.0 + x * x))
    x, report = newton_solve(res, jac, np.array([2.0]), tol=1e-10)
    assert report.converged
    assert report.damping_used
    assert abs(x[0]) < 1e-8


def test_already_converged_start():
    res, jac = scalar_problem(lambda x: x - 1.0, lambda x: 1.0)
    x, report = newton_solve(res, jac, np.array([1.0]), tol=1e-8)
    assert report.converged
    assert report.iterations == 0
    assert report.factorizations == 0
    assert report.residual_norms == [0.0]


def test_singular_jacobian_raises():
    res = lambda x: np.array([1.0 + 0.0 * x[0]])
    jac = lambda x: csr_matrix([[0.0]])
    with pytest.raises(SingularJacobianError):
        newton_solve(res, jac, np.array([0.5]))


def test_nonfinite_residual_raises():
    res = lambda x: np.array([np.nan])
    jac = lambda x: csr_matrix([[1.0]])
    with pytest.raises(SingularJacobianError):
        newton_solve(res, jac, np.array([0.0]))


def test_gives_up_cleanly():
    # no root on the reals: |x| + 1; the driver must stop, not loop
    res, jac = scalar_problem(lambda x: x * x + 1.0, lambda x: 2.0 * x)
    _, report = newton_solve(res, jac, np.array([3.0]), max_iter=12)
    assert not report.converged


# ---------------------------------------------------- jacobian recycling

def _cubic_system(n, rng):
    b = rng.uniform(0.5, 1.5, size=n)
    A = eye(n).tocsr()

    def res(x):
        return x + 0.1 * x**3 - b

    def jac(x):
        return A + diags([0.3 * x**2], [0]).tocsr()

    return res, jac, b


def test_reuse_reaches_same_root(rng):
    res, jac, b = _cubic_system(50, rng)
    x_full, rep_full = newton_solve(res, jac, np.zeros(50), tol=1e-11)
    x_reuse, rep_reuse = newton_solve(res, jac, np.zeros(50), tol=1e-11,
                                      reuse_jacobian=True)
    assert rep_full.converged and rep_reuse.converged
    np.testing.assert_allclose(x_reuse, x_full, atol=1e-9)
    assert rep_full.factorizations == rep_full.iterations
    assert rep_reuse.factorizations <= rep_reuse.iterations
    assert rep_reuse.factorizations < rep_reuse.iterations


def test_reuse_refreshes_when_stale(rng):
    """Strong curvature makes the frozen factors contract poorly, which
    must trigger refactoring rather than a stall."""
    n = 30
    b = rng.uniform(1.0, 2.0, size=n)

    def res(x):
        return np.sinh(2.0 * x) - b

    def jac(x):
        return diags([2.0 * np.cosh(2.0 * x)], [0]).tocsr()

    x, report = newton_solve(res, jac, np.full(n, 2.0), tol=1e-11,
                             max_iter=80, reuse_jacobian=True)
    assert report.converged
    assert report.factorizations >= 2
    np.testing.assert_allclose(np.sinh(2.0 * x), b, atol=1e-9)


def test_report_defaults():
    rep = NewtonReport()
    assert rep.iterations == 0 and not rep.converged
    assert rep.residual_norms == [] and rep.factorizations == 0
