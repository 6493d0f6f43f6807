import numpy as np
import pytest
import scipy.sparse as sp

from pdunfold.cp import (CPProblem, CPSettings, StepSizeError, cp_solve,
                         check_step_sizes, default_settings,
                         difference_matrix_1d, objective, operator_norm,
                         tv_analysis_operator)
from pdunfold.linops import CirculantOp, uniform_kernel

from oracles import subgradient_best


def _denoise_problem(n_side, rng, scale=8.0):
    op = CirculantOp(uniform_kernel(1), (n_side, n_side))
    z = rng.uniform(0, scale, size=n_side * n_side)
    L = difference_matrix_1d(n_side * n_side)
    return CPProblem(op, z, L)


def test_operator_norm_matches_svd(rng):
    mat = rng.standard_normal((30, 20))
    norm = operator_norm(mat, iters=200, tol=1e-12)
    assert abs(norm - np.linalg.norm(mat, 2)) < 1e-6
    assert operator_norm(np.zeros((5, 4))) == 0.0


def test_operator_norm_sparse(rng):
    L = tv_analysis_operator((6, 6))
    dense = L.toarray()
    assert abs(operator_norm(L, iters=300, tol=1e-12)
               - np.linalg.norm(dense, 2)) < 1e-6


def test_step_size_guard(rng):
    problem = _denoise_problem(4, rng)
    good = default_settings(problem)
    check_step_sizes(problem, good)
    bad = CPSettings(tau=good.tau * 10, sigma=good.sigma * 10)
    with pytest.raises(StepSizeError):
        check_step_sizes(problem, bad)
    with pytest.raises(StepSizeError):
        cp_solve(problem, bad)


def test_settings_validation():
    with pytest.raises(ValueError):
        CPSettings(tau=0.0, sigma=1.0)
    with pytest.raises(ValueError):
        CPSettings(tau=1.0, sigma=1.0, theta=1.5)
    with pytest.raises(ValueError):
        CPSettings(tau=1.0, sigma=1.0, max_iter=0)


def test_difference_matrix():
    d = difference_matrix_1d(5)
    assert d.shape == (4, 5)
    x = np.array([1.0, 3.0, 6.0, 10.0, 15.0])
    assert np.array_equal(d @ x, np.array([2.0, 3.0, 4.0, 5.0]))
    dc = difference_matrix_1d(4, circular=True)
    assert dc.shape == (4, 4)
    assert np.array_equal(dc @ np.arange(4.0), np.array([1.0, 1.0, 1.0, -3.0]))


def test_tv_operator_action():
    L = tv_analysis_operator((3, 4))
    assert L.shape == (24, 12)
    img = np.arange(12.0).reshape(3, 4)
    coeffs = L @ img.ravel()
    horiz = coeffs[:12].reshape(3, 4)
    vert = coeffs[12:].reshape(3, 4)
    # forward differences with periodic wrap
    assert np.allclose(horiz[:, :3], 1.0) and np.allclose(horiz[:, 3], -3.0)
    assert np.allclose(vert[:2, :], 4.0) and np.allclose(vert[2, :], -8.0)


def test_objective_decreases(rng):
    problem = _denoise_problem(6, rng, scale=20.0)
    settings = default_settings(problem, max_iter=300, tol=0.0)
    x, trace = cp_solve(problem, settings)
    assert trace[-1] <= trace[0]
    assert trace[-1] <= objective(problem, problem.z) + 1e-9


def test_solver_reaches_subgradient_oracle(rng):
    # small instance so the oracle is cheap; the acceptance test scales it up
    problem = _denoise_problem(4, rng)
    settings = default_settings(problem, max_iter=20000, tol=1e-12)
    x, trace = cp_solve(problem, settings)
    a_mat = np.eye(16)
    best = subgradient_best(a_mat, problem.z, problem.L, iters=200000, gamma0=1.5)
    assert trace[-1] <= best + 1e-6
    assert abs(trace[-1] - best) < 1e-3


def test_theta_zero_and_one_converge(rng):
    problem = _denoise_problem(4, rng)
    results = {}
    for theta in (0.0, 1.0):
        settings = default_settings(problem, theta=theta, max_iter=50000,
                                    tol=1e-13)
        x, trace = cp_solve(problem, settings)
        results[theta] = (x, len(trace))
    x0, n0 = results[0.0]
    x1, n1 = results[1.0]
    assert np.max(np.abs(x0 - x1)) < 1e-6
    # relaxation is expected to help; recorded, not asserted strictly
    print("iterations: theta=0 %d, theta=1 %d" % (n0, n1))


def test_deblur_instance_converges(rng):
    op = CirculantOp(uniform_kernel(3), (5, 5))
    clean = rng.uniform(0, 10, size=(5, 5))
    z = op.apply(clean).ravel() + 0.1 * rng.standard_normal(25)
    L = tv_analysis_operator((5, 5)) * 0.05
    problem = CPProblem(op, z, L)
    settings = default_settings(problem, max_iter=20000, tol=1e-12)
    x, trace = cp_solve(problem, settings)
    # the minimizer is at least as good as any particular point
    assert trace[-1] <= objective(problem, np.zeros(25)) + 1e-9
    assert trace[-1] <= objective(problem, clean.ravel()) + 1e-9
    assert trace[-1] <= objective(problem, z) + 1e-9
