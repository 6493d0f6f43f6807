import numpy as np
import pytest

from pdunfold.linops import (CirculantOp, Resolvent, dense_from_spectrum,
                             uniform_kernel)

from oracles import conv2_periodic, dense_operator


def test_uniform_kernel_sums_to_one():
    for size in (1, 3, 5):
        k = uniform_kernel(size)
        assert k.shape == (size, size)
        assert abs(k.sum() - 1.0) < 1e-14


def test_apply_matches_direct_convolution(rng):
    for kh in (1, 3, 5):
        kernel = rng.standard_normal((kh, kh))
        op = CirculantOp(kernel, (7, 9))
        x = rng.standard_normal((7, 9))
        direct = conv2_periodic(kernel, x)
        assert np.max(np.abs(op.apply(x) - direct)) < 1e-12


def test_adjoint_is_transpose(rng):
    kernel = rng.standard_normal((3, 3))
    op = CirculantOp(kernel, (6, 6))
    mat = dense_operator(kernel, (6, 6))
    assert np.max(np.abs(op.dense() - mat)) < 1e-12
    assert np.max(np.abs(op.dense_adjoint() - mat.T)) < 1e-12
    x = rng.standard_normal((6, 6))
    y = rng.standard_normal((6, 6))
    lhs = np.sum(op.apply(x) * y)
    rhs = np.sum(x * op.apply_adjoint(y))
    assert abs(lhs - rhs) < 1e-10


def test_dense_from_spectrum_roundtrip(rng):
    kernel = rng.standard_normal((3, 3))
    op = CirculantOp(kernel, (5, 5))
    mat = dense_from_spectrum(op.spectrum)
    x = rng.standard_normal(25)
    assert np.max(np.abs(mat @ x - op.apply(x.reshape(5, 5)).ravel())) < 1e-12


def test_gain_squared_is_spectrum_magnitude(rng):
    kernel = rng.standard_normal((3, 3))
    op = CirculantOp(kernel, (6, 6))
    assert np.max(np.abs(op.gain_squared - np.abs(op.spectrum) ** 2)) < 1e-14


def test_resolvent_solves_normal_system(rng):
    for _ in range(5):
        tau = float(rng.uniform(0.05, 3.0))
        kernel = rng.standard_normal((3, 3))
        op = CirculantOp(kernel, (8, 8))
        res = Resolvent(tau, op)
        x = rng.standard_normal((8, 8))
        u = res.apply(x)
        mat = dense_operator(kernel, (8, 8))
        system = tau * mat.T @ mat + np.eye(64)
        expected = np.linalg.solve(system, x.ravel())
        assert np.max(np.abs(u.ravel() - expected)) < 1e-10


def test_resolvent_spectrum_bounded(rng):
    op = CirculantOp(uniform_kernel(3), (8, 8))
    res = Resolvent(0.7, op)
    mags = np.abs(res.inv_spectrum)
    assert np.all(mags <= 1.0 + 1e-12) and np.all(mags > 0.0)


def test_shape_checks():
    op = CirculantOp(uniform_kernel(3), (4, 4))
    with pytest.raises(ValueError):
        op.apply(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        Resolvent(-1.0, op)
