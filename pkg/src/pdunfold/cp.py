"""Primal-dual splitting solver for analysis-regularized least squares.

Solves

    min_x  0.5 * ||A x - z||^2 + h(L x)

with A circulant (so the primal step's resolvent is exact in the Fourier
basis), L a dense or sparse analysis matrix, and h the l1 norm.  The scheme
is the classic Chambolle-Pock iteration: a dual prox ascent step, a primal
resolvent step, and an extrapolation with relaxation theta.  With
tau * sigma * ||L||^2 < 1 and theta = 1 the iterates converge to a solution.

State vectors are flat (length N = rows * cols); the circulant operator is
applied by reshaping to its grid.
"""

from dataclasses import dataclass, field

import numpy as np

from .linops import CirculantOp, Resolvent
from .prox import ProxFamily, prox_l1_conjugate

__all__ = [
    "CPProblem",
    "CPSettings",
    "StepSizeError",
    "operator_norm",
    "objective",
    "cp_iterate",
    "cp_solve",
    "difference_matrix_1d",
    "tv_analysis_operator",
]


class StepSizeError(ValueError):
    """Raised when tau * sigma * ||L||^2 >= 1 would break convergence."""


def operator_norm(L, iters=50, tol=1e-6, seed=0):
    """Spectral norm ||L|| by power iteration on L^T L.

    Deterministic for a fixed seed.  Works for dense arrays and for any
    object supporting ``@`` and ``.T`` (scipy sparse matrices included).
    Returns 0.0 for an all-zero operator.
    """
    n = L.shape[1]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    norm_v = np.linalg.norm(v)
    if norm_v == 0:
        return 0.0
    v /= norm_v
    value = 0.0
    for _ in range(iters):
        w = L.T @ (L @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0:
            return 0.0
        new_value = float(v @ w)
        v = w / norm_w
        if abs(new_value - value) <= tol * max(1.0, abs(new_value)):
            value = new_value
            break
        value = new_value
    return float(np.sqrt(max(value, 0.0)))


@dataclass
class CPProblem:
    """One restoration instance: data z, blur A, analysis operator L.

    ``z`` is the degraded observation, flat, length A's grid size.  ``L``
    maps flat signals to P analysis coefficients.  ``L_norm`` is computed
    once by power iteration unless supplied.
    """

    op: CirculantOp
    z: np.ndarray
    L: object
    prox: ProxFamily = ProxFamily.L1
    L_norm: float = field(default=None)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).ravel()
        if self.z.size != self.op.n:
            raise ValueError(
                "z has %d entries, operator grid has %d" % (self.z.size, self.op.n))
        if not np.all(np.isfinite(self.z)):
            raise ValueError("z has non-finite entries")
        if self.L.shape[1] != self.op.n:
            raise ValueError(
                "L has %d columns, expected %d" % (self.L.shape[1], self.op.n))
        if not isinstance(self.prox, ProxFamily):
            raise ValueError("prox must be a ProxFamily member")
        if self.L_norm is None:
            self.L_norm = operator_norm(self.L)

    def apply_blur(self, x):
        return self.op.apply(x.reshape(self.op.shape)).ravel()

    def apply_blur_adjoint(self, y):
        return self.op.apply_adjoint(y.reshape(self.op.shape)).ravel()


@dataclass
class CPSettings:
    """Step sizes and stopping rule for :func:`cp_solve`.

    The coupled condition tau * sigma * ||L||^2 < 1 depends on the problem's
    L, so it is checked at solve entry; the scalar ranges are checked here.
    """

    tau: float
    sigma: float
    theta: float = 1.0
    max_iter: int = 20000
    tol: float = 1e-8

    def __post_init__(self):
        for name in ("tau", "sigma"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ValueError("%s must be positive, got %r" % (name, value))
            setattr(self, name, value)
        self.theta = float(self.theta)
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1], got %r" % self.theta)
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


def default_settings(problem, margin=0.99, **kwargs):
    """Settings with tau = sigma = margin / ||L|| (safe when L is nonzero)."""
    norm = problem.L_norm
    if norm == 0:
        step = 1.0
    else:
        step = margin / norm
    return CPSettings(tau=step, sigma=step, **kwargs)


def check_step_sizes(problem, settings):
    """Raise :class:`StepSizeError` unless tau * sigma * ||L||^2 < 1."""
    product = settings.tau * settings.sigma * problem.L_norm ** 2
    if not product < 1.0:
        raise StepSizeError(
            "tau*sigma*||L||^2 = %.6f must be < 1" % product)


def objective(problem, x):
    """0.5 * ||A x - z||^2 + ||L x||_1 at the flat point x."""
    x = np.asarray(x, dtype=float).ravel()
    residual = problem.apply_blur(x) - problem.z
    coeffs = problem.L @ x
    return 0.5 * float(residual @ residual) + float(np.sum(np.abs(coeffs)))


def cp_iterate(problem, settings, state, _resolvent=None):
    """One primal-dual iteration from state (x, y, x_bar).

    Dual step:    y <- clip(y + sigma * L x_bar) onto [-1, 1]
    Primal step:  x <- (tau*A^T A + I)^{-1} (tau * A^T z + x - tau * L^T y)
    Relaxation:   x_bar <- x_new + theta * (x_new - x)

    Returns the new (x, y, x_bar).  With theta = 0 the map coincides with
    one layer of the unfolded network at tied parameters.
    """
    x, y, x_bar = state
    if _resolvent is None:
        _resolvent = Resolvent(settings.tau, problem.op)
    y_new = prox_l1_conjugate(y + settings.sigma * (problem.L @ x_bar), settings.sigma)
    rhs = settings.tau * problem.apply_blur_adjoint(problem.z) + x \
        - settings.tau * (problem.L.T @ y_new)
    x_new = _resolvent.apply(rhs.reshape(problem.op.shape)).ravel()
    x_bar_new = x_new + settings.theta * (x_new - x)
    return x_new, y_new, x_bar_new


def cp_solve(problem, settings, x0=None):
    """Run the iteration to tolerance; return (solution, objective trace).

    Stops when the relative primal change ||x_new - x|| / max(1, ||x||)
    drops below ``settings.tol``, or after ``settings.max_iter`` iterations.
    The trace holds the objective after every completed iteration.
    """
    check_step_sizes(problem, settings)
    if x0 is None:
        x0 = np.zeros(problem.op.n)
    x = np.asarray(x0, dtype=float).ravel().copy()
    if x.size != problem.op.n:
        raise ValueError("x0 has %d entries, expected %d" % (x.size, problem.op.n))
    y = np.zeros(problem.L.shape[0])
    x_bar = x.copy()
    resolvent = Resolvent(settings.tau, problem.op)
    trace = []
    for _ in range(settings.max_iter):
        x_new, y, x_bar = cp_iterate(problem, settings, (x, y, x_bar), resolvent)
        trace.append(objective(problem, x_new))
        change = np.linalg.norm(x_new - x) / max(1.0, np.linalg.norm(x))
        x = x_new
        if change < settings.tol:
            break
    return x, np.asarray(trace)


def difference_matrix_1d(n, circular=False):
    """Dense forward-difference matrix on a length-n signal.

    (n-1, n) for the open chain, (n, n) with wraparound when circular.
    """
    if n < 2:
        raise ValueError("need n >= 2, got %d" % n)
    rows = n if circular else n - 1
    D = np.zeros((rows, n))
    idx = np.arange(rows)
    D[idx, idx] = -1.0
    D[idx, (idx + 1) % n] = 1.0
    return D


def tv_analysis_operator(shape):
    """Sparse circular first-difference operator on a 2D grid.

    Stacks horizontal differences over vertical ones: (2N, N) CSR acting on
    row-major flattened images.  ||L||^2 <= 8 for this stencil.
    """
    from scipy import sparse

    h, w = int(shape[0]), int(shape[1])
    n = h * w
    idx = np.arange(n)
    right = (idx // w) * w + (idx + 1) % w
    down = ((idx // w + 1) % h) * w + idx % w
    ones = np.ones(n)
    horiz = sparse.csr_matrix(
        (np.concatenate([-ones, ones]),
         (np.concatenate([idx, idx]), np.concatenate([idx, right]))),
        shape=(n, n))
    vert = sparse.csr_matrix(
        (np.concatenate([-ones, ones]),
         (np.concatenate([idx, idx]), np.concatenate([idx, down]))),
        shape=(n, n))
    return sparse.vstack([horiz, vert]).tocsr()
