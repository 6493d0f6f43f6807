"""Vectorized numpy implementation of the per-layer kernels.

Both functions operate on batches: signals are rows, so a matrix M applied
to every sample of a batch X is written X @ M.T.  The analysis operator L
is (P, N); the resolvent and its two tau-derivative matrices are dense
(N, N) realizations built by the caller (grids are patch-sized).

The backward function returns parameter gradients summed over the batch
and implements the exact vector-Jacobian products of the layer map; the
two nonsmooth activations contribute piecewise-constant selections (strict
inequalities, so boundary points count as inactive).
"""

import numpy as np

name = "numpy"


def forward_layer(L, tau, sigma, resolvent, a, x, y):
    """One layer on a batch: returns (x_out, y_out, v1, v2, v3, w2, backproj).

    a is A^T z per sample, x/y the incoming primal/dual states.
    """
    Lx = x @ L.T
    v3 = sigma * Lx + y
    v2 = Lx + y / sigma
    v1 = x + tau * a - tau * (v3 @ L)
    thr = 1.0 / sigma
    w2 = np.sign(v2) * np.maximum(np.abs(v2) - thr, 0.0)
    y_out = np.clip(v3, -1.0, 1.0)
    backproj = w2 @ L
    x_out = (v1 + sigma * tau * backproj) @ resolvent.T
    return x_out, y_out, v1, v2, v3, w2, backproj


def backward_layer(L, tau, sigma, resolvent, d_resolvent, d_tau_resolvent,
                   a, x_in, y_in, v1, v2, v3, w2, backproj, gx_out, gy_out):
    """Pull the adjoint (gx_out, gy_out) back through one layer.

    Returns (gx_in, gy_in, d_tau, d_sigma, d_L) with the scalar gradients
    and d_L summed over the batch.
    """
    thr = 1.0 / sigma
    slope = thr * thr
    # adjoint of the resolvent stage; g_w1 doubles as the v1 adjoint
    g_w1 = gx_out @ resolvent
    t2 = g_w1 @ L.T
    g_w2 = (sigma * tau) * t2
    g_v2 = np.where(np.abs(v2) > thr, g_w2, 0.0)
    g_v3 = np.where(np.abs(v3) < 1.0, gy_out, 0.0)

    # d(soft threshold)/d(sigma) at fixed input: threshold 1/sigma shrinks
    dshrink = np.where(v2 > thr, slope, np.where(v2 < -thr, -slope, 0.0))
    Lx = v2 - y_in / sigma

    d_sigma = (-tau * np.sum(t2 * Lx)            # sigma*L x inside v1's L^T v3
               - slope * np.sum(g_v2 * y_in)     # y/sigma inside v2
               + np.sum(g_v3 * Lx)               # sigma*L x inside v3
               + np.sum(g_w2 * dshrink)          # threshold motion
               + tau * np.sum(t2 * w2))          # sigma*tau factor before L^T w2

    d_tau = (np.sum(g_w1 * a) - np.sum(t2 * v3)  # tau*(a - L^T v3) inside v1
             + np.sum(gx_out * (v1 @ d_resolvent.T))
             + sigma * np.sum(gx_out * (backproj @ d_tau_resolvent.T)))

    u = g_v2 + sigma * g_v3 - (tau * sigma) * t2
    gx_in = g_w1 + u @ L
    gy_in = -tau * t2 + g_v2 / sigma + g_v3
    d_L = (sigma * tau * w2 - tau * v3).T @ g_w1 + u.T @ x_in
    return gx_in, gy_in, float(d_tau), float(d_sigma), d_L
