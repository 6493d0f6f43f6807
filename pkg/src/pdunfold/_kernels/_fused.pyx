# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused per-layer kernels on BLAS level 3, one elementwise pass per stage.

Mirrors numpy_backend exactly; the two are cross-checked by the test
suite.  Arrays are C-contiguous float64, signals are rows.  BLAS sees a
C-order array as its Fortran-order transpose, so every product is phrased
on the transposed system; the helpers below encode the three shapes used.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs
from scipy.linalg.cython_blas cimport ddot, dgemm

name = "compiled"


cdef inline void _rows_mt(double[:, ::1] out, double[:, ::1] inp,
                          double[:, ::1] M, double beta) nogil:
    # out(B, P) = inp(B, N) @ M(P, N)^T, i.e. M applied to every row
    cdef int P = M.shape[0], N = M.shape[1], B = inp.shape[0]
    cdef double one = 1.0
    dgemm("T", "N", &P, &B, &N, &one, &M[0, 0], &N, &inp[0, 0], &N,
          &beta, &out[0, 0], &P)


cdef inline void _rows_m(double[:, ::1] out, double[:, ::1] inp,
                         double[:, ::1] M, double beta) nogil:
    # out(B, N) = inp(B, P) @ M(P, N), i.e. M^T applied to every row
    cdef int P = M.shape[0], N = M.shape[1], B = inp.shape[0]
    cdef double one = 1.0
    dgemm("N", "N", &N, &B, &P, &one, &M[0, 0], &N, &inp[0, 0], &P,
          &beta, &out[0, 0], &N)


cdef inline void _accum_outer(double[:, ::1] d_M, double[:, ::1] left,
                              double[:, ::1] right) nogil:
    # d_M(P, N) += sum_b outer(left[b] (P,), right[b] (N,))
    cdef int P = d_M.shape[0], N = d_M.shape[1], B = left.shape[0]
    cdef double one = 1.0
    dgemm("N", "T", &N, &P, &B, &one, &right[0, 0], &N, &left[0, 0], &P,
          &one, &d_M[0, 0], &N)


cdef inline double _dot_all(double[:, ::1] u, double[:, ::1] v) nogil:
    cdef int n = u.shape[0] * u.shape[1], inc = 1
    return ddot(&n, &u[0, 0], &inc, &v[0, 0], &inc)


def forward_layer(double[:, ::1] L, double tau, double sigma,
                  double[:, ::1] resolvent,
                  double[:, ::1] a, double[:, ::1] x, double[:, ::1] y):
    """One layer on a batch: returns (x_out, y_out, v1, v2, v3, w2, backproj)."""
    cdef int B = x.shape[0], N = L.shape[1], P = L.shape[0]
    x_out_arr = np.empty((B, N))
    y_out_arr = np.empty((B, P))
    v1_arr = np.empty((B, N))
    v2_arr = np.empty((B, P))
    v3_arr = np.empty((B, P))
    w2_arr = np.empty((B, P))
    backproj_arr = np.empty((B, N))
    s_arr = np.empty((B, N))
    cdef double[:, ::1] x_out = x_out_arr, y_out = y_out_arr, v1 = v1_arr
    cdef double[:, ::1] v2 = v2_arr, v3 = v3_arr, w2 = w2_arr
    cdef double[:, ::1] backproj = backproj_arr, s = s_arr
    cdef int b, p, i
    cdef double thr = 1.0 / sigma, st = sigma * tau, mag, lx, value
    with nogil:
        _rows_mt(v2, x, L, 0.0)          # v2 holds L x for now
        for b in range(B):
            for p in range(P):
                lx = v2[b, p]
                value = sigma * lx + y[b, p]
                v3[b, p] = value
                y_out[b, p] = -1.0 if value < -1.0 else (1.0 if value > 1.0 else value)
                value = lx + y[b, p] / sigma
                v2[b, p] = value
                mag = fabs(value) - thr
                w2[b, p] = 0.0 if mag <= 0.0 else (mag if value > 0.0 else -mag)
        _rows_m(v1, v3, L, 0.0)          # v1 holds L^T v3 for now
        _rows_m(backproj, w2, L, 0.0)
        for b in range(B):
            for i in range(N):
                v1[b, i] = x[b, i] + tau * a[b, i] - tau * v1[b, i]
                s[b, i] = v1[b, i] + st * backproj[b, i]
        _rows_mt(x_out, s, resolvent, 0.0)
    return x_out_arr, y_out_arr, v1_arr, v2_arr, v3_arr, w2_arr, backproj_arr


def backward_layer(double[:, ::1] L, double tau, double sigma,
                   double[:, ::1] resolvent, double[:, ::1] d_resolvent,
                   double[:, ::1] d_tau_resolvent,
                   double[:, ::1] a, double[:, ::1] x_in, double[:, ::1] y_in,
                   double[:, ::1] v1, double[:, ::1] v2, double[:, ::1] v3,
                   double[:, ::1] w2, double[:, ::1] backproj,
                   double[:, ::1] gx_out, double[:, ::1] gy_out):
    """Adjoint of one layer; returns (gx_in, gy_in, d_tau, d_sigma, d_L)."""
    cdef int B = x_in.shape[0], N = L.shape[1], P = L.shape[0]
    gx_in_arr = np.empty((B, N))
    gy_in_arr = np.empty((B, P))
    d_L_arr = np.zeros((P, N))
    g_w1_arr = np.empty((B, N))
    t2_arr = np.empty((B, P))
    u_arr = np.empty((B, P))
    coef_arr = np.empty((B, P))
    tmp_arr = np.empty((B, N))
    cdef double[:, ::1] gx_in = gx_in_arr, gy_in = gy_in_arr, d_L = d_L_arr
    cdef double[:, ::1] g_w1 = g_w1_arr, t2 = t2_arr, u = u_arr
    cdef double[:, ::1] coef = coef_arr, tmp = tmp_arr
    cdef int b, p, i
    cdef double thr = 1.0 / sigma, slope = 1.0 / (sigma * sigma)
    cdef double st = sigma * tau, d_tau = 0.0, d_sigma = 0.0
    cdef double lx, gw2, gv2, gv3, dsh, value
    with nogil:
        _rows_m(g_w1, gx_out, resolvent, 0.0)    # resolvent^T applied per row
        _rows_mt(t2, g_w1, L, 0.0)
        for b in range(B):
            for p in range(P):
                value = v2[b, p]
                lx = value - y_in[b, p] / sigma
                gw2 = st * t2[b, p]
                gv2 = gw2 if fabs(value) > thr else 0.0
                gv3 = gy_out[b, p] if fabs(v3[b, p]) < 1.0 else 0.0
                dsh = slope if value > thr else (-slope if value < -thr else 0.0)
                d_sigma += (-tau * t2[b, p] * lx - slope * gv2 * y_in[b, p]
                            + gv3 * lx + gw2 * dsh + tau * t2[b, p] * w2[b, p])
                u[b, p] = gv2 + sigma * gv3 - st * t2[b, p]
                gy_in[b, p] = -tau * t2[b, p] + gv2 / sigma + gv3
                coef[b, p] = st * w2[b, p] - tau * v3[b, p]
        d_tau += _dot_all(g_w1, a) - _dot_all(t2, v3)
        _rows_mt(tmp, v1, d_resolvent, 0.0)
        d_tau += _dot_all(gx_out, tmp)
        _rows_mt(tmp, backproj, d_tau_resolvent, 0.0)
        d_tau += sigma * _dot_all(gx_out, tmp)
        _rows_m(gx_in, u, L, 0.0)
        for b in range(B):
            for i in range(N):
                gx_in[b, i] += g_w1[b, i]
        _accum_outer(d_L, coef, g_w1)
        _accum_outer(d_L, u, x_in)
    return gx_in_arr, gy_in_arr, d_tau, d_sigma, d_L_arr
