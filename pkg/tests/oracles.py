"""Independent reference implementations used only by the tests.

Everything here is deliberately slow and literal: direct spatial loops
instead of FFTs, dense matrices, explicit enumeration.  The production
code must agree with these, not the other way round.
"""

import numpy as np


def conv2_periodic(kernel, image):
    """Direct periodic 2D convolution, centered kernel, no FFT anywhere.

    out(r, c) = sum_{i,j} kernel(i, j) * image(r - i + ch, c - j + cw)
    with (ch, cw) the kernel center ((kh-1)//2, (kw-1)//2) and periodic
    wraparound.
    """
    kernel = np.asarray(kernel, dtype=float)
    image = np.asarray(image, dtype=float)
    kh, kw = kernel.shape
    h, w = image.shape
    ch, cw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    acc += kernel[i, j] * image[(r - i + ch) % h, (c - j + cw) % w]
            out[r, c] = acc
    return out


def dense_operator(kernel, shape):
    """Dense matrix of conv2_periodic acting on flattened images."""
    h, w = shape
    n = h * w
    mat = np.zeros((n, n))
    for j in range(n):
        impulse = np.zeros(n)
        impulse[j] = 1.0
        mat[:, j] = conv2_periodic(kernel, impulse.reshape(h, w)).ravel()
    return mat


def subgradient_best(a_mat, z, l_mat, iters, gamma0=1.0, seed=0):
    """Best objective found by projected-free subgradient descent.

    Minimizes 0.5 ||A x - z||^2 + ||L x||_1 with the diminishing step
    gamma0 / (k + 1), tracking the best objective along the trajectory.
    Slow but unbiased: shares no code with the solver under test.
    """
    a_mat = np.asarray(a_mat, dtype=float)
    l_mat = np.asarray(l_mat, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(a_mat.shape[1]) * 0.01
    ata = a_mat.T @ a_mat
    atz = a_mat.T @ z
    best = np.inf
    for k in range(iters):
        coeffs = l_mat @ x
        f = 0.5 * np.sum((a_mat @ x - z) ** 2) + np.sum(np.abs(coeffs))
        if f < best:
            best = f
        g = ata @ x - atz + l_mat.T @ np.sign(coeffs)
        x = x - (gamma0 / (k + 1.0)) * g
    coeffs = l_mat @ x
    f = 0.5 * np.sum((a_mat @ x - z) ** 2) + np.sum(np.abs(coeffs))
    return min(best, f)


def feature_footprints(blocks, patch_side):
    """Enumerate the expected support of every analysis row, in order.

    Rows are laid out block by block, channel by channel, positions
    row-major within a channel.  Each footprint is the set of flat pixel
    indices a size-f window covers at its position.
    """
    rows = []
    for f, s, n in blocks:
        q = (patch_side - f) // s + 1
        corners = [(r * s, c * s) for r in range(q) for c in range(q)]
        for _channel in range(n):
            for r0, c0 in corners:
                cols = {(r0 + u) * patch_side + (c0 + v)
                        for u in range(f) for v in range(f)}
                rows.append(frozenset(cols))
    return rows


def naive_soft_threshold(v, t):
    out = np.zeros_like(np.asarray(v, dtype=float))
    flat_v = np.asarray(v, dtype=float).ravel()
    flat_o = out.ravel()
    for i, value in enumerate(flat_v):
        if value > t:
            flat_o[i] = value - t
        elif value < -t:
            flat_o[i] = value + t
    return out
