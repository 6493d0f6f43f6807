"""Circulant convolution operators diagonalized by the 2D DFT.

Periodic (circular) convolution with a fixed kernel on a fixed grid is a
circulant linear operator, so the 2D DFT diagonalizes it: applying the
operator multiplies the signal's spectrum by the operator's eigenvalue
spectrum.  That makes the forward map, the adjoint, and the data-term
resolvent ``(tau*A^T A + I)^{-1}`` exact and cheap, which is what the
solver and the unfolded network rely on.

Operators are immutable after construction; spectra and dense realizations
are computed once and cached, so instances are safe to share across threads.
"""

import numpy as np

__all__ = [
    "CirculantOp",
    "Resolvent",
    "build_circulant",
    "uniform_kernel",
    "dense_from_spectrum",
]

# absolute ceiling on the imaginary residue left after an inverse FFT of a
# conjugate-symmetric product; anything above this means a broken spectrum
_IMAG_TOL = 1e-9


def uniform_kernel(size):
    """Uniform blur kernel of shape (size, size) with weight 1/size**2 per tap."""
    if size < 1:
        raise ValueError("kernel size must be >= 1, got %d" % size)
    return np.full((size, size), 1.0 / (size * size))


def _real_part(values, scale):
    """Drop the imaginary residue of an inverse FFT after checking it is noise."""
    residue = np.max(np.abs(values.imag))
    if residue > _IMAG_TOL * max(1.0, scale):
        raise ValueError("imaginary residue %.3e exceeds tolerance" % residue)
    return np.ascontiguousarray(values.real)


def dense_from_spectrum(spectrum):
    """Dense (N, N) matrix of the circulant operator with the given eigenvalues.

    ``spectrum`` is the full complex 2D eigenvalue grid (H, W).  The matrix
    acts on row-major flattened signals.  Column j is the operator applied to
    the j-th unit impulse, which for a circulant operator is a circular shift
    of the impulse response ``ifft2(spectrum)``.
    """
    spectrum = np.asarray(spectrum, dtype=complex)
    h, w = spectrum.shape
    impulse = np.fft.ifft2(spectrum)
    impulse = _real_part(impulse, float(np.max(np.abs(impulse.real))))
    idx = np.arange(h * w)
    rows, cols = idx // w, idx % w
    dr = (rows[:, None] - rows[None, :]) % h
    dc = (cols[:, None] - cols[None, :]) % w
    return impulse[dr, dc]


class CirculantOp:
    """Circular 2D convolution with a fixed kernel on a fixed grid.

    Parameters
    ----------
    kernel : array_like
        Real 2D tap array, no larger than the grid.  The kernel is anchored
        at its center tap (floor of the center for even sizes), so symmetric
        kernels act without spatial shift.
    shape : tuple of int
        Grid shape (rows, cols) the operator acts on.

    Attributes
    ----------
    spectrum : ndarray
        Complex eigenvalue grid, the 2D DFT of the zero-padded, circularly
        centered kernel.
    """

    def __init__(self, kernel, shape):
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim != 2:
            raise ValueError("kernel must be 2D, got ndim=%d" % kernel.ndim)
        if not np.all(np.isfinite(kernel)):
            raise ValueError("kernel has non-finite entries")
        h, w = int(shape[0]), int(shape[1])
        if h < 1 or w < 1:
            raise ValueError("grid shape must be positive, got %r" % (shape,))
        kh, kw = kernel.shape
        if kh > h or kw > w:
            raise ValueError(
                "kernel %r larger than grid %r" % (kernel.shape, (h, w)))
        self.kernel = kernel.copy()
        self.kernel.flags.writeable = False
        self.shape = (h, w)
        padded = np.zeros((h, w))
        padded[:kh, :kw] = kernel
        padded = np.roll(padded, (-((kh - 1) // 2), -((kw - 1) // 2)), axis=(0, 1))
        self.spectrum = np.fft.fft2(padded)
        self.spectrum.flags.writeable = False
        # |eigenvalue|^2 grid, the spectrum of A^T A
        self.gain_squared = np.abs(self.spectrum) ** 2
        self.gain_squared.flags.writeable = False
        self._dense = None
        self._dense_adjoint = None

    @property
    def n(self):
        """Number of grid points the flattened operator acts on."""
        return self.shape[0] * self.shape[1]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise ValueError("expected shape %r, got %r" % (self.shape, x.shape))
        return x

    def apply(self, x):
        """Apply the operator to a 2D signal: A x."""
        x = self._check(x)
        out = np.fft.ifft2(np.fft.fft2(x) * self.spectrum)
        return _real_part(out, float(np.max(np.abs(out.real))) if out.size else 1.0)

    def apply_adjoint(self, y):
        """Apply the adjoint: A^T y (conjugate spectrum)."""
        y = self._check(y)
        out = np.fft.ifft2(np.fft.fft2(y) * np.conj(self.spectrum))
        return _real_part(out, float(np.max(np.abs(out.real))) if out.size else 1.0)

    def dense(self):
        """Dense (N, N) matrix acting on row-major flattened signals (cached)."""
        if self._dense is None:
            self._dense = dense_from_spectrum(self.spectrum)
            self._dense.flags.writeable = False
        return self._dense

    def dense_adjoint(self):
        """Dense (N, N) matrix of the adjoint (cached)."""
        if self._dense_adjoint is None:
            self._dense_adjoint = dense_from_spectrum(np.conj(self.spectrum))
            self._dense_adjoint.flags.writeable = False
        return self._dense_adjoint


def build_circulant(kernel, shape):
    """Construct a :class:`CirculantOp` for ``kernel`` on grid ``shape``."""
    return CirculantOp(kernel, shape)


class Resolvent:
    """The linear map ``(tau*A^T A + I)^{-1}`` for a circulant A.

    A^T A shares A's eigenvectors with eigenvalues |lambda|^2, so the
    resolvent is diagonal in the Fourier basis with entries
    ``1 / (tau*|lambda|^2 + 1)``, all of which lie in (0, 1].
    """

    def __init__(self, tau, op):
        tau = float(tau)
        if not np.isfinite(tau) or tau <= 0:
            raise ValueError("tau must be positive and finite, got %r" % tau)
        self.tau = tau
        self.op = op
        self.inv_spectrum = 1.0 / (tau * op.gain_squared + 1.0)
        self.inv_spectrum.flags.writeable = False

    def apply(self, x):
        """Solve (tau*A^T A + I) u = x for u."""
        x = self.op._check(x)
        out = np.fft.ifft2(np.fft.fft2(x) * self.inv_spectrum)
        return _real_part(out, float(np.max(np.abs(out.real))) if out.size else 1.0)

    def dense(self):
        """Dense (N, N) realization on flattened signals."""
        return dense_from_spectrum(self.inv_spectrum)
