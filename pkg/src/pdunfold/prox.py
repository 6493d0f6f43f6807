"""Proximity operators of the l1 norm, its convex conjugate, and the
piecewise-constant selections used when differentiating through them.

The conjugate of the l1 norm is the indicator of the unit inf-norm ball, so
its scaled prox is componentwise clipping to [-1, 1] regardless of the scale
(Moreau decomposition).  The selection functions below pick one element of
the subdifferential at the kink points; ties resolve to 0 so the activation
boundary itself is treated as inactive.
"""

from enum import Enum

import numpy as np

__all__ = [
    "ProxFamily",
    "prox_l1",
    "prox_l1_conjugate",
    "subgradient_masks",
    "soft_threshold_dsigma",
]


class ProxFamily(Enum):
    """Supported nonsmooth penalties h applied to the analysis coefficients."""

    L1 = "l1"


def _positive(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError("%s must be positive and finite, got %r" % (name, value))
    return value


def prox_l1(v, threshold):
    """Soft threshold: prox of ``threshold * |.|_1`` at v, componentwise."""
    threshold = _positive("threshold", threshold)
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def prox_l1_conjugate(v, sigma):
    """Prox of the scaled conjugate of the l1 norm: clipping to [-1, 1].

    Equal to ``v - sigma * prox_l1(v / sigma, 1 / sigma)`` for every
    sigma > 0; the scale only enters through that identity.
    """
    _positive("sigma", sigma)
    v = np.asarray(v, dtype=float)
    return np.clip(v, -1.0, 1.0)


def subgradient_masks(v_shrink, v_clip, sigma):
    """Chain-rule selections through the two nonsmooth activations.

    Returns (shrink_mask, clip_mask) of floats in {0, 1}: the derivative of
    the soft threshold is 1 strictly outside the dead zone |v| <= 1/sigma,
    and the derivative of the clip is 1 strictly inside |v| < 1.  At the
    boundaries both select 0.
    """
    sigma = _positive("sigma", sigma)
    v_shrink = np.asarray(v_shrink, dtype=float)
    v_clip = np.asarray(v_clip, dtype=float)
    shrink = (np.abs(v_shrink) > 1.0 / sigma).astype(float)
    clip = (np.abs(v_clip) < 1.0).astype(float)
    return shrink, clip


def soft_threshold_dsigma(v, sigma):
    """Partial derivative of ``prox_l1(v, 1/sigma)`` with respect to sigma.

    The threshold 1/sigma shrinks as sigma grows, so the output moves by
    +1/sigma^2 on the positive active branch, -1/sigma^2 on the negative
    one, and 0 inside the dead zone (boundary included).
    """
    sigma = _positive("sigma", sigma)
    v = np.asarray(v, dtype=float)
    slope = 1.0 / (sigma * sigma)
    return np.where(v > 1.0 / sigma, slope, np.where(v < -1.0 / sigma, -slope, 0.0))
