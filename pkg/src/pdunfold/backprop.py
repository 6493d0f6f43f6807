"""Analytic backpropagation through the unfolded network.

The training loss is the mean squared reconstruction error over a batch,
E = (1/I) * sum_s ||x_hat_s - x_true_s||^2.  Its gradient with respect to
every layer's (tau, sigma, L) is computed exactly by pulling the adjoint
state (t_x, t_y) backward through the layer maps, one vector-Jacobian
product per stage; no Jacobian is ever materialized.  The nonsmooth
activations (soft threshold, clip) contribute piecewise-constant
selections from their subdifferentials, with activation boundaries
counting as inactive.

The per-sample reference implementation mirrors
:func:`pdunfold.network.layer_forward` using the FFT operators; batched
training goes through the selected kernel backend with dense resolvents.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cp import operator_norm
from .linops import CirculantOp, uniform_kernel
from .network import (FeatureDesign, LayerParams, NetworkParams,
                      build_feature_operator, build_layer_context,
                      network_forward)
from .prox import soft_threshold_dsigma, subgradient_masks

__all__ = [
    "Adjoint",
    "ParamGrads",
    "loss_and_grad",
    "layer_backward",
    "network_backward",
    "GradCheckReport",
    "gradient_check",
]


@dataclass
class Adjoint:
    """Adjoint state flowing backward between layers: t_x (N,), t_y (P,)."""

    t_x: np.ndarray
    t_y: np.ndarray = None


@dataclass
class ParamGrads:
    """Per-layer gradients: d_tau (K,), d_sigma (K,), d_L (K, P, N)."""

    d_tau: np.ndarray
    d_sigma: np.ndarray
    d_L: np.ndarray

    def all_finite(self):
        return (np.all(np.isfinite(self.d_tau))
                and np.all(np.isfinite(self.d_sigma))
                and np.all(np.isfinite(self.d_L)))


def loss_and_grad(x_hat, x_true, batch_count=None):
    """Mean squared error over the batch and its gradient in x_hat.

    ``batch_count`` overrides the divisor I (defaults to the number of
    samples present), so partial evaluations can still be normalized by
    the full batch size.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_hat.shape != x_true.shape:
        raise ValueError("shape mismatch %r vs %r" % (x_hat.shape, x_true.shape))
    count = (x_hat.shape[0] if x_hat.ndim == 2 else 1) if batch_count is None \
        else int(batch_count)
    diff = x_hat - x_true
    loss = float(np.sum(diff * diff)) / count
    return loss, (2.0 / count) * diff


def _apply_spectrum(spectrum, shape, vec):
    out = np.fft.ifft2(np.fft.fft2(vec.reshape(shape)) * spectrum)
    return out.real.ravel()


def layer_backward(params, op, z, cache, adj_out, position="middle"):
    """Reference single-sample adjoint of one layer.

    ``cache`` comes from :func:`pdunfold.network.layer_forward` on the same
    inputs.  ``adj_out`` carries the loss gradient with respect to this
    layer's outputs; a missing t_y (last layer) is treated as zero.
    Returns (adj_in, (d_tau, d_sigma, d_L)) with d_L masked to the support
    when the layer has one.
    """
    tau, sigma, L = params.tau, params.sigma, params.L
    z = np.asarray(z, dtype=float).ravel()
    gx_out = np.asarray(adj_out.t_x, dtype=float).ravel()
    if adj_out.t_y is None or position == "last":
        gy_out = np.zeros(L.shape[0])
    else:
        gy_out = np.asarray(adj_out.t_y, dtype=float).ravel()

    gain = op.gain_squared
    inv = 1.0 / (tau * gain + 1.0)
    inv_sq = inv * inv
    a = op.apply_adjoint(z.reshape(op.shape)).ravel()

    g_w1 = _apply_spectrum(inv, op.shape, gx_out)       # resolvent is symmetric
    t2 = L @ g_w1
    g_w2 = (sigma * tau) * t2
    shrink_mask, clip_mask = subgradient_masks(cache.pre_shrink, cache.pre_clip, sigma)
    g_v2 = shrink_mask * g_w2
    g_v3 = clip_mask * gy_out

    Lx = cache.pre_shrink - cache.y_in / sigma
    d_sigma = (-tau * float(t2 @ Lx)
               - float(g_v2 @ cache.y_in) / sigma ** 2
               + float(g_v3 @ Lx)
               + float(g_w2 @ soft_threshold_dsigma(cache.pre_shrink, sigma))
               + tau * float(t2 @ cache.shrunk))

    d_tau = (float(g_w1 @ a) - float(t2 @ cache.pre_clip)
             + float(gx_out @ _apply_spectrum(-gain * inv_sq, op.shape,
                                              cache.pre_primal))
             + sigma * float(gx_out @ _apply_spectrum(inv_sq, op.shape,
                                                      cache.shrink_backproj)))

    u = g_v2 + sigma * g_v3 - (tau * sigma) * t2
    gx_in = g_w1 + L.T @ u
    gy_in = -tau * t2 + g_v2 / sigma + g_v3
    d_L = np.outer(sigma * tau * cache.shrunk - tau * cache.pre_clip, g_w1) \
        + np.outer(u, cache.x_in)
    if params.support_mask is not None:
        d_L = np.where(params.support_mask, d_L, 0.0)
    return Adjoint(gx_in, gy_in), (d_tau, d_sigma, d_L)


def network_backward(net, caches, z, x_true, batch_count=None):
    """Gradient of the batch loss with respect to every layer's parameters.

    ``caches`` is the list returned by :func:`pdunfold.network.network_forward`
    on ``z``; ``x_true`` holds the clean targets.  Returns a
    :class:`ParamGrads` summed over the batch and divided by I.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x_true = np.atleast_2d(np.asarray(x_true, dtype=float))
    x_hat = np.atleast_2d(caches[-1].x_out)
    _, seed = loss_and_grad(x_hat, x_true, batch_count)

    kern = _kernels.backend()
    a = z @ net.op.dense_adjoint().T
    K, P, N = net.K, net.P, net.N
    grads = ParamGrads(np.zeros(K), np.zeros(K), np.zeros((K, P, N)))
    gx = seed
    gy = np.zeros((z.shape[0], P))
    for k in range(K - 1, -1, -1):
        params = net.layers[k]
        ctx = build_layer_context(params, net.op, with_grad=True)
        cache = caches[k]
        args = [np.atleast_2d(getattr(cache, name)) for name in
                ("x_in", "y_in", "pre_primal", "pre_shrink", "pre_clip",
                 "shrunk", "shrink_backproj")]
        gx, gy, d_tau, d_sigma, d_L = kern.backward_layer(
            ctx.L, ctx.tau, ctx.sigma, ctx.resolvent, ctx.d_resolvent,
            ctx.d_tau_resolvent, a, *args, gx, gy)
        if params.support_mask is not None:
            d_L = np.where(params.support_mask, d_L, 0.0)
        grads.d_tau[k] = d_tau
        grads.d_sigma[k] = d_sigma
        grads.d_L[k] = d_L
    return grads


# ---------------------------------------------------------------------------
# finite-difference validation harness

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep over random configurations."""

    passed: bool
    trials: int
    tol: float
    step: float
    max_rel: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    skipped_layers: int = 0
    noise_floor_passes: int = 0
    activity: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def summary_lines(self):
        lines = []
        for group in ("tau", "sigma", "L"):
            lines.append("%-6s checked %5d  max rel err %.3e" % (
                group, self.checked.get(group, 0), self.max_rel.get(group, 0.0)))
        lines.append("result: %s (%d trials, tol %.1e, %.1f s)" % (
            "PASS" if self.passed else "FAIL", self.trials, self.tol,
            self.wall_seconds))
        return lines


def _loss_at(net, z, x_true):
    x_hat, _ = network_forward(net, z)
    diff = x_hat - x_true
    return float(diff @ diff)


def _margins_ok(caches, layers, margin):
    for cache, params in zip(caches, layers):
        if np.min(np.abs(np.abs(cache.pre_shrink) - 1.0 / params.sigma)) <= margin:
            return False
        if np.min(np.abs(np.abs(cache.pre_clip) - 1.0)) <= margin:
            return False
    return True


def _draw_config(rng, op, design, K, margin, max_attempts=80):
    """Random parameters and data, redrawn until every activation point is
    at least ``margin`` away from its kink."""
    N = design.n
    for _ in range(max_attempts):
        layers = []
        for _k in range(K):
            std = rng.uniform(0.005, 0.02)
            L, mask = build_feature_operator(design, rng, std)
            norm = operator_norm(L)
            tau = rng.uniform(0.3, 1.2) / norm
            sigma = rng.uniform(0.3, 2.0) / norm
            layers.append(LayerParams(tau, sigma, L, mask))
        net = NetworkParams(layers, op, design)
        z = rng.uniform(5.0, 30.0) * rng.standard_normal(N)
        x_hat, caches = network_forward(net, z)
        if not _margins_ok(caches, layers, margin):
            continue
        # a small residual keeps |E| / |dE| modest, which keeps the
        # cancellation noise of central differences well below tolerance
        scale = max(1.0, float(np.sqrt(np.mean(x_hat ** 2))))
        x_true = x_hat + 0.005 * scale * rng.standard_normal(N)
        return net, z, x_true, caches
    raise RuntimeError("could not draw a kink-free configuration in %d attempts"
                       % max_attempts)


def gradient_check(seed=0, trials=100, layer_counts=(1, 2, 5), tol=1e-5,
                   step=1e-6, entries_per_layer=3, margin=5e-4,
                   patch_side=10, blur=3, inject_error=0.0):
    """Compare analytic gradients against central finite differences.

    For each trial a random network (depth cycling through
    ``layer_counts``), a random patch, and a nearby target are drawn with
    every activation point at least ``margin`` from its kink, so the loss
    is differentiable along the tested directions.  tau and sigma are
    checked for every layer; ``entries_per_layer`` L entries are sampled
    per layer from those whose analytic gradient is at least 1e-2 of the
    layer's largest (central differences with a fixed step cannot resolve
    entries far below that).  ``inject_error`` perturbs the analytic d_tau
    of layer 0 and exists so the harness can prove it catches corruption.

    Relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-12).  A
    comparison whose absolute discrepancy sits below the cancellation
    noise of the two loss evaluations (roughly eps * E / (2 * step), with
    a generous accumulation factor) counts as a pass regardless of the
    relative error, since central differences carry no information at
    that magnitude; such passes are counted separately in the report.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    op = CirculantOp(uniform_kernel(blur), (patch_side, patch_side))
    design = FeatureDesign(((5, 2, 30), (7, 3, 30), (patch_side, patch_side, 30)),
                           patch_side)
    report = GradCheckReport(passed=True, trials=trials, tol=tol, step=step,
                             max_rel={"tau": 0.0, "sigma": 0.0, "L": 0.0},
                             checked={"tau": 0, "sigma": 0, "L": 0})
    shrink_active = []
    clip_inactive = []

    def compare(group, trial, k, index, analytic, fd, noise_floor):
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)
        report.checked[group] += 1
        if rel > tol and abs(analytic - fd) <= noise_floor:
            report.noise_floor_passes += 1
            return
        report.max_rel[group] = max(report.max_rel[group], rel)
        if rel > tol:
            report.passed = False
            report.failures.append(dict(trial=trial, layer=k, group=group,
                                        index=index, analytic=analytic,
                                        fd=fd, rel=rel))

    for trial in range(trials):
        K = layer_counts[trial % len(layer_counts)]
        net, z, x_true, caches = _draw_config(rng, op, design, K, margin)
        grads = network_backward(net, caches, z, x_true, batch_count=1)
        if inject_error:
            grads.d_tau[0] *= 1.0 + inject_error
        for cache, params in zip(caches, net.layers):
            shrink_active.append(float(np.mean(
                np.abs(cache.pre_shrink) > 1.0 / params.sigma)))
            clip_inactive.append(float(np.mean(np.abs(cache.pre_clip) >= 1.0)))

        for k in range(K):
            for group in ("tau", "sigma"):
                base = getattr(net.layers[k], group)
                setattr(net.layers[k], group, base + step)
                e_hi = _loss_at(net, z, x_true)
                setattr(net.layers[k], group, base - step)
                e_lo = _loss_at(net, z, x_true)
                setattr(net.layers[k], group, base)
                fd = (e_hi - e_lo) / (2.0 * step)
                floor = 2048.0 * np.finfo(float).eps * max(e_hi, e_lo, 1.0) / (2.0 * step)
                analytic = grads.d_tau[k] if group == "tau" else grads.d_sigma[k]
                compare(group, trial, k, None, float(analytic), fd, floor)

            layer_grad = grads.d_L[k]
            cutoff = 1e-2 * np.max(np.abs(layer_grad))
            eligible = np.argwhere(np.abs(layer_grad) >= cutoff)
            if eligible.size == 0:
                report.skipped_layers += 1
                continue
            picks = rng.choice(eligible.shape[0],
                               min(entries_per_layer, eligible.shape[0]),
                               replace=False)
            L = net.layers[k].L
            for pick in picks:
                i, j = (int(v) for v in eligible[pick])
                base = L[i, j]
                L[i, j] = base + step
                e_hi = _loss_at(net, z, x_true)
                L[i, j] = base - step
                e_lo = _loss_at(net, z, x_true)
                L[i, j] = base
                fd = (e_hi - e_lo) / (2.0 * step)
                floor = 2048.0 * np.finfo(float).eps * max(e_hi, e_lo, 1.0) / (2.0 * step)
                compare("L", trial, k, (i, j), float(layer_grad[i, j]), fd, floor)

    report.activity = {
        "shrink_active_mean": float(np.mean(shrink_active)) if shrink_active else 0.0,
        "clip_inactive_mean": float(np.mean(clip_inactive)) if clip_inactive else 0.0,
    }
    report.wall_seconds = time.perf_counter() - start
    return report
