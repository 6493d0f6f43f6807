"""The unfolded primal-dual network: parameter containers and forward pass.

Each layer applies one relaxation-free primal-dual iteration for the
analysis-l1 restoration objective, with its own step sizes (tau, sigma) and
its own analysis operator L.  Writing the iteration in its split form, a
layer maps (x, y) to (x_out, y_out):

    v1 = x + tau * A^T z - tau * L^T (sigma * L x + y)
    v2 = L x + y / sigma
    v3 = sigma * L x + y
    x_out = (tau * A^T A + I)^{-1} (v1 + sigma * tau * L^T soft(v2, 1/sigma))
    y_out = clip(v3, [-1, 1])

The first layer starts from x = A^T z, y = 0; the last layer's dual output
is dropped.  The per-sample reference implementation here uses the FFT
operators directly; batched evaluation goes through the selected kernel
backend with dense precomputed resolvents (grids are patch-sized, so the
dense forms are small).
"""

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .linops import CirculantOp, Resolvent, dense_from_spectrum
from .prox import prox_l1, prox_l1_conjugate

__all__ = [
    "FeatureDesign",
    "LayerParams",
    "NetworkParams",
    "LayerCache",
    "LayerContext",
    "build_feature_operator",
    "build_layer_context",
    "layer_forward",
    "network_forward",
    "save_checkpoint",
    "load_checkpoint",
]

_BLOCK_RE = re.compile(r"^f(\d+)s(\d+)n(\d+)$")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureDesign:
    """Footprint layout of the analysis operator on a square patch.

    ``blocks`` is a tuple of (size, stride, channels) triples.  Each block
    contributes ``channels * q**2`` rows, where q = (patch_side - size) //
    stride + 1 is the number of footprint positions per axis.  Rows are
    ordered block by block, then channel by channel, then position in
    row-major order.
    """

    blocks: tuple
    patch_side: int

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b)
                                                 for b in self.blocks))
        object.__setattr__(self, "patch_side", int(self.patch_side))
        if self.patch_side < 1:
            raise ValueError("patch_side must be >= 1")
        if not self.blocks:
            raise ValueError("design needs at least one block")
        for f, s, n in self.blocks:
            if f < 1 or f > self.patch_side:
                raise ValueError("footprint size %d outside [1, %d]" % (f, self.patch_side))
            if s < 1:
                raise ValueError("stride must be >= 1, got %d" % s)
            if n < 1:
                raise ValueError("channel count must be >= 1, got %d" % n)

    @classmethod
    def from_string(cls, text, patch_side):
        """Parse a compact layout such as ``f5s2n30+f7s3n30+f10s10n30``."""
        blocks = []
        for chunk in text.strip().split("+"):
            m = _BLOCK_RE.match(chunk.strip())
            if m is None:
                raise ValueError("bad design block %r" % chunk)
            blocks.append(tuple(int(g) for g in m.groups()))
        return cls(tuple(blocks), patch_side)

    def to_string(self):
        return "+".join("f%ds%dn%d" % b for b in self.blocks)

    def positions(self, size, stride):
        """Top-left corners of the footprints for one block, row-major."""
        q = (self.patch_side - size) // stride + 1
        axis = [i * stride for i in range(q)]
        return [(r, c) for r in axis for c in axis]

    def rows(self):
        """Total number of analysis rows P."""
        total = 0
        for f, s, n in self.blocks:
            q = (self.patch_side - f) // s + 1
            total += n * q * q
        return total

    @property
    def n(self):
        return self.patch_side * self.patch_side


def build_feature_operator(design, rng, std=1e-2):
    """Draw an analysis operator matching ``design``.

    Each row has an f x f footprint at its block position filled with
    i.i.d. normal(0, std**2) entries; everything off the footprint is zero.
    Returns (L, support_mask) with L of shape (P, N) and the mask boolean.
    """
    if std <= 0 or not np.isfinite(std):
        raise ValueError("std must be positive, got %r" % std)
    ps = design.patch_side
    P, N = design.rows(), design.n
    L = np.zeros((P, N))
    mask = np.zeros((P, N), dtype=bool)
    row = 0
    for f, s, n in design.blocks:
        positions = design.positions(f, s)
        for _channel in range(n):
            for r0, c0 in positions:
                patch_rows = np.arange(r0, r0 + f)
                cols = (patch_rows[:, None] * ps + np.arange(c0, c0 + f)[None, :]).ravel()
                mask[row, cols] = True
                L[row, cols] = rng.normal(0.0, std, f * f)
                row += 1
    assert row == P
    return L, mask


@dataclass
class LayerParams:
    """Learnable parameters of one layer.

    ``support_mask`` marks the entries of L that are free parameters; when
    present, L must vanish off the mask and gradients are masked to match.
    """

    tau: float
    sigma: float
    L: np.ndarray
    support_mask: np.ndarray = None

    def __post_init__(self):
        for name in ("tau", "sigma"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ValueError("%s must be positive and finite, got %r" % (name, value))
            setattr(self, name, value)
        self.L = np.ascontiguousarray(self.L, dtype=float)
        if self.L.ndim != 2:
            raise ValueError("L must be 2D")
        if not np.all(np.isfinite(self.L)):
            raise ValueError("L has non-finite entries")
        if self.support_mask is not None:
            self.support_mask = np.asarray(self.support_mask, dtype=bool)
            if self.support_mask.shape != self.L.shape:
                raise ValueError("support_mask shape %r does not match L %r"
                                 % (self.support_mask.shape, self.L.shape))
            if np.any(self.L[~self.support_mask] != 0.0):
                raise ValueError("L has nonzero entries outside the support mask")

    def copy(self):
        mask = None if self.support_mask is None else self.support_mask.copy()
        return LayerParams(self.tau, self.sigma, self.L.copy(), mask)


@dataclass
class NetworkParams:
    """The full network: K layers plus the shared blur operator and design."""

    layers: list
    op: CirculantOp
    design: FeatureDesign

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        P, N = self.design.rows(), self.design.n
        if self.op.shape != (self.design.patch_side, self.design.patch_side):
            raise ValueError("operator grid %r does not match patch side %d"
                             % (self.op.shape, self.design.patch_side))
        for k, layer in enumerate(self.layers):
            if layer.L.shape != (P, N):
                raise ValueError("layer %d has L shape %r, expected %r"
                                 % (k, layer.L.shape, (P, N)))

    @property
    def K(self):
        return len(self.layers)

    @property
    def P(self):
        return self.design.rows()

    @property
    def N(self):
        return self.design.n

    def copy(self):
        return NetworkParams([l.copy() for l in self.layers], self.op, self.design)


@dataclass
class LayerCache:
    """Everything a layer's backward pass needs from its forward pass.

    Field shapes mirror the input batch: (N,)/(P,) vectors for a single
    sample, (B, N)/(B, P) for batched evaluation.  ``pre_primal`` is also
    the post-activation of the identity branch; ``shrink_backproj`` is
    L^T applied to the shrunk coefficients, reused by both passes.
    """

    x_in: np.ndarray
    y_in: np.ndarray
    pre_primal: np.ndarray
    pre_shrink: np.ndarray
    pre_clip: np.ndarray
    shrunk: np.ndarray
    clipped: np.ndarray
    shrink_backproj: np.ndarray
    x_out: np.ndarray
    y_out: np.ndarray = None


@dataclass
class LayerContext:
    """Dense per-layer matrices for the batched kernel backends.

    ``resolvent`` realizes (tau*A^T A + I)^{-1}; the two derivative matrices
    realize d(resolvent)/d(tau) and d(tau*resolvent)/d(tau), which are
    diagonal in the Fourier basis with entries -|lam|^2/(tau*|lam|^2+1)^2
    and 1/(tau*|lam|^2+1)^2.
    """

    tau: float
    sigma: float
    L: np.ndarray
    resolvent: np.ndarray
    d_resolvent: np.ndarray = None
    d_tau_resolvent: np.ndarray = None


def build_layer_context(params, op, with_grad=False):
    gain = op.gain_squared
    inv = 1.0 / (params.tau * gain + 1.0)
    resolvent = dense_from_spectrum(inv)
    d_resolvent = d_tau_resolvent = None
    if with_grad:
        inv_sq = inv * inv
        d_resolvent = dense_from_spectrum(-gain * inv_sq)
        d_tau_resolvent = dense_from_spectrum(inv_sq)
    return LayerContext(params.tau, params.sigma, params.L, resolvent,
                        d_resolvent, d_tau_resolvent)


def layer_forward(params, op, z, x, y=None, position="middle"):
    """Reference single-sample forward map of one layer.

    ``z`` is the flat degraded patch, ``x``/``y`` the incoming primal and
    dual states.  ``position`` is one of {"first", "middle", "last"}: the
    first layer ignores y (treated as zero), the last returns no dual
    output.  Returns (x_out, y_out, cache).
    """
    if position not in ("first", "middle", "last"):
        raise ValueError("position must be first/middle/last, got %r" % position)
    tau, sigma, L = params.tau, params.sigma, params.L
    z = np.asarray(z, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if position == "first" or y is None:
        y = np.zeros(L.shape[0])
    else:
        y = np.asarray(y, dtype=float).ravel()
    a = op.apply_adjoint(z.reshape(op.shape)).ravel()
    Lx = L @ x
    v3 = sigma * Lx + y
    v2 = Lx + y / sigma
    v1 = x + tau * a - tau * (L.T @ v3)
    w2 = prox_l1(v2, 1.0 / sigma)
    w3 = prox_l1_conjugate(v3, sigma)
    backproj = L.T @ w2
    x_out = Resolvent(tau, op).apply(
        (v1 + sigma * tau * backproj).reshape(op.shape)).ravel()
    y_out = None if position == "last" else w3
    cache = LayerCache(x_in=x, y_in=y, pre_primal=v1, pre_shrink=v2,
                       pre_clip=v3, shrunk=w2, clipped=w3,
                       shrink_backproj=backproj, x_out=x_out, y_out=y_out)
    return x_out, y_out, cache


def network_forward(net, z, with_caches=True):
    """Full forward pass; returns (x_hat, caches).

    ``z`` is a flat degraded patch (N,) or a batch (B, N).  The input state
    is x = A^T z, y = 0.  Caches hold batched arrays matching the input
    shape and feed :func:`pdunfold.backprop.network_backward`; pass
    ``with_caches=False`` for inference to skip retaining them (caches
    comes back as None).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.ascontiguousarray(np.atleast_2d(z))
    if zb.shape[1] != net.N:
        raise ValueError("z has %d entries per sample, expected %d"
                         % (zb.shape[1], net.N))
    kern = _kernels.backend()
    adj = net.op.dense_adjoint()
    a = zb @ adj.T
    x = a.copy()
    y = np.zeros((zb.shape[0], net.P))
    caches = [] if with_caches else None
    for k, params in enumerate(net.layers):
        ctx = build_layer_context(params, net.op)
        x_out, y_out, v1, v2, v3, w2, backproj = kern.forward_layer(
            ctx.L, ctx.tau, ctx.sigma, ctx.resolvent, a, x, y)
        last = k == net.K - 1
        if with_caches:
            cache = LayerCache(x_in=x, y_in=y, pre_primal=v1, pre_shrink=v2,
                               pre_clip=v3, shrunk=w2, clipped=y_out,
                               shrink_backproj=backproj, x_out=x_out,
                               y_out=None if last else y_out)
            caches.append(cache)
        x, y = x_out, y_out
    x_hat = x[0] if single else x
    if single and with_caches:
        for cache in caches:
            for name in ("x_in", "y_in", "pre_primal", "pre_shrink", "pre_clip",
                         "shrunk", "clipped", "shrink_backproj", "x_out", "y_out"):
                value = getattr(cache, name)
                if value is not None:
                    setattr(cache, name, value[0])
    return x_hat, caches


def save_checkpoint(net, path, meta=None):
    """Serialize a network to a versioned npz container.

    Layout (all float64 unless noted): ``format_version`` int, ``patch_side``
    int, ``kernel`` (kh, kw) blur taps, ``design_blocks`` (nblocks, 3) int,
    ``tau``/``sigma`` (K,), ``L`` (K, P, N), ``has_mask`` int, ``mask``
    (K, P, N) uint8, ``meta_json`` str.
    """
    masks = [layer.support_mask for layer in net.layers]
    has_mask = masks[0] is not None
    if any((m is not None) != has_mask for m in masks):
        raise ValueError("layers disagree on support mask presence")
    K, P, N = net.K, net.P, net.N
    L = np.stack([layer.L for layer in net.layers])
    mask = (np.stack([m for m in masks]).astype(np.uint8) if has_mask
            else np.ones((K, P, N), dtype=np.uint8))
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        patch_side=np.int64(net.design.patch_side),
        kernel=net.op.kernel,
        design_blocks=np.asarray(net.design.blocks, dtype=np.int64),
        tau=np.asarray([l.tau for l in net.layers]),
        sigma=np.asarray([l.sigma for l in net.layers]),
        L=L,
        has_mask=np.int64(has_mask),
        mask=mask,
        meta_json=json.dumps(meta or {}),
    )


def load_checkpoint(path):
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns (net, meta).  Rejects unknown format versions.
    """
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version %d" % version)
        ps = int(data["patch_side"])
        design = FeatureDesign(tuple(map(tuple, data["design_blocks"])), ps)
        op = CirculantOp(data["kernel"], (ps, ps))
        has_mask = bool(data["has_mask"])
        tau, sigma, L = data["tau"], data["sigma"], data["L"]
        mask = data["mask"].astype(bool) if has_mask else None
        layers = [LayerParams(tau[k], sigma[k], L[k],
                              None if mask is None else mask[k])
                  for k in range(L.shape[0])]
        meta = json.loads(str(data["meta_json"]))
    return NetworkParams(layers, op, design), meta
