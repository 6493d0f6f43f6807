"""Mini-batch training of the unfolded network.

The loss is the mean squared reconstruction error over each batch; its
exact gradient comes from :mod:`pdunfold.backprop`.  Updates are plain SGD
or ADAM with one learning-rate multiplier per parameter group (tau, sigma,
L), a positivity clamp on the step sizes, and re-application of the
support mask after every L update.  Batches walk shuffled epochs over the
dataset.  All randomness flows from one seeded generator stored in the
training state, so runs are reproducible and a saved state resumes
bit-exactly.
"""

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .backprop import loss_and_grad, network_backward
from .cp import operator_norm
from .linops import CirculantOp, uniform_kernel
from .network import (FeatureDesign, LayerParams, NetworkParams,
                      build_feature_operator, network_forward)
from ._kernels import get_backend_name

__all__ = [
    "GradientError",
    "TrainConfig",
    "TrainState",
    "init_network",
    "init_state",
    "train_step",
    "train",
    "save_state",
    "load_state",
]


class GradientError(RuntimeError):
    """Raised when a step produces a non-finite gradient; state is unchanged."""


@dataclass
class TrainConfig:
    """Everything that defines a training run.

    ``design`` is the analysis-operator layout string; ``blur`` the uniform
    blur width of the data operator A.  ``base_lr`` is scaled per group by
    ``lr_tau`` / ``lr_sigma`` / ``lr_L``.  ``init_margin`` sets the initial
    step sizes tau = sigma = margin / ||L||, so the initialization satisfies
    the convergence condition tau * sigma * ||L||^2 = margin^2 < 1.
    """

    design: str = "f5s2n30+f7s3n30+f10s10n30"
    blur: int = 3
    K: int = 10
    batch_size: int = 200
    max_steps: int = 1000
    optimizer: str = "adam"
    base_lr: float = 1e-3
    lr_tau: float = 1.0
    lr_sigma: float = 1.0
    lr_L: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_std: float = 1e-2
    init_margin: float = 0.9
    seed: int = 0
    enforce_mask: bool = True
    positivity_floor: float = 1e-8
    checkpoint_interval: int = 100

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd, got %r" % self.optimizer)
        if self.K < 1 or self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("K, batch_size must be >= 1 and max_steps >= 0")
        if not 0.0 < self.init_margin < 1.0:
            raise ValueError("init_margin must lie in (0, 1)")
        for name in ("base_lr", "lr_tau", "lr_sigma", "lr_L", "init_std",
                     "positivity_floor"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise ValueError("unknown config key %r" % key)
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    """Mutable optimizer state; everything needed to resume a run."""

    config: TrainConfig
    net: NetworkParams
    step: int
    m_tau: np.ndarray
    v_tau: np.ndarray
    m_sigma: np.ndarray
    v_sigma: np.ndarray
    m_L: np.ndarray
    v_L: np.ndarray
    loss_history: list
    rng: np.random.Generator
    perm: np.ndarray
    cursor: int


def init_network(config, patch_side, rng=None):
    """Build the initial network: identical layers, tied random L.

    All layers share the same draw; tau = sigma = init_margin / ||L||, so
    tau * sigma * ||L||^2 < 1 holds at initialization (training may later
    leave that region, which is intended).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    op = CirculantOp(uniform_kernel(config.blur), (patch_side, patch_side))
    design = FeatureDesign.from_string(config.design, patch_side)
    L, mask = build_feature_operator(design, rng, config.init_std)
    norm = operator_norm(L)
    if norm == 0:
        raise ValueError("initial analysis operator is zero")
    step = config.init_margin / norm
    assert step * step * norm ** 2 < 1.0
    keep = mask if config.enforce_mask else None
    layers = [LayerParams(step, step, L.copy(),
                          None if keep is None else keep.copy())
              for _ in range(config.K)]
    return NetworkParams(layers, op, design)


def init_state(config, patch_side, n_samples):
    if n_samples < config.batch_size:
        raise ValueError("dataset has %d samples, batch size is %d"
                         % (n_samples, config.batch_size))
    rng = np.random.default_rng(config.seed)
    net = init_network(config, patch_side, rng)
    K, P, N = net.K, net.P, net.N
    return TrainState(
        config=config, net=net, step=0,
        m_tau=np.zeros(K), v_tau=np.zeros(K),
        m_sigma=np.zeros(K), v_sigma=np.zeros(K),
        m_L=np.zeros((K, P, N)), v_L=np.zeros((K, P, N)),
        loss_history=[], rng=rng,
        perm=rng.permutation(n_samples), cursor=0)


def _next_batch_indices(state, n_samples):
    b = state.config.batch_size
    if state.cursor + b > len(state.perm):
        state.perm = state.rng.permutation(n_samples)
        state.cursor = 0
    idx = state.perm[state.cursor:state.cursor + b]
    state.cursor += b
    return idx


def _check_finite(grads, step):
    for k in range(grads.d_tau.shape[0]):
        for name, value in (("tau", grads.d_tau[k]), ("sigma", grads.d_sigma[k])):
            if not np.isfinite(value):
                raise GradientError(
                    "non-finite %s gradient in layer %d at step %d" % (name, k, step))
        if not np.all(np.isfinite(grads.d_L[k])):
            raise GradientError(
                "non-finite L gradient in layer %d at step %d" % (k, step))


def train_step(state, clean, degraded):
    """One optimizer step on the given batch; returns the batch loss.

    The state is mutated in place only after the gradient is verified
    finite; a :class:`GradientError` leaves it untouched.
    """
    config = state.config
    clean = np.atleast_2d(np.asarray(clean, dtype=float))
    degraded = np.atleast_2d(np.asarray(degraded, dtype=float))
    x_hat, caches = network_forward(state.net, degraded)
    loss, _ = loss_and_grad(x_hat, clean)
    grads = network_backward(state.net, caches, degraded, clean)
    _check_finite(grads, state.step)

    t = state.step + 1
    if config.optimizer == "adam":
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t

        def adam(m, v, g, lr):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            return lr * (m / corr1) / (np.sqrt(v / corr2) + eps)

        d_tau = adam(state.m_tau, state.v_tau, grads.d_tau,
                     config.base_lr * config.lr_tau)
        d_sigma = adam(state.m_sigma, state.v_sigma, grads.d_sigma,
                       config.base_lr * config.lr_sigma)
        d_L = adam(state.m_L, state.v_L, grads.d_L,
                   config.base_lr * config.lr_L)
    else:
        d_tau = config.base_lr * config.lr_tau * grads.d_tau
        d_sigma = config.base_lr * config.lr_sigma * grads.d_sigma
        d_L = config.base_lr * config.lr_L * grads.d_L

    floor = config.positivity_floor
    for k, layer in enumerate(state.net.layers):
        layer.tau = max(layer.tau - float(d_tau[k]), floor)
        layer.sigma = max(layer.sigma - float(d_sigma[k]), floor)
        layer.L -= d_L[k]
        if layer.support_mask is not None:
            layer.L[~layer.support_mask] = 0.0
    state.step += 1
    state.loss_history.append(float(loss))
    return float(loss)


def train(config, dataset, state=None, on_checkpoint=None):
    """Run up to ``config.max_steps`` optimizer steps over the dataset.

    ``dataset`` needs ``clean`` and ``degraded`` (S, N) arrays and a
    ``patch_side``.  Pass a loaded ``state`` to resume; its own config
    wins over the ``config`` argument.  ``on_checkpoint(state, window_loss,
    is_best)`` fires every ``checkpoint_interval`` steps and at the end.

    Returns (best_net, report): the network snapshot at the best
    checkpoint-window loss of this run, and a dict with the loss history
    and timing.
    """
    start = time.perf_counter()
    if state is None:
        state = init_state(config, dataset.patch_side, dataset.clean.shape[0])
    config = state.config
    ps = state.net.design.patch_side
    if dataset.patch_side != ps:
        raise ValueError("dataset patch side %d does not match network %d"
                         % (dataset.patch_side, ps))
    n = dataset.clean.shape[0]
    best_loss = np.inf
    best_net = state.net.copy()
    best_step = state.step
    interval = config.checkpoint_interval

    while state.step < config.max_steps:
        idx = _next_batch_indices(state, n)
        train_step(state, dataset.clean[idx], dataset.degraded[idx])
        at_boundary = state.step % interval == 0 or state.step >= config.max_steps
        if at_boundary:
            window = state.loss_history[-min(interval, len(state.loss_history)):]
            window_loss = float(np.mean(window))
            is_best = window_loss < best_loss
            if is_best:
                best_loss = window_loss
                best_net = state.net.copy()
                best_step = state.step
            if on_checkpoint is not None:
                on_checkpoint(state, window_loss, is_best)

    report = {
        "steps_run": state.step,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
        "best_window_loss": None if not np.isfinite(best_loss) else best_loss,
        "best_step": best_step,
        "wall_seconds": time.perf_counter() - start,
        "backend": get_backend_name(),
        "config": config.to_dict(),
        "loss_history": list(state.loss_history),
    }
    return best_net, report


def save_state(state, path):
    """Serialize a training state to npz (resumable, bit-exact)."""
    net = state.net
    masks = [l.support_mask for l in net.layers]
    has_mask = masks[0] is not None
    np.savez(
        path,
        format_version=np.int64(1),
        config_json=json.dumps(state.config.to_dict()),
        patch_side=np.int64(net.design.patch_side),
        kernel=net.op.kernel,
        design_blocks=np.asarray(net.design.blocks, dtype=np.int64),
        tau=np.asarray([l.tau for l in net.layers]),
        sigma=np.asarray([l.sigma for l in net.layers]),
        L=np.stack([l.L for l in net.layers]),
        has_mask=np.int64(has_mask),
        mask=(np.stack(masks).astype(np.uint8) if has_mask
              else np.zeros((net.K, net.P, net.N), dtype=np.uint8)),
        step=np.int64(state.step),
        m_tau=state.m_tau, v_tau=state.v_tau,
        m_sigma=state.m_sigma, v_sigma=state.v_sigma,
        m_L=state.m_L, v_L=state.v_L,
        loss_history=np.asarray(state.loss_history),
        rng_json=json.dumps(state.rng.bit_generator.state),
        perm=state.perm,
        cursor=np.int64(state.cursor),
    )


def load_state(path):
    with np.load(path, allow_pickle=False) as data:
        if int(data["format_version"]) != 1:
            raise ValueError("unsupported training state version")
        config = TrainConfig.from_dict(json.loads(str(data["config_json"])))
        ps = int(data["patch_side"])
        design = FeatureDesign(tuple(map(tuple, data["design_blocks"])), ps)
        op = CirculantOp(data["kernel"], (ps, ps))
        has_mask = bool(data["has_mask"])
        tau, sigma, L = data["tau"], data["sigma"], data["L"]
        mask = data["mask"].astype(bool) if has_mask else None
        layers = [LayerParams(tau[k], sigma[k], L[k],
                              None if mask is None else mask[k])
                  for k in range(L.shape[0])]
        net = NetworkParams(layers, op, design)
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(data["rng_json"]))
        return TrainState(
            config=config, net=net, step=int(data["step"]),
            m_tau=data["m_tau"].copy(), v_tau=data["v_tau"].copy(),
            m_sigma=data["m_sigma"].copy(), v_sigma=data["v_sigma"].copy(),
            m_L=data["m_L"].copy(), v_L=data["v_L"].copy(),
            loss_history=[float(v) for v in data["loss_history"]],
            rng=rng, perm=data["perm"].copy(), cursor=int(data["cursor"]))
