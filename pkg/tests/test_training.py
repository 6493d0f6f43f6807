import numpy as np
import pytest

from pdunfold.cp import operator_norm
from pdunfold.imaging import DegradationSpec, build_pair_set, synthetic_image
from pdunfold.network import network_forward
from pdunfold.training import (GradientError, TrainConfig, init_network,
                               init_state, load_state, save_state, train,
                               train_step)

SMALL = dict(design="f5s2n6", blur=3, K=2, batch_size=4, max_steps=50,
             base_lr=2e-3, seed=3, checkpoint_interval=10)


def _toy_set(count=20, seed=0):
    spec = DegradationSpec(blur=3, alpha=50.0, seed=100 + seed)
    imgs = [synthetic_image(90, seed=30 + seed), synthetic_image(90, seed=31 + seed)]
    return build_pair_set(imgs, spec, count, 10, pipeline="global", seed=seed)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="adamw")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(init_margin=1.0)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig.from_dict({"K": 4, "seed": 9})
    assert cfg.K == 4 and cfg.seed == 9
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_init_network_constraint_margin_sweep():
    for margin in (0.5, 0.9, 0.99):
        cfg = TrainConfig(**{**SMALL, "init_margin": margin})
        net = init_network(cfg, 10)
        norm = operator_norm(net.layers[0].L)
        for layer in net.layers:
            assert layer.tau * layer.sigma * norm ** 2 < 1.0
            assert abs(layer.tau * layer.sigma * norm ** 2 - margin ** 2) < 1e-9


def test_init_network_identical_layers_and_seeding():
    cfg = TrainConfig(**SMALL)
    a = init_network(cfg, 10)
    b = init_network(cfg, 10)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.L, lb.L)
        assert la.tau == lb.tau and la.sigma == lb.sigma
    first = a.layers[0]
    for layer in a.layers[1:]:
        assert np.array_equal(layer.L, first.L)


def test_zero_gradient_batch_leaves_params(rng):
    cfg = TrainConfig(**SMALL)
    ds = _toy_set()
    state = init_state(cfg, 10, len(ds))
    z = ds.degraded[:4]
    x_hat, _ = network_forward(state.net, z)
    before = state.net.copy()
    loss = train_step(state, x_hat, z)  # clean := current output, grads vanish
    assert loss == 0.0
    for la, lb in zip(before.layers, state.net.layers):
        assert la.tau == lb.tau and la.sigma == lb.sigma
        assert np.array_equal(la.L, lb.L)


def test_zero_gradient_batch_sgd(rng):
    cfg = TrainConfig(**{**SMALL, "optimizer": "sgd"})
    ds = _toy_set()
    state = init_state(cfg, 10, len(ds))
    z = ds.degraded[:4]
    x_hat, _ = network_forward(state.net, z)
    before = state.net.copy()
    train_step(state, x_hat, z)
    for la, lb in zip(before.layers, state.net.layers):
        assert la.tau == lb.tau and np.array_equal(la.L, lb.L)


def test_singleton_batch_and_smoke_descent():
    ds = _toy_set()
    cfg = TrainConfig(**{**SMALL, "batch_size": 1, "max_steps": 1})
    state = init_state(cfg, 10, len(ds))
    loss = train_step(state, ds.clean[:1], ds.degraded[:1])
    assert np.isfinite(loss)

    cfg = TrainConfig(**{**SMALL, "design": "f5s2n30+f7s3n30+f10s10n30",
                         "base_lr": 5e-3, "max_steps": 200})
    best, report = train(cfg, ds)
    h = np.asarray(report["loss_history"])
    assert h[-1] < h[0]
    # descent on average: the first and last 50-step windows
    assert h[-50:].mean() < h[:50].mean()


def test_determinism_same_seed():
    ds = _toy_set()
    cfg = TrainConfig(**SMALL)
    _, r1 = train(cfg, ds)
    _, r2 = train(cfg, ds)
    assert r1["loss_history"] == r2["loss_history"]


def test_max_steps_zero_returns_init():
    ds = _toy_set()
    cfg = TrainConfig(**{**SMALL, "max_steps": 0})
    best, report = train(cfg, ds)
    ref = init_network(cfg, 10)
    for la, lb in zip(best.layers, ref.layers):
        assert np.array_equal(la.L, lb.L)
    assert report["final_loss"] is None and report["steps_run"] == 0


def test_positivity_clamp():
    ds = _toy_set()
    cfg = TrainConfig(**{**SMALL, "optimizer": "sgd", "base_lr": 1e6,
                         "max_steps": 3})
    state = init_state(cfg, 10, len(ds))
    try:
        train(None, ds, state=state)
    except GradientError:
        pass  # a huge rate may blow up later steps; the clamp check stands
    for layer in state.net.layers:
        assert layer.tau >= cfg.positivity_floor
        assert layer.sigma >= cfg.positivity_floor


def test_mask_enforced_every_step():
    ds = _toy_set()
    cfg = TrainConfig(**{**SMALL, "max_steps": 30})
    state = init_state(cfg, 10, len(ds))
    train(None, ds, state=state)
    for layer in state.net.layers:
        assert np.all(layer.L[~layer.support_mask] == 0.0)


def test_gradient_error_names_layer_and_leaves_state():
    ds = _toy_set()
    cfg = TrainConfig(**SMALL)
    state = init_state(cfg, 10, len(ds))
    state.net.layers[1].L[0, 0] = np.nan
    step_before = state.step
    with pytest.raises(GradientError, match="layer"):
        train_step(state, ds.clean[:4], ds.degraded[:4])
    assert state.step == step_before
    assert state.loss_history == []


def test_state_roundtrip_resumes_identically(tmp_path):
    ds = _toy_set()
    full_cfg = TrainConfig(**{**SMALL, "max_steps": 40})
    _, ref = train(full_cfg, ds)

    half_cfg = TrainConfig(**{**SMALL, "max_steps": 20})
    state = init_state(half_cfg, 10, len(ds))
    train(None, ds, state=state)
    path = tmp_path / "state.npz"
    save_state(state, path)
    resumed = load_state(path)
    resumed.config = TrainConfig(**{**SMALL, "max_steps": 40})
    train(None, ds, state=resumed)
    assert resumed.loss_history == ref["loss_history"]


def test_dataset_smaller_than_batch_rejected():
    ds = _toy_set(count=2)
    cfg = TrainConfig(**SMALL)
    with pytest.raises(ValueError):
        init_state(cfg, 10, len(ds))
