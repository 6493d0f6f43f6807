import numpy as np
import pytest

from pdunfold.cp import CPProblem, CPSettings, cp_iterate, operator_norm
from pdunfold.linops import CirculantOp, uniform_kernel
from pdunfold.network import (FeatureDesign, LayerParams, NetworkParams,
                              build_feature_operator, layer_forward,
                              load_checkpoint, network_forward,
                              save_checkpoint)

from oracles import feature_footprints

FULL_DESIGN = "f5s2n30+f7s3n30+f10s10n30"


def _random_net(rng, K=3, design_text="f5s2n8", ps=10, blur=3, std=0.01):
    op = CirculantOp(uniform_kernel(blur), (ps, ps))
    design = FeatureDesign.from_string(design_text, ps)
    layers = []
    for _ in range(K):
        L, mask = build_feature_operator(design, rng, std)
        norm = operator_norm(L)
        step = float(rng.uniform(0.3, 0.9)) / norm
        layers.append(LayerParams(step, step, L, mask))
    return NetworkParams(layers, op, design)


def test_design_parse_roundtrip():
    design = FeatureDesign.from_string(FULL_DESIGN, 10)
    assert design.blocks == ((5, 2, 30), (7, 3, 30), (10, 10, 30))
    assert design.to_string() == FULL_DESIGN
    assert design.rows() == 420
    assert design.n == 100


def test_design_rejects_bad_strings():
    for text in ("", "f5s2", "f11s2n3", "f5s0n3", "g5s2n3"):
        with pytest.raises(ValueError):
            FeatureDesign.from_string(text, 10)


def test_feature_operator_footprints(rng):
    design = FeatureDesign.from_string(FULL_DESIGN, 10)
    L, mask = build_feature_operator(design, rng)
    assert L.shape == (420, 100) and mask.shape == (420, 100)
    expected = feature_footprints(design.blocks, 10)
    assert len(expected) == 420
    for i, cols in enumerate(expected):
        assert set(np.nonzero(mask[i])[0]) == set(cols)
        assert np.all(L[i][~mask[i]] == 0.0)


def test_feature_operator_deterministic():
    design = FeatureDesign.from_string("f5s2n4", 10)
    a, _ = build_feature_operator(design, np.random.default_rng(5))
    b, _ = build_feature_operator(design, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_feature_rows_independent(rng):
    # two rows sharing a footprint carry independent draws
    design = FeatureDesign.from_string("f10s10n2", 10)
    L, _ = build_feature_operator(design, rng)
    assert L.shape == (2, 100)
    assert not np.allclose(L[0], L[1])


def test_layer_params_validation(rng):
    L = rng.standard_normal((4, 9))
    with pytest.raises(ValueError):
        LayerParams(-0.1, 1.0, L)
    with pytest.raises(ValueError):
        LayerParams(0.5, 0.0, L)
    mask = np.zeros((4, 9), dtype=bool)
    with pytest.raises(ValueError):
        LayerParams(0.5, 0.5, L, mask)  # nonzero outside mask


def test_unrolling_matches_cp_iterations(rng):
    """Tied-parameter forward pass is exactly the solver with theta = 0."""
    for K in (1, 3, 10):
        ps = 10
        op = CirculantOp(uniform_kernel(3), (ps, ps))
        design = FeatureDesign.from_string("f5s2n6", ps)
        L, mask = build_feature_operator(design, rng, 0.02)
        norm = operator_norm(L)
        tau = 0.8 / norm
        sigma = 0.9 / norm
        layers = [LayerParams(tau, sigma, L.copy(), mask.copy())
                  for _ in range(K)]
        net = NetworkParams(layers, op, design)
        z = rng.uniform(0, 30, size=ps * ps)

        x_net, _ = network_forward(net, z)

        problem = CPProblem(op, z, L)
        settings = CPSettings(tau=tau, sigma=sigma, theta=0.0)
        x = op.apply_adjoint(z.reshape(ps, ps)).ravel()
        y = np.zeros(L.shape[0])
        x_bar = x.copy()
        for _ in range(K):
            x, y, x_bar = cp_iterate(problem, settings, (x, y, x_bar))
        assert np.max(np.abs(x_net - x)) < 1e-10


def test_layer_forward_positions(rng):
    net = _random_net(rng, K=2)
    z = rng.uniform(0, 20, size=100)
    x0 = net.op.apply_adjoint(z.reshape(10, 10)).ravel()
    x1, y1, _ = layer_forward(net.layers[0], net.op, z, x0, None,
                              position="first")
    x2, y2, _ = layer_forward(net.layers[1], net.op, z, x1, y1,
                              position="last")
    assert y2 is None
    x_net, _ = network_forward(net, z)
    assert np.max(np.abs(x_net - x2)) < 1e-12


def test_network_forward_batched_consistency(rng):
    net = _random_net(rng, K=3)
    Z = rng.uniform(0, 20, size=(7, 100))
    batch, _ = network_forward(net, Z)
    singles = np.stack([network_forward(net, z)[0] for z in Z])
    assert np.max(np.abs(batch - singles)) < 1e-11


def test_network_forward_no_caches(rng):
    net = _random_net(rng, K=2)
    z = rng.uniform(0, 20, size=(3, 100))
    x_a, caches = network_forward(net, z)
    x_b, none_caches = network_forward(net, z, with_caches=False)
    assert none_caches is None
    assert np.array_equal(x_a, x_b)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = _random_net(rng, K=2)
    path = tmp_path / "net.npz"
    save_checkpoint(net, path, meta={"note": "unit"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "unit"}
    assert loaded.K == net.K
    for a, b in zip(net.layers, loaded.layers):
        assert a.tau == b.tau and a.sigma == b.sigma
        assert np.array_equal(a.L, b.L)
        assert np.array_equal(a.support_mask, b.support_mask)
    z = rng.uniform(0, 20, size=100)
    assert np.array_equal(network_forward(net, z)[0],
                          network_forward(loaded, z)[0])
