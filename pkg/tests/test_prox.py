import numpy as np

from pdunfold.prox import (prox_l1, prox_l1_conjugate, soft_threshold_dsigma,
                           subgradient_masks)

from oracles import naive_soft_threshold


def test_soft_threshold_matches_naive(rng):
    v = rng.uniform(-5, 5, size=200)
    for t in (0.1, 1.0, 2.5):
        assert np.max(np.abs(prox_l1(v, t) - naive_soft_threshold(v, t))) < 1e-15


def test_clip_is_projection(rng):
    v = rng.uniform(-4, 4, size=500)
    out = prox_l1_conjugate(v, 0.7)
    assert np.all(out >= -1.0) and np.all(out <= 1.0)
    inside = np.abs(v) <= 1.0
    assert np.array_equal(out[inside], v[inside])


def test_moreau_identity(rng):
    # prox of the conjugate from prox of the norm, elementwise
    for _ in range(1000):
        sigma = float(rng.uniform(0.05, 5.0))
        v = rng.uniform(-6, 6, size=17)
        lhs = prox_l1_conjugate(v, sigma)
        rhs = v - sigma * prox_l1(v / sigma, 1.0 / sigma)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_prox_nonexpansive(rng):
    a = rng.uniform(-3, 3, size=300)
    b = rng.uniform(-3, 3, size=300)
    assert np.linalg.norm(prox_l1(a, 0.8) - prox_l1(b, 0.8)) <= np.linalg.norm(a - b) + 1e-12
    assert np.linalg.norm(prox_l1_conjugate(a, 2.0) - prox_l1_conjugate(b, 2.0)) \
        <= np.linalg.norm(a - b) + 1e-12


def test_subgradient_masks_strict(rng):
    sigma = 2.0
    thr = 1.0 / sigma
    v_shrink = np.array([-thr - 0.2, -thr, 0.0, thr, thr + 0.2])
    v_clip = np.array([-1.3, -1.0, 0.0, 1.0, 1.3])
    m_shrink, m_clip = subgradient_masks(v_shrink, v_clip, sigma)
    # active set open: exact boundary points treated as inactive
    assert m_shrink.tolist() == [1.0, 0.0, 0.0, 0.0, 1.0]
    assert m_clip.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_soft_threshold_dsigma_finite_difference(rng):
    sigma = 1.3
    v = rng.uniform(-3, 3, size=400)
    # keep clear of the kink so the derivative exists
    v = v[np.abs(np.abs(v) - 1.0 / sigma) > 1e-3]
    h = 1e-7
    fd = (prox_l1(v, 1.0 / (sigma + h)) - prox_l1(v, 1.0 / (sigma - h))) / (2 * h)
    analytic = soft_threshold_dsigma(v, sigma)
    assert np.max(np.abs(fd - analytic)) < 1e-6
