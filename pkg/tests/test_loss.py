import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardnet_dfus.loss import (ABLATION_GRID, LossInputs, bce, boundary_target, composite_loss,
                               grad_check, parse_flags, pixel_weight_map, weighted_bce,
                               weighted_iou)


def scalar_sigmoid(x):
    return 1 / (1 + math.exp(-x)) if x >= 0 else math.exp(x) / (1 + math.exp(x))


def scalar_bce(x, g):
    # -g log p - (1 - g) log(1 - p), via log-sigmoid
    log_p = -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))
    log_q = -x + log_p
    return -g * log_p - (1 - g) * log_q


def oracle_wbce(x, g, w):
    num = den = 0.0
    for xi, gi, wi in zip(x.ravel(), g.ravel(), w.ravel()):
        num += wi * scalar_bce(float(xi), float(gi))
        den += wi
    return num / den


def oracle_wiou(x, g, w):
    inter = union = 0.0
    for xi, gi, wi in zip(x.ravel(), g.ravel(), w.ravel()):
        p = scalar_sigmoid(float(xi))
        inter += wi * p * gi
        union += wi * (p + gi)
    return 1 - (inter + 1) / (union - inter + 1)


def oracle_weight_map(G):
    h, w = G.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for a in range(i - 15, i + 16):
                for b in range(j - 15, j + 16):
                    if 0 <= a < h and 0 <= b < w:
                        s += G[a, b]
            out[i, j] = 1 + 5 * abs(s / 961 - G[i, j])
    return out


def instance(seed, shape=(4, 4)):
    r = np.random.default_rng(seed)
    G = (r.random(shape) < 0.5).astype(np.float64)
    x = r.normal(0, 3, size=shape)
    return x, G, pixel_weight_map(G)


# -- weight map ----------------------------------------------------------------

def test_weight_map_constant_zero():
    np.testing.assert_array_equal(pixel_weight_map(np.zeros((9, 9))), 1.0)


def test_weight_map_constant_one():
    G = np.ones((40, 40))
    np.testing.assert_array_equal(pixel_weight_map(G, include_pad=False), 1.0)
    # zero padding counts as background: only pixels whose window stays inside are exactly 1
    W = pixel_weight_map(G)
    np.testing.assert_allclose(W[15:-15, 15:-15], 1.0)
    assert W[0, 0] > 1.0


def test_weight_map_single_pixel():
    G = np.zeros((33, 33))
    G[16, 16] = 1
    assert pixel_weight_map(G)[16, 16] == pytest.approx(1 + 5 * (1 - 1 / 961), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_weight_map_matches_window_sum(seed):
    G = (np.random.default_rng(seed).random((20, 17)) < 0.4).astype(float)
    W = pixel_weight_map(G)
    np.testing.assert_allclose(W, oracle_weight_map(G), atol=1e-12)
    assert W.min() >= 1 and W.max() <= 6


def test_weight_map_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        pixel_weight_map(np.full((4, 4), 0.5))


# -- terms ---------------------------------------------------------------------

def test_wbce_zero_logits():
    assert weighted_bce(np.zeros((4, 4)), np.ones((4, 4)), np.ones((4, 4))) == pytest.approx(math.log(2))


def test_wbce_confident_correct():
    G = np.zeros((4, 4))
    G[:2] = 1
    x = np.where(G == 1, 20.0, -20.0)
    W = np.random.default_rng(0).uniform(1, 6, size=(4, 4))
    assert weighted_bce(x, G, W) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)


def test_wiou_examples():
    G = np.zeros((4, 4))
    G.ravel()[:8] = 1
    W = np.ones((4, 4))
    assert weighted_iou(np.where(G == 1, 40.0, -40.0), G, W) == pytest.approx(0.0, abs=1e-12)
    assert weighted_iou(np.full((4, 4), -40.0), G, W) == pytest.approx(1 - 1 / 9, abs=1e-12)
    assert weighted_iou(np.full((4, 4), -40.0), np.zeros((4, 4)), W) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_terms_match_scalar_oracles(seed):
    x, G, W = instance(seed)
    assert abs(weighted_bce(x, G, W) - oracle_wbce(x, G, W)) <= 1e-9
    assert abs(weighted_iou(x, G, W) - oracle_wiou(x, G, W)) <= 1e-9


def test_stable_form_at_extreme_logits():
    x = np.array([[1000.0, -1000.0], [1000.0, -1000.0]])
    G = np.array([[0.0, 1.0], [1.0, 0.0]])
    v = weighted_bce(x, G, np.ones((2, 2)))
    assert math.isfinite(v) and v == pytest.approx(500.0)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        weighted_bce(np.zeros((4, 4)), np.zeros((4, 5)), np.ones((4, 4)))


def test_batch_mean_over_leading_axes():
    parts = [instance(s) for s in range(3)]
    x = np.stack([p[0] for p in parts])
    G = np.stack([p[1] for p in parts])
    W = np.stack([p[2] for p in parts])
    assert weighted_bce(x, G, W) == pytest.approx(np.mean([oracle_wbce(*p) for p in parts]), abs=1e-12)
    assert weighted_iou(x, G, W) == pytest.approx(np.mean([oracle_wiou(*p) for p in parts]), abs=1e-12)


# -- boundary target -----------------------------------------------------------

def test_boundary_empty():
    assert not boundary_target(np.zeros((5, 5))).any()


def test_boundary_centered_square():
    G = np.zeros((5, 5))
    G[1:4, 1:4] = 1
    B = boundary_target(G)
    # dilation covers the full 5x5, erosion keeps the centre pixel
    assert B.sum() == 24
    assert B[2, 2] == 0


def test_boundary_full_ones_is_border_band():
    B = boundary_target(np.ones((5, 5)))
    expected = np.ones((5, 5), np.uint8)
    expected[1:4, 1:4] = 0
    np.testing.assert_array_equal(B, expected)
    assert B.sum() == 16


# -- composite -----------------------------------------------------------------

def _l(x, G, W):
    return weighted_bce(x, G, W) + weighted_iou(x, G, W)


def test_all_flags_off_is_main_only():
    x, G, W = instance(1, (8, 8))
    out = composite_loss(LossInputs(x, G), frozenset())
    assert out.total == pytest.approx(_l(x, G, W), abs=1e-12)
    assert set(out.grads) == {"O"}
    assert out.boundary_bce is None and out.deep == [None, None]


def test_identical_maps_term_by_term():
    x, G, W = instance(2, (8, 8))
    GB = boundary_target(G)
    out = composite_loss(LossInputs(x, G, [x, x], x, GB), {"deep1", "deep2", "boundary"})
    assert abs(out.total - (3 * _l(x, G, W) + bce(x, GB))) <= 1e-9
    assert abs(out.total - sum(out.terms())) <= 1e-9
    assert all(t >= 0 for t in out.terms())


def test_perfect_predictions():
    G = np.zeros((8, 8))
    G[2:6, 2:6] = 1
    GB = boundary_target(G)
    O = np.where(G == 1, 40.0, -40.0)
    B = np.where(GB == 1, 40.0, -40.0)
    out = composite_loss(LossInputs(O, G, [O, O], B), parse_flags("d1,d2,b"))
    assert out.total < 1e-6


@pytest.mark.parametrize("flag, inputs", [
    ("deep2", LossInputs(np.zeros((4, 4)), np.zeros((4, 4)), [np.zeros((4, 4))])),
    ("boundary", LossInputs(np.zeros((4, 4)), np.zeros((4, 4)))),
])
def test_missing_enabled_tensor_is_named(flag, inputs):
    with pytest.raises(ValueError, match=flag):
        composite_loss(inputs, {"deep1", flag} if flag == "deep2" else {flag})


def test_parse_flags():
    assert parse_flags("d1,d2,b") == ABLATION_GRID[-1]
    assert parse_flags("") == frozenset()
    with pytest.raises(ValueError):
        parse_flags("d3")


# -- gradients -----------------------------------------------------------------

def test_gradient_at_symmetric_point():
    G = np.zeros((6, 6))
    x = np.zeros((6, 6))
    W = pixel_weight_map(G)
    out = composite_loss(LossInputs(x, G), frozenset(), W=W)
    wbce_grad = 0.5 * W / W.sum()
    # G == 0 reduces the IoU term to 1 - 1 / (sum W p + 1)
    union = (W * 0.5).sum()
    wiou_grad = W / (union + 1) ** 2 * 0.25
    np.testing.assert_allclose(out.grads["O"], wbce_grad + wiou_grad, rtol=1e-12)
    h = 1e-5
    for idx in [(0, 0), (2, 3), (5, 5)]:
        e = np.zeros_like(x)
        e[idx] = h
        numeric = (weighted_bce(x + e, G, W) - weighted_bce(x - e, G, W)) / (2 * h)
        assert numeric == pytest.approx(wbce_grad[idx], rel=1e-6)


def test_grad_check_report_shape():
    report = grad_check(seed=0, shape=(8, 8), enable=parse_flags("d1"))
    assert report["max_rel_err"] < 1e-6
    assert set(report["per_term"]) == {"O", "D1"}
    assert "B" not in report["per_term"]
    assert all(v["coords"] == 64 for v in report["per_term"].values())


def test_grad_check_subsamples_large_maps():
    report = grad_check(seed=1, shape=(20, 20), max_coords=100)
    assert all(v["coords"] == 100 for v in report["per_term"].values())
    assert report["max_rel_err"] < 1e-6


# -- symmetry ------------------------------------------------------------------

TRANSFORMS = [np.fliplr, np.flipud, np.rot90, lambda a: np.rot90(a, 2), np.transpose]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(range(len(TRANSFORMS))))
def test_terms_invariant_under_dihedral_maps(seed, t):
    f = TRANSFORMS[t]
    r = np.random.default_rng(seed)
    G = (r.random((12, 12)) < 0.5).astype(float)
    maps = [r.normal(size=(12, 12)) for _ in range(4)]
    enable = parse_flags("d1,d2,b")
    a = composite_loss(LossInputs(maps[0], G, maps[1:3], maps[3]), enable)
    b = composite_loss(LossInputs(f(maps[0]), f(G), [f(m) for m in maps[1:3]], f(maps[3])), enable)
    np.testing.assert_allclose(a.terms(), b.terms(), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(f(a.grads["O"]), b.grads["O"], rtol=1e-10, atol=1e-15)
