import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from crackscan.cam import AttentionMap, attention_map, compute_cam, normalize, overlay, upsample_bilinear
from crackscan.errors import ShapeError


def brute_cam(f, w, k):
    h, ww, c = f.shape
    out = np.zeros((h, ww))
    for y in range(h):
        for x in range(ww):
            s = 0.0
            for ch in range(c):
                s += f[y, x, ch] * w[ch, k]
            out[y, x] = s
    return out


def brute_bilinear(raw, H, W):
    h, w = raw.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            fy = 0.0 if H == 1 else i * (h - 1) / (H - 1)
            fx = 0.0 if W == 1 else j * (w - 1) / (W - 1)
            y0, x0 = int(np.floor(fy)), int(np.floor(fx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = fy - y0, fx - x0
            out[i, j] = (raw[y0, x0] * (1 - dy) * (1 - dx) + raw[y0, x1] * (1 - dy) * dx
                         + raw[y1, x0] * dy * (1 - dx) + raw[y1, x1] * dy * dx)
    return out


def test_zero_features_give_zero_map():
    assert np.all(compute_cam(np.zeros((7, 7, 16)), np.ones((16, 2)), 1) == 0)


def test_single_channel_identity():
    f = np.random.default_rng(0).normal(size=(5, 6, 1))
    np.testing.assert_array_equal(compute_cam(f, np.array([[0.3, 1.0]]), 1), f[..., 0])


def test_matches_per_pixel_loop():
    rng = np.random.default_rng(1)
    f, w = rng.normal(size=(3, 3, 4)), rng.normal(size=(4, 2))
    for k in (0, 1):
        np.testing.assert_allclose(compute_cam(f, w, k), brute_cam(f, w, k), atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        compute_cam(np.zeros((3, 3, 4)), np.zeros((5, 2)), 0)
    with pytest.raises(ShapeError):
        compute_cam(np.zeros((3, 3, 4)), np.zeros((4, 2)), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-10, 10))
def test_linearity(seed, c):
    rng = np.random.default_rng(seed)
    f1, f2, w = rng.normal(size=(4, 5, 6)), rng.normal(size=(4, 5, 6)), rng.normal(size=(6, 2))
    np.testing.assert_allclose(compute_cam(c * f1, w, 1), c * compute_cam(f1, w, 1), atol=1e-6)
    np.testing.assert_allclose(compute_cam(f1 + f2, w, 1), compute_cam(f1, w, 1) + compute_cam(f2, w, 1), atol=1e-6)


def test_positive_scaling_leaves_normalized_map_unchanged():
    rng = np.random.default_rng(2)
    f, w = rng.normal(size=(7, 7, 8)), rng.normal(size=(8, 2))
    np.testing.assert_allclose(normalize(compute_cam(3.7 * f, w, 1)), normalize(compute_cam(f, w, 1)), atol=1e-12)


def test_upsample_constant():
    out = upsample_bilinear(np.full((7, 7), 2.5), (224, 224))
    assert out.shape == (224, 224)
    np.testing.assert_allclose(out, 2.5, atol=1e-12)


def test_upsample_same_size_is_identity():
    raw = np.random.default_rng(3).normal(size=(7, 9))
    np.testing.assert_allclose(upsample_bilinear(raw, raw.shape), raw, atol=1e-12)


def test_upsample_hand_computed_2x4():
    out = upsample_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), (2, 4))
    np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1], [0, 1 / 3, 2 / 3, 1]], atol=1e-12)


@pytest.mark.parametrize("src,dst", [((7, 7), (224, 224)), ((3, 5), (10, 17)), ((1, 4), (3, 9)), ((5, 5), (5, 12))])
def test_upsample_matches_loop_and_scipy(src, dst):
    raw = np.random.default_rng(4).normal(size=src)
    out = upsample_bilinear(raw, dst)
    np.testing.assert_allclose(out, brute_bilinear(raw, *dst), atol=1e-10)
    if min(src) > 1:
        zoomed = ndimage.zoom(raw, (dst[0] / src[0], dst[1] / src[1]), order=1, grid_mode=False, mode="nearest")
        assert zoomed.shape == dst
        np.testing.assert_allclose(out, zoomed, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 9), st.integers(2, 9), st.integers(0, 40), st.integers(0, 40))
def test_upsample_never_overshoots(seed, h, w, dh, dw):
    raw = np.random.default_rng(seed).normal(size=(h, w))
    out = upsample_bilinear(raw, (h + dh, w + dw))
    assert raw.min() - 1e-12 <= out.min() and out.max() <= raw.max() + 1e-12
    np.testing.assert_allclose(out[[0, 0, -1, -1], [0, -1, 0, -1]], raw[[0, 0, -1, -1], [0, -1, 0, -1]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8), st.integers(2, 8), st.integers(1, 5), st.integers(1, 5))
def test_upsample_grid_aligned_keeps_extrema_and_nodes(seed, h, w, ky, kx):
    raw = np.random.default_rng(seed).normal(size=(h, w))
    out = upsample_bilinear(raw, ((h - 1) * ky + 1, (w - 1) * kx + 1))
    np.testing.assert_allclose(out[::ky, ::kx], raw, atol=1e-12)
    assert out.max() == pytest.approx(raw.max(), abs=1e-12)
    assert out.min() == pytest.approx(raw.min(), abs=1e-12)


def test_half_pixel_mode_matches_scipy():
    raw = np.random.default_rng(5).normal(size=(7, 7))
    out = upsample_bilinear(raw, (224, 224), align_corners=False)
    assert raw.min() - 1e-12 <= out.min() and out.max() <= raw.max() + 1e-12
    ref = ndimage.zoom(raw, 32, order=1, grid_mode=True, mode="nearest")
    np.testing.assert_allclose(out, ref, atol=1e-9)


def test_upsample_rejects_empty():
    with pytest.raises(ShapeError):
        upsample_bilinear(np.zeros((0, 3)), (4, 4))


def test_attention_map_fields():
    rng = np.random.default_rng(6)
    amap = attention_map(rng.normal(size=(7, 7, 4)), rng.normal(size=(4, 2)), 1, (224, 224))
    assert isinstance(amap, AttentionMap)
    assert amap.full.shape == (224, 224) and amap.raw.shape == (7, 7)
    assert amap.value_range == (amap.raw.min(), amap.raw.max())


def _img(seed=0):
    return np.random.default_rng(seed).integers(0, 200, (16, 16, 3)).astype(np.uint8)


def test_overlay_zero_map_is_noop():
    img = _img()
    np.testing.assert_array_equal(overlay(img, np.zeros((16, 16))), img)


def test_overlay_hot_pixel_turns_red():
    img = _img()
    m = np.zeros((16, 16))
    m[4, 5] = 1.0
    out = overlay(img, m, threshold=0.0, alpha=1.0)
    np.testing.assert_array_equal(out[4, 5], [255, 0, 0])
    mask = np.ones((16, 16), bool)
    mask[4, 5] = False
    np.testing.assert_array_equal(out[mask], img[mask])


def test_overlay_zero_alpha_is_noop():
    img = _img()
    np.testing.assert_array_equal(overlay(img, np.random.default_rng(1).normal(size=(16, 16)), alpha=0.0), img)


def test_overlay_modifies_exactly_the_above_threshold_set():
    img = _img(2)
    m = np.random.default_rng(3).normal(size=(16, 16))
    out = overlay(img, m, threshold=0.5, alpha=0.6)
    changed = np.any(out != img, axis=-1)
    np.testing.assert_array_equal(changed, normalize(m) > 0.5)


def test_overlay_shape_check():
    with pytest.raises(ShapeError):
        overlay(_img(), np.zeros((8, 8)))
