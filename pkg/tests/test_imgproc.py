"""Image-routine tests: font rasterization, bilinear resize against a
hand-derived grid, homography roundtrips, and blur invariants."""

import numpy as np
import pytest

from aarlogo import imgproc


def test_font_covers_alphanumerics():
    assert len(imgproc.FONT_ALPHABET) == 36
    for ch in imgproc.FONT_ALPHABET:
        bm = imgproc._char_bitmap(ch)
        assert bm.shape == (imgproc.GLYPH_H, imgproc.GLYPH_W)
        assert bm.sum() > 0


def test_render_text_geometry():
    m = imgproc.render_text("AB")
    # two 5-wide glyphs plus one separator column
    assert m.shape == (7, 11)
    assert set(np.unique(m)).issubset({0.0, 1.0})
    assert np.all(m[:, 5] == 0.0)  # separator stays blank
    scaled = imgproc.render_text("AB", scale=3)
    assert scaled.shape == (21, 33)
    np.testing.assert_array_equal(scaled[::3, ::3], m)


def test_resize_same_size_is_copy(rng):
    img = rng.uniform(size=(6, 6, 3)).astype(np.float32)
    out = imgproc.resize_bilinear(img, 6, 6)
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_resize_constant_stays_constant():
    img = np.full((5, 9, 3), 0.37, dtype=np.float32)
    out = imgproc.resize_bilinear(img, 13, 4)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_resize_upsample_hand_derived():
    # 1-D ramp [0, 1], 2 -> 4 under align_corners=False:
    # source coords (i+0.5)/2 - 0.5 = -0.25, 0.25, 0.75, 1.25 (edge-clamped)
    img = np.array([[0.0], [1.0]], dtype=np.float64)[:, :, None]
    img = np.repeat(img, 1, axis=1)
    out = imgproc.resize_bilinear(np.squeeze(img, -1), 4, 1)
    np.testing.assert_allclose(out[:, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_resize_downsample_hand_derived():
    # 4 -> 2: source coords (i+0.5)*2 - 0.5 = 0.5, 2.5
    col = np.array([0.0, 1.0, 2.0, 3.0], dtype=np.float64)[:, None]
    out = imgproc.resize_bilinear(col, 2, 1)
    np.testing.assert_allclose(out[:, 0], [0.5, 2.5], atol=1e-12)


def test_warp_identity():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    out = imgproc.warp_homography(img, np.eye(3), 8, 8, fill=0.0)
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_affine_180_rotation_flips():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(9, 9, 3)).astype(np.float32)
    mat = imgproc.affine_matrix(angle_deg=180.0, center=(4.0, 4.0))
    out = imgproc.warp_homography(img, np.linalg.inv(mat), 9, 9, fill=0.0)
    # skip the outermost ring: rotation residue (~1e-16) pushes those
    # samples just past the border, where the warp falls back to fill
    np.testing.assert_allclose(out[1:-1, 1:-1], img[::-1, ::-1][1:-1, 1:-1],
                               atol=1e-5)


def test_homography_from_points_roundtrip(rng):
    src = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]
    dst = [(1.0, 0.5), (9.0, 1.0), (11.0, 9.0), (-0.5, 10.5)]
    mat = imgproc.homography_from_points(src, dst)
    for (x, y), (u, v) in zip(src, dst):
        p = mat @ np.array([x, y, 1.0])
        np.testing.assert_allclose(p[:2] / p[2], [u, v], atol=1e-8)


def test_warp_fill_outside():
    img = np.ones((4, 4), dtype=np.float32)
    # translate far off-frame: everything becomes fill
    mat = np.array([[1, 0, 100], [0, 1, 100], [0, 0, 1]], dtype=np.float64)
    out = imgproc.warp_homography(img, mat, 4, 4, fill=0.25)
    np.testing.assert_allclose(out, 0.25, atol=1e-7)


def test_gaussian_blur_invariants(rng):
    img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    out = imgproc.gaussian_blur(img, 1.0)
    assert out.shape == img.shape
    # smoothing keeps values in range and shrinks variance
    assert out.min() >= img.min() - 1e-6 and out.max() <= img.max() + 1e-6
    assert out.var() < img.var()
    const = np.full((8, 8, 3), 0.6, dtype=np.float32)
    np.testing.assert_allclose(imgproc.gaussian_blur(const, 2.0), 0.6,
                               atol=1e-6)
