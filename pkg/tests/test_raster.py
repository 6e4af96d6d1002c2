import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segloc.errors import DegenerateSegmentError, InvalidArgumentError, PlacementError
from segloc.raster import (
    BBox,
    TransformParams,
    blend_segment,
    erode_min,
    mask_bbox,
    read_mask,
    read_rgb,
    threshold_above,
    to_grayscale,
    transform_segment,
    write_mask,
    write_rgb,
)


def naive_erode(img, k):
    """Brute-force window minimum with replicated borders."""
    h, w = img.shape
    r = k // 2
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            best = 255
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    best = min(best, int(img[yy, xx]))
            out[y, x] = best
    return out


def px(rgb):
    return np.array([[rgb]], dtype=np.uint8)


gray_images = arrays(
    np.uint8,
    st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.integers(0, 255),
)


class TestGrayscale:
    def test_white(self):
        assert to_grayscale(px((255, 255, 255)))[0, 0] == 255

    def test_black(self):
        assert to_grayscale(px((0, 0, 0)))[0, 0] == 0

    def test_pure_red(self):
        # 0.299 * 255 = 76.245
        assert to_grayscale(px((255, 0, 0)))[0, 0] == 76

    @given(st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)))
    def test_matches_weighted_sum(self, rgb):
        r, g, b = rgb
        expected = int(np.floor(0.299 * r + 0.587 * g + 0.114 * b + 0.5 + 1e-9))
        assert to_grayscale(px(rgb))[0, 0] == min(expected, 255)


class TestErode:
    def test_constant(self):
        img = np.full((7, 9), 128, dtype=np.uint8)
        assert (erode_min(img, 5) == 128).all()

    def test_single_dark_pixel_kernel_9(self):
        img = np.full((20, 20), 255, dtype=np.uint8)
        img[10, 10] = 0
        expected = naive_erode(img, 9)
        out = erode_min(img, 9)
        np.testing.assert_array_equal(out, expected)
        block = np.zeros((20, 20), dtype=bool)
        block[6:15, 6:15] = True
        assert (out[block] == 0).all()
        assert (out[~block] == 255).all()

    def test_center_of_3x3_is_global_min(self):
        img = np.array([[9, 4, 7], [3, 8, 6], [5, 2, 10]], dtype=np.uint8)
        assert erode_min(img, 3)[1, 1] == 2

    @pytest.mark.parametrize("k", [0, 2, 4, -1])
    def test_bad_kernel(self, k):
        with pytest.raises(InvalidArgumentError):
            erode_min(np.zeros((3, 3), dtype=np.uint8), k)

    @given(gray_images, st.sampled_from([1, 3, 5, 9]))
    @settings(max_examples=60)
    def test_matches_brute_force(self, img, k):
        np.testing.assert_array_equal(erode_min(img, k), naive_erode(img, k))

    @given(gray_images, st.sampled_from([3, 5, 9]))
    def test_never_exceeds_input(self, img, k):
        assert (erode_min(img, k) <= img).all()

    @given(gray_images)
    def test_kernel_one_identity(self, img):
        np.testing.assert_array_equal(erode_min(img, 1), img)


class TestThreshold:
    def test_strict(self):
        img = np.array([[50, 51, 0]], dtype=np.uint8)
        assert threshold_above(img, 50).tolist() == [[False, True, False]]

    def test_zero_never_passes(self):
        assert not threshold_above(np.zeros((2, 2), dtype=np.uint8), 0).any()


def labeled_grid(w, h):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            img[y, x] = (10 * x + 1, 10 * y + 1, 7 * (x + w * y))
    return img


class TestTransform:
    def test_identity(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        mask = rng.random((5, 7)) > 0.3
        out, m = transform_segment(img, mask, TransformParams())
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(m, mask)

    def test_hflip_involution(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (4, 6, 3), dtype=np.uint8)
        mask = rng.random((4, 6)) > 0.5
        mask[0, 0] = True
        p = TransformParams(hflip=True)
        once = transform_segment(img, mask, p)
        twice = transform_segment(*once, p)
        np.testing.assert_array_equal(twice[0], img)
        np.testing.assert_array_equal(twice[1], mask)
        np.testing.assert_array_equal(once[0], img[:, ::-1])

    def test_rotate_90_permutation(self):
        w, h = 2, 3
        img = labeled_grid(w, h)
        mask = np.ones((h, w), dtype=bool)
        out, m = transform_segment(img, mask, TransformParams(angle=90.0))
        assert out.shape == (w, h, 3)
        assert m.all()
        for y in range(h):
            for x in range(w):
                # source (x, y) lands at column h-1-y, row x
                np.testing.assert_array_equal(out[x, h - 1 - y], img[y, x])

    def test_four_quarter_turns(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (5, 8, 3), dtype=np.uint8)
        mask = rng.random((5, 8)) > 0.4
        mask[2, 3] = True
        cur = (img, mask)
        for _ in range(4):
            cur = transform_segment(*cur, TransformParams(angle=90.0))
        np.testing.assert_array_equal(cur[1], mask)
        np.testing.assert_array_equal(cur[0][mask], img[mask])

    def test_expanded_canvas_holds_rotation(self):
        img = np.full((10, 20, 3), 200, dtype=np.uint8)
        mask = np.ones((10, 20), dtype=bool)
        out, m = transform_segment(img, mask, TransformParams(angle=45.0))
        assert out.shape[:2] == m.shape
        # |20 cos45| + |10 sin45| = 21.2
        assert m.shape == (22, 22)
        box = mask_bbox(m)
        assert box.w >= 20 and box.h >= 20

    def test_scale(self):
        img = np.full((4, 6, 3), 90, dtype=np.uint8)
        out, m = transform_segment(img, np.ones((4, 6), bool), TransformParams(scale=1.5))
        assert out.shape == (6, 9, 3) and m.shape == (6, 9)
        assert (out == 90).all()

    def test_photometric_only_inside_mask(self):
        img = np.full((3, 3, 3), 100, dtype=np.uint8)
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        out, _ = transform_segment(img, mask, TransformParams(brightness=1.2, contrast=1.4))
        # (100 * 1.2 - 128) * 1.4 + 128 = 116.8
        assert out[1, 1].tolist() == [117, 117, 117]
        assert out[0, 0].tolist() == [100, 100, 100]

    def test_clamped(self):
        img = np.full((2, 2, 3), 250, dtype=np.uint8)
        out, _ = transform_segment(img, np.ones((2, 2), bool), TransformParams(brightness=1.4, contrast=1.4))
        assert (out == 255).all()

    def test_empty_result_is_degenerate(self):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        with pytest.raises(DegenerateSegmentError):
            transform_segment(img, np.zeros((2, 2), bool), TransformParams())

    def test_mismatched_mask(self):
        with pytest.raises(InvalidArgumentError):
            transform_segment(np.zeros((2, 3, 3), np.uint8), np.ones((3, 2), bool), TransformParams())

    def test_param_ranges(self):
        with pytest.raises(InvalidArgumentError):
            TransformParams(angle=360.0)
        with pytest.raises(InvalidArgumentError):
            TransformParams(scale=0.0)

    @given(
        angle=st.floats(0, 359.99),
        scale=st.floats(0.5, 1.5),
        flip=st.booleans(),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_pure_and_shape_consistent(self, angle, scale, flip, seed):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
        mask = np.ones((9, 13), bool)
        p = TransformParams(angle=angle, scale=scale, hflip=flip, brightness=0.8, contrast=1.2)
        a = transform_segment(img, mask, p)
        b = transform_segment(img, mask, p)
        assert a[0].shape[:2] == a[1].shape
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestBlend:
    def test_half(self):
        bg = px((0, 200, 0))
        out = blend_segment(bg, px((100, 0, 0)), np.ones((1, 1), bool), BBox(0, 0, 1, 1), 0.5)
        assert out[0, 0].tolist() == [50, 100, 0]

    def test_masked_out_pixel_unchanged(self):
        bg = px((1, 2, 3))
        out = blend_segment(bg, px((100, 0, 0)), np.zeros((1, 1), bool), BBox(0, 0, 1, 1), 0.5)
        assert out[0, 0].tolist() == [1, 2, 3]

    def test_coefficient_065(self):
        # 0.65 * 255 = 165.75
        bg = px((0, 0, 0))
        out = blend_segment(bg, px((255, 255, 255)), np.ones((1, 1), bool), BBox(0, 0, 1, 1), 0.65)
        assert out[0, 0].tolist() == [166, 166, 166]

    def test_outside_box_untouched(self):
        rng = np.random.default_rng(3)
        bg = rng.integers(0, 256, (10, 10, 3), dtype=np.uint8)
        seg = rng.integers(0, 256, (3, 4, 3), dtype=np.uint8)
        out = blend_segment(bg, seg, np.ones((3, 4), bool), BBox(2, 5, 4, 3), 1.0)
        np.testing.assert_array_equal(out[5:8, 2:6], seg)
        outside = np.ones((10, 10), bool)
        outside[5:8, 2:6] = False
        np.testing.assert_array_equal(out[outside], bg[outside])

    def test_out_of_bounds(self):
        bg = np.zeros((5, 5, 3), np.uint8)
        seg = np.zeros((2, 2, 3), np.uint8)
        with pytest.raises(PlacementError):
            blend_segment(bg, seg, np.ones((2, 2), bool), BBox(4, 0, 2, 2), 0.5)

    @given(
        c=st.floats(0.01, 1.0),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_bounds_and_opaque(self, c, seed):
        rng = np.random.default_rng(seed)
        bg = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
        seg = rng.integers(0, 256, (3, 3, 3), dtype=np.uint8)
        mask = rng.random((3, 3)) > 0.5
        out = blend_segment(bg, seg, mask, BBox(1, 2, 3, 3), c)
        assert out.dtype == np.uint8
        opaque = blend_segment(bg, seg, mask, BBox(1, 2, 3, 3), 1.0)
        np.testing.assert_array_equal(opaque[2:5, 1:4][mask], seg[mask])


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    mask = rng.random((7, 5)) > 0.5
    write_rgb(tmp_path / "a.png", img)
    write_mask(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(read_rgb(tmp_path / "a.png"), img)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), mask)
