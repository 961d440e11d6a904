import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multipose.errors import GeometryError, ShapeError
from multipose.masks import EMPTY_BBOX, build_pyramids, extract_bbox_mask, mask_flow, normalize_masks


def loop_resize_renorm(masks, th, tw):
    """Scalar bilinear (align-corners-false) resize of each mask, then per-pixel renormalization."""
    n, h, w = masks.shape
    out = np.zeros((n, th, tw))
    for k in range(n):
        for i in range(th):
            for j in range(tw):
                sy = max((i + 0.5) * h / th - 0.5, 0.0)
                sx = max((j + 0.5) * w / tw - 0.5, 0.0)
                y0, x0 = min(int(sy), h - 1), min(int(sx), w - 1)
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = sy - y0, sx - x0
                out[k, i, j] = ((1 - fy) * (1 - fx) * masks[k, y0, x0] + (1 - fy) * fx * masks[k, y0, x1]
                                + fy * (1 - fx) * masks[k, y1, x0] + fy * fx * masks[k, y1, x1])
    for i in range(th):
        for j in range(tw):
            s = sum(out[k, i, j] for k in range(n))
            for k in range(n):
                out[k, i, j] /= s
    return out


class TestExtract:
    def test_two_points(self):
        m = np.zeros((4, 4))
        m[1, 1] = 1
        m[2, 3] = 0.5
        mask, bbox = extract_bbox_mask(m)
        expected = np.zeros((4, 4))
        expected[1:3, 1:4] = 1
        np.testing.assert_array_equal(mask, expected)
        assert bbox == (1, 2, 1, 3)

    def test_any_channel_counts(self):
        m = np.zeros((3, 5, 5))
        m[2, 0, 4] = 1
        m[0, 3, 1] = 1
        assert extract_bbox_mask(m)[1] == (0, 3, 1, 4)

    def test_empty(self):
        mask, bbox = extract_bbox_mask(np.zeros((3, 4, 4)))
        assert not mask.any() and bbox == EMPTY_BBOX

    def test_full(self):
        mask, _ = extract_bbox_mask(np.ones((3, 4, 4)))
        assert mask.all()

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        m = (rng.random((9, 11)) > 0.93).astype(np.float32)
        once, _ = extract_bbox_mask(m)
        twice, _ = extract_bbox_mask(once)
        np.testing.assert_array_equal(once, twice)


class TestNormalize:
    def test_inside_one_mask(self):
        m = np.zeros((2, 1, 1))
        m[0] = 1
        out = normalize_masks(m, 1.0)[:, 0, 0]
        np.testing.assert_allclose(out, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-6)
        np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)

    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_inside_none_is_uniform(self, n):
        np.testing.assert_allclose(normalize_masks(np.zeros((n, 2, 2)))[:, 1, 1], np.full(n, 1 / n), atol=1e-7)

    @pytest.mark.parametrize("s", [1.0, 3.0, 50.0])
    def test_tie_in_overlap(self, s):
        np.testing.assert_allclose(normalize_masks(np.ones((2, 1, 1)), s)[:, 0, 0], [0.5, 0.5])

    def test_sharpening(self):
        m = np.zeros((3, 1, 1))
        m[1] = 1
        assert normalize_masks(m, 20.0)[1, 0, 0] > 0.99

    def test_sharpness_below_one_rejected(self):
        with pytest.raises(ValueError):
            normalize_masks(np.zeros((2, 2, 2)), 0.5)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            normalize_masks(np.zeros((4, 4)))


class TestPyramid:
    def test_sizes_64(self):
        pyr = build_pyramids(normalize_masks(np.zeros((2, 64, 64))))
        assert [l.shape[-2:] for l in pyr.group_a] == [(64, 64), (32, 32), (16, 16)]
        assert [l.shape[-2:] for l in pyr.group_b] == [(64, 64), (32, 32), (16, 16), (8, 8)]
        assert [l.shape[-2:] for l in pyr.group_c] == [(8, 8)]

    def test_single_character_all_ones(self):
        pyr = build_pyramids(normalize_masks(np.ones((1, 32, 32))))
        for l in pyr.levels:
            np.testing.assert_array_equal(l, np.ones_like(l))

    def test_disjoint_halves_vs_oracle(self):
        m = np.zeros((2, 8, 8), np.float32)
        m[0, :, :4] = 1
        m[1, :, 4:] = 1
        norm = normalize_masks(m)
        lvl = build_pyramids(norm).levels[1]
        np.testing.assert_allclose(lvl, loop_resize_renorm(norm.astype(np.float64), 4, 4), atol=1e-6)

    def test_geometry_error(self):
        with pytest.raises(GeometryError):
            build_pyramids(np.ones((1, 12, 16)))

    def test_frames_axis(self):
        pyr = build_pyramids(normalize_masks(np.zeros((3, 2, 16, 16))))
        assert pyr.levels[3].shape == (3, 2, 2, 2)

    @given(st.integers(0, 10_000), st.integers(1, 3), st.sampled_from([1.0, 4.0, 20.0]))
    @settings(max_examples=40, deadline=None)
    def test_partition_of_unity(self, seed, n, s):
        rng = np.random.default_rng(seed)
        pm = np.zeros((n, 2, 3, 32, 32), np.float32)
        for i in range(n):
            r0, c0 = rng.integers(0, 28, 2)
            pm[i, :, 0, r0:r0 + rng.integers(1, 8), c0:c0 + rng.integers(1, 8)] = 1
        _, pyr = mask_flow(pm, s)
        for lvl in pyr.levels:
            np.testing.assert_allclose(lvl.sum(axis=1), 1.0, atol=1e-5)

    def test_sharp_inside_weight(self):
        pm = np.zeros((2, 1, 3, 16, 16), np.float32)
        pm[0, 0, 0, 2:6, 2:6] = 1
        pm[1, 0, 0, 9:14, 9:14] = 1
        _, pyr = mask_flow(pm, 20.0)
        assert pyr.levels[0][0, 0, 3, 3] > 0.99 and pyr.levels[0][0, 1, 10, 10] > 0.99
