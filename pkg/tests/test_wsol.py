import math
from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selftaught.data import Box, box_iou
from selftaught.wsol import (
    ActivationMap, ObjectBox, auto_threshold, cam, fallback_box, largest_component, largest_component_box,
    prototype_weights, recompose, split_fg_bg, square_box, tight_box,
)


def brute_force_cam(fmap):
    d, h, w = fmap.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for c in range(d):
                s += float(fmap[c, y, x])
            out[y, x] = max(s / d, 0.0)
    return out


def flood_fill_components(mask):
    """Components in raster order of their first pixel, 4-connectivity, via explicit BFS."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                pix = []
                q = deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    pix.append((cy, cx))
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
                comps.append(pix)
    return comps


def oracle_largest(mask):
    comps = flood_fill_components(mask)
    best = max(range(len(comps)), key=lambda i: (len(comps[i]), -i))
    pix = comps[best]
    ys, xs = [p[0] for p in pix], [p[1] for p in pix]
    return set(pix), Box(min(ys), min(xs), max(ys) + 1, max(xs) + 1)


def test_cam_mean_then_relu():
    fmap = np.zeros((2, 3, 3))
    fmap[0, 1, 1], fmap[1, 1, 1] = 2.0, -1.0
    act = cam(fmap, 6)
    assert act.values[1, 1] == pytest.approx(0.5)
    assert act.upsampled.shape == (6, 6)


def test_cam_all_negative_is_zero():
    act = cam(-np.abs(np.random.default_rng(0).normal(size=(4, 5, 5))) - 0.1, 20)
    assert not act.values.any() and not act.upsampled.any()


def test_cam_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        fmap = rng.normal(size=(8, 5, 5))
        np.testing.assert_allclose(cam(fmap, 40).values, brute_force_cam(fmap), rtol=0, atol=1e-12)


def test_cam_upsampling_is_bilinear():
    vals = torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=torch.float64)
    up = cam(vals[None], 4).upsampled
    # half-pixel centres: output pixel centre (0.5) maps to source coordinate 0.25 - 0.5 -> clamped 0
    expected_row0 = [0.0, 0.25, 0.75, 1.0]
    np.testing.assert_allclose(up[0], expected_row0, atol=1e-12)
    np.testing.assert_allclose(up[:, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-12)


def test_cam_prototype_weighted_variant_reduces_to_mean_for_uniform_weights():
    fmap = np.random.default_rng(2).normal(size=(6, 4, 4))
    w = prototype_weights(np.ones(6))
    np.testing.assert_allclose(cam(fmap, 8, w).values, cam(fmap, 8).values, atol=1e-12)
    w = prototype_weights([1, 0, 0, 0, 0, -3])
    np.testing.assert_allclose(cam(fmap, 8, w).values, np.maximum(fmap[0], 0), atol=1e-12)


def test_threshold_constant_map():
    act = ActivationMap(np.ones((2, 2)), np.full((10, 10), 0.7))
    assert auto_threshold(act).all()


def test_threshold_zero_map():
    act = ActivationMap(np.zeros((2, 2)), np.zeros((10, 10)))
    assert not auto_threshold(act).any()


@pytest.mark.parametrize("tau", [0.2, 0.5])
def test_threshold_gaussian_superlevel_area(tau):
    size, sigma, cy, cx = 64, 9.0, 30.3, 33.7
    yy, xx = np.mgrid[0:size, 0:size]
    heat = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    mask = auto_threshold(ActivationMap(heat[::8, ::8], heat), tau)
    # superlevel set of a Gaussian is the disc r^2 <= -2 sigma^2 ln(tau * peak)
    peak = heat.max()
    r2 = -2 * sigma ** 2 * math.log(tau * peak)
    expected = sum(1 for y in range(size) for x in range(size) if (y - cy) ** 2 + (x - cx) ** 2 <= r2)
    assert mask.sum() == expected


def test_largest_component_two_blobs():
    mask = np.zeros((20, 20), bool)
    mask[1:6, 1:7] = True  # 30 px
    mask[10:20, 10:15] = True  # 50 px
    box = largest_component_box(mask)
    assert (box.top, box.left, box.side) == (10, 8, 10)


def test_square_from_tight_box():
    b = square_box(Box(20, 30, 30, 50), 84, 84)  # 10 high, 20 wide
    assert b.side == 20 and (b.top, b.left) == (15, 30)


def test_square_box_is_clamped_inside():
    b = square_box(Box(0, 0, 3, 20), 32, 32)
    assert (b.top, b.left, b.side) == (0, 0, 20)
    b = square_box(Box(30, 10, 32, 30), 32, 32)
    assert b.top + b.side <= 32 and b.top == 12


def test_largest_component_empty_raises():
    with pytest.raises(ValueError):
        largest_component_box(np.zeros((4, 4), bool))


def test_tie_break_is_raster_order():
    mask = np.zeros((6, 6), bool)
    mask[4, 0:3] = True
    mask[0, 3:6] = True
    comp = largest_component(mask)
    assert comp[0, 3:6].all() and not comp[4].any()


def test_largest_component_matches_flood_fill_on_1000_masks():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 1000:
        side = int(rng.integers(1, 17))
        mask = rng.random((side, side)) < rng.uniform(0.2, 0.7)
        if not mask.any():
            continue
        pix, box = oracle_largest(mask)
        comp = largest_component(mask)
        assert set(zip(*np.nonzero(comp))) == pix
        assert tight_box(comp) == box
        checked += 1


@settings(max_examples=200, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16))))
def test_boxes_stay_inside_image(mask):
    if not mask.any():
        return
    b = largest_component_box(mask)
    h, w = mask.shape
    assert b.side >= 1 and b.top >= 0 and b.left >= 0
    assert b.top + b.side <= h and b.left + b.side <= w


def test_split_recompose_round_trip(small_domain):
    im = small_domain[0][0]
    for box in (ObjectBox(3, 5, 10), ObjectBox(0, 0, 32), None):
        pair = split_fg_bg(im, box)
        assert recompose(pair).tobytes() == im.pixels.tobytes()
        assert not pair.background[pair.box.slices()].any()


def test_fallback_box_84():
    pair = split_fg_bg(np.zeros((84, 84, 3), np.float32), None)
    assert pair.fallback and pair.box.side == 51 == math.ceil(0.6 * 84)
    assert pair.box.top == pair.box.left == (84 - 51) // 2
    assert fallback_box(84) == pair.box


def test_iou_oracle():
    a, b = Box(0, 0, 10, 10), Box(5, 5, 15, 15)
    assert box_iou(a, b) == pytest.approx(25 / 175)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, Box(20, 20, 30, 30)) == 0.0
