import math
from functools import lru_cache

import numpy as np
import pytest

from blackbox import (
    OUT_OF_FRAME_COST,
    PATHS_4,
    PATHS_8,
    BlackboxConfig,
    CostVolume,
    CrossParams,
    SgmParams,
    aggregate_path,
    census_transform,
    cross_aggregate,
    cross_arms,
    hamming,
    lr_consistency,
    matching_cost,
    right_disparity,
    run_blackbox,
    sgm_aggregate,
    wta,
)
from errors import DomainError
from stereo_core import INVALID_DISPARITY, DisparityMap, PixelGrid, StereoPair, resize_bilinear
from train import SceneLayer, render_layers


def census_oracle(plane, window):
    h, w = plane.shape
    r = window // 2
    codes = np.zeros((h, w), dtype=np.uint64)
    for y in range(h):
        for x in range(w):
            code = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    ny = min(max(y + dy, 0), h - 1)
                    nx = min(max(x + dx, 0), w - 1)
                    code = (code << 1) | int(plane[ny, nx] < plane[y, x])
            codes[y, x] = code
    return codes


def path_oracle(costs, direction, p1, p2):
    h, w, n = costs.shape
    dx, dy = direction

    @lru_cache(maxsize=None)
    def L(y, x):
        py, px = y - dy, x - dx
        if not (0 <= py < h and 0 <= px < w):
            return tuple(costs[y, x])
        prev = L(py, px)
        m = min(prev)
        out = []
        for d in range(n):
            candidates = [prev[d], m + p2]
            if d > 0:
                candidates.append(prev[d - 1] + p1)
            if d < n - 1:
                candidates.append(prev[d + 1] + p1)
            out.append(costs[y, x, d] + (min(candidates) - m))
        return tuple(out)

    return np.array([[L(y, x) for x in range(w)] for y in range(h)])


def textured_plane(w, h, d, seed=0):
    rng = np.random.default_rng(seed)
    texture = rng.random((h, w + d + 3))
    return render_layers([SceneLayer("frame", w / 2, h / 2, w / 2, h / 2, float(d), texture)], w, h)


def test_census_constant_image_is_zero():
    grid = census_transform(PixelGrid(np.full((6, 6), 0.4)), 5)
    assert not grid.codes.any()
    assert grid.bits == 24


def test_census_hand_patch():
    plane = np.arange(1, 10, dtype=float).reshape(3, 3)
    grid = census_transform(PixelGrid(plane), 3)
    assert int(grid.codes[1, 1]) == 0b11110000
    assert grid.valid.tolist() == [[False] * 3, [False, True, False], [False] * 3]


@pytest.mark.parametrize("window", [3, 5])
def test_census_matches_oracle(rng, window):
    plane = rng.random((16, 16))
    grid = census_transform(PixelGrid(plane), window)
    assert np.array_equal(grid.codes, census_oracle(plane, window))


def test_census_rejects_even_window():
    with pytest.raises(DomainError):
        census_transform(PixelGrid(np.zeros((5, 5))), 4)


def test_hamming():
    assert hamming(np.array([0b1010], dtype=np.uint64), np.array([0b0110], dtype=np.uint64))[0] == 2


def test_self_match_has_zero_cost(rng):
    image = PixelGrid(rng.random((10, 10)))
    volume = matching_cost(StereoPair(image, image), 4, "census")
    assert np.all(volume.costs[:, :, 0] == 0)
    ad_volume = matching_cost(StereoPair(image, image), 4, "ad_census")
    assert np.all(ad_volume.costs[:, :, 0] == 0)


@pytest.mark.parametrize("mode", ["census", "ad_census"])
def test_matching_cost_matches_oracle(rng, mode):
    config = BlackboxConfig(census_window=3)
    left, right = rng.random((12, 12)), rng.random((12, 12))
    volume = matching_cost(StereoPair(PixelGrid(left), PixelGrid(right)), 5, mode, config)
    cl, cr = census_oracle(left, 3), census_oracle(right, 3)
    for y in range(12):
        for x in range(12):
            for d in range(6):
                if x - d < 0:
                    expected = OUT_OF_FRAME_COST
                else:
                    ham = bin(int(cl[y, x]) ^ int(cr[y, x - d])).count("1")
                    expected = float(ham)
                    if mode == "ad_census":
                        diff = abs(left[y, x] - right[y, x - d]) * 255
                        expected = (1 - math.exp(-diff / 10.0)) + (1 - math.exp(-ham / 8.0))
                if mode == "census":
                    assert volume.costs[y, x, d] == expected
                else:
                    assert volume.costs[y, x, d] == pytest.approx(expected, abs=1e-9)


def test_matching_cost_size_mismatch():
    with pytest.raises(DomainError):
        matching_cost(StereoPair(PixelGrid(np.zeros((8, 8))), PixelGrid(np.zeros((4, 4)))), 2)


def test_zero_penalties_collapse_to_path_count(rng):
    for paths in (4, 8):
        costs = rng.integers(0, 40, (8, 8, 8)).astype(float)
        out = sgm_aggregate(CostVolume(costs), SgmParams(p1=0, p2=0, num_paths=paths, lr_check=False))
        assert np.array_equal(out.costs, paths * costs)


def test_single_scanline_matches_dp():
    costs = np.array([[[5, 1, 9, 3], [2, 8, 0, 4], [7, 7, 1, 1], [0, 9, 9, 2], [3, 3, 3, 3]]], dtype=float)
    for direction in ((1, 0), (-1, 0)):
        got = aggregate_path(CostVolume(costs), direction, 2.0, 5.0)
        assert np.array_equal(got, path_oracle(costs, direction, 2.0, 5.0))


def test_paths_match_dp_oracle_on_random_volumes(rng):
    for _ in range(50):
        costs = rng.integers(0, 30, (8, 8, 8)).astype(float)
        volume = CostVolume(costs)
        total = np.zeros_like(costs)
        for direction in PATHS_8:
            got = aggregate_path(volume, direction, 3.0, 20.0)
            expected = path_oracle(costs, direction, 3.0, 20.0)
            assert np.array_equal(got, expected), direction
            total += expected
        out = sgm_aggregate(volume, SgmParams(p1=3, p2=20, num_paths=8))
        assert np.array_equal(out.costs, total)


def test_per_pixel_offset_shifts_aggregate(rng):
    costs = rng.integers(0, 30, (6, 7, 5)).astype(float)
    offset = rng.integers(0, 10, (6, 7)).astype(float)
    params = SgmParams(p1=2, p2=9, num_paths=4)
    base = sgm_aggregate(CostVolume(costs), params).costs
    shifted = sgm_aggregate(CostVolume(costs + offset[:, :, None]), params).costs
    assert np.array_equal(shifted, base + len(PATHS_4) * offset[:, :, None])


def test_wta_invariant_to_cost_scaling(rng):
    costs = rng.integers(0, 30, (8, 8, 6)).astype(float)
    a = 4.0
    base = wta(sgm_aggregate(CostVolume(costs), SgmParams(p1=3, p2=20)))
    scaled = wta(sgm_aggregate(CostVolume(a * costs), SgmParams(p1=3 * a, p2=20 * a)))
    assert np.array_equal(base.values, scaled.values)


def test_wta_minimum_and_ties():
    costs = np.full((2, 8, 7), 10.0)
    costs[:, :, 3] = 1.0
    d = wta(CostVolume(costs))
    assert np.all(d.values[:, 3:] == 3)
    assert not d.valid[:, :3].any()

    tie = np.full((1, 8, 7), 10.0)
    tie[:, :, 2] = tie[:, :, 5] = 0.5
    assert np.all(wta(CostVolume(tie)).values[0, 2:] == 2)


def test_wta_matches_argmin(rng):
    costs = rng.random((5, 9, 4))
    d = wta(CostVolume(costs))
    expected = np.argmin(costs, axis=2)
    xs = np.arange(9)[None, :]
    assert np.array_equal(d.values[xs - expected >= 0], expected[xs - expected >= 0])


def test_wta_marks_out_of_frame_invalid():
    costs = np.zeros((1, 4, 3))
    costs[:, :, :2] = OUT_OF_FRAME_COST
    d = wta(CostVolume(costs))
    assert d.values[0, 0] == INVALID_DISPARITY
    assert d.values[0, 3] == 2


def test_right_disparity_reads_shifted_costs():
    costs = np.full((1, 6, 3), 5.0)
    costs[0, 3, 2] = 0.0
    d = right_disparity(CostVolume(costs))
    assert d.values[0, 1] == 2


def test_lr_consistency():
    left = DisparityMap.from_array(np.full((3, 10), 2.0))
    right = DisparityMap.from_array(np.full((3, 10), 2.0))
    checked = lr_consistency(left, right, 1.0)
    assert checked.valid[:, 2:].all()
    assert not checked.valid[:, :2].any()

    bumped = right.values.copy()
    bumped[1, 5] = 6.0
    checked = lr_consistency(left, DisparityMap.from_array(bumped), 1.0)
    broken = np.argwhere(checked.valid[:, 2:] == False)  # noqa: E712
    assert broken.tolist() == [[1, 5]]


def test_blackbox_recovers_fronto_parallel_plane():
    scene = textured_plane(48, 32, 4)
    d = run_blackbox(scene.pair, BlackboxConfig(d_max=12))
    values = d.values[d.valid]
    assert values.size > 0.5 * d.valid.size
    assert np.mean(values == 4) >= 0.95

    ad_census = run_blackbox(scene.pair, BlackboxConfig(d_max=12, method="ad_census"))
    assert np.median(ad_census.values[ad_census.valid]) == 4


def test_blackbox_identical_views_give_zero():
    scene = textured_plane(32, 24, 3)
    d = run_blackbox(StereoPair(scene.left, scene.left), BlackboxConfig(d_max=8))
    assert np.all(d.values[d.valid] == 0)


def test_blackbox_unbalanced_pair_in_left_units():
    scene = textured_plane(64, 64, 8)
    right = resize_bilinear(scene.right, 32, 32)
    pair = StereoPair(scene.left, right)
    d = run_blackbox(pair, BlackboxConfig(d_max=16))
    assert (d.width, d.height) == (64, 64)
    values = d.values[d.valid]
    assert np.all(values % 2 == 0)
    assert np.mean(values == 8) >= 0.75


def test_cross_arms_and_aggregation_match_oracle(rng):
    image = PixelGrid(rng.random((9, 11)) * 0.12)
    params = CrossParams(tau1=20, tau2=6, l1=5, l2=3)
    arms = cross_arms(image, params)
    plane = image.plane() * 255
    h, w = plane.shape
    for y in range(h):
        for x in range(w):
            for k, (sx, sy) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
                length = 0
                for step in range(1, params.l1):
                    qx, qy = x + sx * step, y + sy * step
                    if not (0 <= qx < w and 0 <= qy < h):
                        break
                    to_center = abs(plane[qy, qx] - plane[y, x])
                    to_prev = abs(plane[qy, qx] - plane[qy - sy, qx - sx])
                    if to_center >= params.tau1 or to_prev >= params.tau1:
                        break
                    if step > params.l2 and to_center >= params.tau2:
                        break
                    length = step
                assert arms[y, x, k] == length

    costs = rng.random((h, w, 3))
    out = cross_aggregate(CostVolume(costs), arms)
    for y in range(h):
        for x in range(w):
            total, count = np.zeros(3), 0
            for qy in range(y - arms[y, x, 2], y + arms[y, x, 3] + 1):
                for qx in range(x - arms[qy, x, 0], x + arms[qy, x, 1] + 1):
                    total += costs[qy, qx]
                    count += 1
            np.testing.assert_allclose(out.costs[y, x], total / count, atol=1e-9)


def test_sgm_params_validation():
    with pytest.raises(ValueError):
        SgmParams(p1=10, p2=5)
    with pytest.raises(ValueError):
        SgmParams(num_paths=6)


def test_blackbox_defaults_without_config(rng):
    pair = StereoPair(PixelGrid(rng.random((10, 12))), PixelGrid(rng.random((10, 12))))
    assert np.array_equal(matching_cost(pair, 4).costs, matching_cost(pair, 4, "census", BlackboxConfig()).costs)
    scene = textured_plane(40, 16, 3)
    d = run_blackbox(scene.pair)
    assert (d.width, d.height) == (40, 16)
    assert np.all(d.values == run_blackbox(scene.pair, BlackboxConfig()).values)
