import numpy as np
import pytest

from errors import DomainError
from stereo_core import (
    INVALID_DISPARITY,
    ContinuousCoord,
    DisparityMap,
    PixelGrid,
    StereoPair,
    bilinear_sample,
    bilinear_sample_many,
    resize_bilinear,
    resize_disparity_nearest,
    resize_nearest,
    scale_disparity_values,
)


def interpolate_oracle(data, x, y):
    """Double-loop bilinear interpolation over the four neighbours"""
    h, w, c = data.shape
    out = np.zeros(c)
    for yy in range(h):
        for xx in range(w):
            wx = max(0.0, 1.0 - abs(x - xx))
            wy = max(0.0, 1.0 - abs(y - yy))
            out += wx * wy * data[yy, xx]
    return out


def test_bilinear_sample_small_grid():
    grid = PixelGrid(np.array([[0.0, 1.0], [2.0, 3.0]]))
    assert bilinear_sample(grid, ContinuousCoord(0, 0))[0] == 0.0
    assert bilinear_sample(grid, ContinuousCoord(0.5, 0.5))[0] == pytest.approx(1.5)
    assert bilinear_sample(grid, ContinuousCoord(1, 1))[0] == 3.0


def test_bilinear_sample_matches_oracle(rng):
    for _ in range(100):
        data = rng.random((4, 4, 2))
        grid = PixelGrid(data)
        x, y = rng.uniform(0, 3, 2)
        got = bilinear_sample(grid, ContinuousCoord(x, y))
        np.testing.assert_allclose(got, interpolate_oracle(data, x, y), atol=1e-9)


def test_bilinear_sample_out_of_bounds():
    grid = PixelGrid(np.zeros((3, 3)))
    with pytest.raises(DomainError):
        bilinear_sample(grid, ContinuousCoord(2.5, 0))
    with pytest.raises(DomainError):
        bilinear_sample(grid, ContinuousCoord(0, -0.1))


def test_bilinear_is_linear_between_centers(rng):
    grid = PixelGrid(rng.random((3, 5)))
    ts = np.linspace(0, 1, 7)
    values = bilinear_sample_many(grid, 1 + ts, np.full_like(ts, 2.0))[:, 0]
    a, b = grid.data[2, 1, 0], grid.data[2, 2, 0]
    np.testing.assert_allclose(values, a + ts * (b - a), atol=1e-12)


def test_resize_bilinear_identity_and_midpoint(rng):
    grid = PixelGrid(rng.random((5, 6, 3)))
    same = resize_bilinear(grid, 6, 5)
    assert np.array_equal(same.data, grid.data)

    line = resize_bilinear(PixelGrid(np.array([[0.0, 2.0]])), 3, 1)
    np.testing.assert_allclose(line.plane()[0], [0.0, 1.0, 2.0])


def test_resize_bilinear_matches_oracle(rng):
    data = rng.random((8, 8, 1))
    out = resize_bilinear(PixelGrid(data), 5, 5)
    for j in range(5):
        for i in range(5):
            expected = interpolate_oracle(data, i * 7 / 4, j * 7 / 4)
            np.testing.assert_allclose(out.data[j, i], expected, atol=1e-9)


def test_resize_bilinear_degenerate_samples_centre():
    grid = PixelGrid(np.array([[0.0, 2.0, 4.0]]))
    assert resize_bilinear(grid, 1, 1).data[0, 0, 0] == pytest.approx(2.0)


def test_resize_then_sample_agrees_with_source(rng):
    grid = PixelGrid(rng.random((6, 9)))
    big = resize_bilinear(grid, 17, 11)
    xs = np.arange(17) * 8 / 16
    ys = np.full(17, 5 * 4 / 10)
    direct = bilinear_sample_many(grid, xs, ys)[:, 0]
    np.testing.assert_allclose(big.data[4, :, 0], direct, atol=1e-9)


def test_resize_nearest():
    grid = PixelGrid(np.array([[5.0, 9.0]]))
    assert resize_nearest(grid, 4, 1).plane()[0].tolist() == [5.0, 5.0, 9.0, 9.0]

    data = np.arange(12, dtype=float).reshape(3, 4)
    assert np.array_equal(resize_nearest(PixelGrid(data), 4, 3).plane(), data)


def test_resize_nearest_tie_goes_to_lower_index():
    # 3 -> 5 maps output 1 to source 0.5
    out = resize_nearest(PixelGrid(np.array([[1.0, 2.0, 3.0]])), 5, 1).plane()[0]
    assert out.tolist() == [1.0, 1.0, 2.0, 2.0, 3.0]


def test_resize_nearest_values_are_a_subset(rng):
    data = rng.integers(0, 20, (7, 5)).astype(float)
    out = resize_nearest(PixelGrid(data), 13, 3)
    assert set(np.unique(out.data)) <= set(np.unique(data))


def test_resize_disparity_copies_sentinel():
    d = DisparityMap.from_array(np.array([[3.0, 4.0]]), valid=np.array([[True, False]]))
    up = resize_disparity_nearest(d, 4, 2)
    assert up.values.tolist() == [[3.0, 3.0, INVALID_DISPARITY, INVALID_DISPARITY]] * 2


def test_scale_disparity_values():
    d = DisparityMap.from_array(np.array([[10.0, 2.0]]), valid=np.array([[True, False]]))
    assert np.array_equal(scale_disparity_values(d, 1.0).values, d.values)
    half = scale_disparity_values(d, 0.5)
    assert half.values[0, 0] == 5.0
    assert half.values[0, 1] == INVALID_DISPARITY
    assert scale_disparity_values(d, 4.0).values[0, 0] == 40.0
    with pytest.raises(DomainError):
        scale_disparity_values(d, 0.0)
    with pytest.raises(DomainError):
        scale_disparity_values(d, -1.0)


def test_scale_round_trip(rng):
    d = DisparityMap.from_array(rng.uniform(0, 30, (6, 6)))
    back = scale_disparity_values(scale_disparity_values(d, 2.7), 1 / 2.7)
    np.testing.assert_allclose(back.values, d.values, atol=1e-9)


def test_disparity_map_rejects_stray_negatives():
    with pytest.raises(DomainError):
        DisparityMap.from_array(np.array([[-0.5]]))
    d = DisparityMap.from_array(np.array([[3.0, 40.0]]))
    with pytest.raises(DomainError):
        d.validate(32)


def test_pixel_grid_rejects_non_finite():
    with pytest.raises(DomainError):
        PixelGrid(np.array([[np.nan]]))


def test_stereo_pair_kappa():
    left = PixelGrid(np.zeros((8, 16)))
    right = PixelGrid(np.zeros((4, 8)))
    pair = StereoPair(left, right)
    assert pair.kappa == 2.0
    assert not pair.balanced
    with pytest.raises(DomainError):
        StereoPair(left, PixelGrid(np.zeros((5, 8))))
    with pytest.raises(DomainError):
        StereoPair(right, left)
