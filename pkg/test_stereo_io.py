import numpy as np
import pytest

from errors import InputError
from stereo_core import INVALID_DISPARITY, DisparityMap, PixelGrid
from stereo_io import read_disparity, read_image, read_pfm, to_gray, write_pfm, write_pgm, write_png


def test_pfm_keeps_values_and_holes(tmp_path):
    values = np.array([[1.5, 2.25, 0.0], [7.0, 3.5, 12.75]])
    valid = np.array([[True, False, True], [True, True, False]])
    path = tmp_path / "d.pfm"
    write_pfm(DisparityMap.from_array(values, valid), path)

    back = read_disparity(path)
    assert np.array_equal(back.valid, valid)
    assert np.array_equal(back.values[valid], values[valid])
    assert np.all(back.values[~valid] == INVALID_DISPARITY)


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    path = tmp_path / "d.pfm"
    write_pfm(DisparityMap.from_array(np.array([[1.0, 2.0], [3.0, 4.0]])), path)
    raw = path.read_bytes()
    header_end = raw.index(b"-1.0\n") + len(b"-1.0\n")
    first_row = np.frombuffer(raw[header_end : header_end + 8], dtype="<f4")
    assert first_row.tolist() == [3.0, 4.0]


def test_read_big_endian_pfm(tmp_path):
    path = tmp_path / "be.pfm"
    data = np.array([[4.0, 5.0], [6.0, np.inf]], dtype=">f4")
    path.write_bytes(b"Pf\n2 2\n1.0\n" + np.flipud(data).tobytes())
    d = read_disparity(path)
    assert d.values[0].tolist() == [4.0, 5.0]
    assert d.values[1, 0] == 6.0
    assert not d.valid[1, 1]


def test_read_pfm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"P6\n2 2\n255\n")
    with pytest.raises(InputError):
        read_pfm(path)
    short = tmp_path / "short.pfm"
    short.write_bytes(b"Pf\n4 4\n-1.0\n" + np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(InputError):
        read_pfm(short)


def test_missing_files_raise_input_error(tmp_path):
    with pytest.raises(InputError):
        read_image(tmp_path / "nope.png")
    with pytest.raises(InputError):
        read_disparity(tmp_path / "nope.pfm")


def test_png_gray_and_rgb(tmp_path, rng):
    gray = PixelGrid(np.round(rng.random((5, 7)) * 255) / 255)
    write_png(gray, tmp_path / "g.png")
    back = read_image(tmp_path / "g.png")
    assert back.channels == 1
    np.testing.assert_allclose(back.data, gray.data, atol=1e-12)

    rgb = np.zeros((2, 2, 3))
    rgb[0, 0] = [1.0, 0.0, 0.0]
    write_png(PixelGrid(rgb), tmp_path / "c.png")
    color = read_image(tmp_path / "c.png")
    assert color.channels == 3
    assert color.data[0, 0].tolist() == [1.0, 0.0, 0.0]


def test_pgm_16_bit(tmp_path):
    grid = PixelGrid(np.array([[0.0, 1.0], [1000 / 65535, 0.5]]))
    write_pgm(grid, tmp_path / "g.pgm", bits=16)
    back = read_image(tmp_path / "g.pgm")
    assert back.data[1, 0, 0] == pytest.approx(1000 / 65535)
    assert back.data[0, 1, 0] == 1.0


def test_to_gray_luma():
    rgb = PixelGrid(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]]))
    np.testing.assert_allclose(to_gray(rgb).plane()[0], [0.299, 0.587, 0.114])
