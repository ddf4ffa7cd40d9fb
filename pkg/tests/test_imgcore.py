import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nanoseg.imgcore import (
    PgmFormatError,
    PgmSizeError,
    as_gray_image,
    as_mask,
    normalize,
    read_mask,
    read_pgm,
    write_mask,
    write_pgm,
)


def test_write_pgm_8bit_golden_bytes(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    path = tmp_path / "g.pgm"
    write_pgm(img, path, bit_depth=8)
    # 0.5*255 + 0.5 = 128.0 rounds half up to 128; 0.25*255 = 63.75 -> 64
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])


def test_write_pgm_16bit_big_endian(tmp_path):
    path = tmp_path / "g.pgm"
    write_pgm(np.array([[1.0, 0.0]]), path)
    assert path.read_bytes() == b"P5\n2 1\n65535\n\xff\xff\x00\x00"


def test_read_pgm_header_comments_and_whitespace(tmp_path):
    raw = b"P5 # magic\n# a comment line\n  3\t1 # dims\n255\n\x00\x7f\xff"
    path = tmp_path / "c.pgm"
    path.write_bytes(raw)
    img = read_pgm(path)
    assert img.shape == (1, 3)
    np.testing.assert_allclose(img, [[0.0, 127 / 255, 1.0]])


def test_read_pgm_rejects_p2_and_bad_tokens(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(PgmFormatError, match="P5"):
        read_pgm(p)
    p.write_bytes(b"P5\n1 x\n255\n\x00")
    with pytest.raises(PgmFormatError, match="height"):
        read_pgm(p)
    p.write_bytes(b"P5\n1 1\n70000\n\x00\x00")
    with pytest.raises(PgmFormatError, match="maxval"):
        read_pgm(p)
    p.write_bytes(b"P5\n1 1\n")
    with pytest.raises(PgmFormatError, match="truncated"):
        read_pgm(p)


def test_read_pgm_truncated_payload(tmp_path):
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(PgmSizeError, match="2 bytes, expected 16"):
        read_pgm(p)


def test_read_pgm_nonsquare_row_major(tmp_path):
    # 3 wide, 2 tall: the first row of samples must land in img[0].
    p = tmp_path / "r.pgm"
    p.write_bytes(b"P5\n3 2\n255\n" + bytes([10, 20, 30, 40, 50, 60]))
    img = read_pgm(p)
    assert img.shape == (2, 3)
    np.testing.assert_allclose(img * 255, [[10, 20, 30], [40, 50, 60]])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)),
              elements=st.floats(0, 1, width=16)))
def test_pgm_16bit_roundtrip_within_quantization(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("io") / "rt.pgm"
    write_pgm(img, path, bit_depth=16)
    back = read_pgm(path)
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-12


def test_pgm_quantized_values_survive_roundtrip_exactly(tmp_path):
    img = np.arange(256).reshape(16, 16) / 255.0
    path = tmp_path / "q.pgm"
    write_pgm(img, path, bit_depth=8)
    assert np.array_equal(read_pgm(path), img)


def test_write_pgm_clamps_out_of_range(tmp_path):
    path = tmp_path / "c.pgm"
    write_pgm(np.array([[-3.0, 7.0]]), path, bit_depth=8)
    assert read_pgm(path).tolist() == [[0.0, 1.0]]


def test_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    mask = rng.random((9, 5)) > 0.6
    path = tmp_path / "m.pgm"
    write_mask(mask, path)
    assert np.array_equal(read_mask(path), mask)


def test_normalize_spans_unit_interval():
    img = np.array([[2.0, 4.0], [3.0, 2.0]])
    out = normalize(img)
    assert out.min() == 0.0 and out.max() == 1.0
    np.testing.assert_allclose(out, [[0.0, 1.0], [0.5, 0.0]])
    np.testing.assert_array_equal(normalize(out), out)


def test_normalize_constant_is_zero():
    assert not normalize(np.full((3, 3), 0.7)).any()


@pytest.mark.parametrize("bad", [np.zeros(4), np.zeros((2, 2, 2)), np.zeros((0, 3))])
def test_shape_validation(bad):
    with pytest.raises(ValueError, match="2D"):
        as_gray_image(bad)
    with pytest.raises(ValueError, match="2D"):
        as_mask(bad)


def test_coercions():
    img = as_gray_image([[1, 2], [3, 4]])
    assert img.dtype == np.float64
    mask = as_mask([[0, 2], [1, 0]])
    assert mask.dtype == bool and mask.tolist() == [[False, True], [True, False]]


def test_write_pgm_rejects_other_depths(tmp_path):
    with pytest.raises(ValueError, match="bit_depth"):
        write_pgm(np.zeros((2, 2)), tmp_path / "x.pgm", bit_depth=12)
