import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays, array_shapes

from hiegnet import morphology as mo
from hiegnet import pnm


@given(arrays(np.uint8, array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=30)))
def test_pgm_round_trip(img):
    assert np.array_equal(pnm.decode_pnm(pnm.encode_pgm(img)), img)


def test_pgm_exact_bytes():
    img = np.array([[0, 255], [7, 9]], np.uint8)
    assert pnm.encode_pgm(img) == b"P5\n2 2\n255\n" + bytes([0, 255, 7, 9])


def test_header_comments_accepted():
    buf = b"P5 # c\n2 1\n# another\n255\n" + bytes([3, 4])
    assert pnm.decode_pnm(buf).tolist() == [[3, 4]]


@pytest.mark.parametrize("buf,offset", [
    (b"P2\n1 1\n255\n\x00", 0),
    (b"P5\n1 1\n65535\n\x00\x00", 7),
    (b"P5\n2 2\n255\n\x00", 12),
    (b"P5\nx 2\n255\n", 3),
])
def test_malformed_reports_offset(buf, offset):
    with pytest.raises(pnm.PNMError) as e:
        pnm.decode_pnm(buf)
    assert e.value.offset == offset


def test_mask_round_trip(tmp_path):
    b = np.zeros((5, 7), bool)
    b[1:4, 2:6] = True
    m = mo.InstanceMask(b, origin=(12.5, -3.0), resolution=0.252)
    m.save(tmp_path / "m.pgm")
    back = mo.InstanceMask.load(tmp_path / "m.pgm")
    assert np.array_equal(back.bitmap, b)
    assert back.origin == (12.5, -3.0) and back.resolution == 0.252
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5") and set(raw[len(b"P5\n7 5\n255\n"):]) <= {0, 255}


def test_ppm_luminance(tmp_path):
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[..., 0] = 100
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 2\n255\n" + rgb.tobytes())
    r = mo.Raster.load(tmp_path / "c.ppm")
    assert r.data[0, 0] == pytest.approx(29.9)
