import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from btnet import netpbm


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))))
@settings(max_examples=60)
def test_eight_bit_round_trip(pix):
    img = pix.astype(np.float32) / 255
    if pix.shape[2] == 1:
        img = img[:, :, 0]
    out = netpbm.decode(netpbm.encode(img))
    np.testing.assert_array_equal(np.round(out * 255).astype(np.uint8).reshape(pix.shape), pix)


def test_header_with_comment():
    buf = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
    np.testing.assert_allclose(netpbm.decode(buf).reshape(-1), [0.0, 1.0])


def test_rejects_other_formats():
    with pytest.raises(ValueError):
        netpbm.decode(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(ValueError):
        netpbm.decode(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ValueError):
        netpbm.decode(b"P5\n1")
    with pytest.raises(ValueError):
        netpbm.encode(np.zeros((2, 2, 2)))
