from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from btnet import netpbm
from btnet.resample import (ErrorCurve, error_curve, error_upper_bound, mixed_fourth_difference, resize_bilinear,
                            resize_bilinear_batch, resize_nearest, to_gray)

CORPUS = Path(__file__).parent / "data" / "corpus"
images = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 1))


def load_corpus():
    return [to_gray(netpbm.read(p)) for p in sorted(CORPUS.glob("*.pgm"))]


@given(img=images)
def test_same_size_resize_is_identity(img):
    assert np.array_equal(resize_bilinear(img, *img.shape), img)
    assert np.array_equal(resize_nearest(img, *img.shape), img)


@given(c=st.floats(0, 1), h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 20), ow=st.integers(1, 20))
def test_constant_stays_constant(c, h, w, oh, ow):
    img = np.full((h, w), c)
    np.testing.assert_allclose(resize_bilinear(img, oh, ow), c, atol=1e-12)
    assert np.all(resize_nearest(img, oh, ow) == c)


@settings(max_examples=50)
@given(img=images, oh=st.integers(1, 15), ow=st.integers(1, 15))
def test_output_within_input_range(img, oh, ow):
    out = resize_bilinear(img, oh, ow)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def hand_bilinear(img, oh, ow):
    """Per-pixel evaluation of the half-pixel formula with clamped source coordinates."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = min(max((i + 0.5) * h / oh - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) * w / ow - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_checker_2x2_to_4x4():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    got = resize_bilinear(img, 4, 4)
    np.testing.assert_allclose(got, hand_bilinear(img, 4, 4), atol=1e-12)
    # source coordinates 0, .25, .75, 1 along each axis
    v = np.array([0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(got, v[:, None] + v[None, :] - 2 * np.outer(v, v), atol=1e-12)


@settings(max_examples=30)
@given(img=images, oh=st.integers(1, 12), ow=st.integers(1, 12))
def test_matches_hand_formula(img, oh, ow):
    np.testing.assert_allclose(resize_bilinear(img, oh, ow), hand_bilinear(img, oh, ow), atol=1e-12)


def test_nearest_2x_replicates_blocks():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    want = np.kron(img, np.ones((2, 2)))
    assert np.array_equal(resize_nearest(img, 4, 4), want)


def test_batch_resize_matches_per_image():
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 8, 8))
    got = resize_bilinear_batch(x, 5, 3)
    for n in range(2):
        want = resize_bilinear(np.moveaxis(x[n], 0, -1), 5, 3)
        np.testing.assert_allclose(got[n], np.moveaxis(want, -1, 0), atol=1e-12)


def test_zero_output_size_rejected():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((3, 3)), 0, 2)


def grid(f, n=8):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return f(x, y)


def test_fourth_difference_of_x2y2_is_four():
    d = mixed_fourth_difference(grid(lambda x, y: x ** 2 * y ** 2))
    assert d.shape == (6, 6)
    np.testing.assert_allclose(d, 4.0)
    assert error_upper_bound(grid(lambda x, y: x ** 2 * y ** 2)) == 4 / 64 == 0.0625


@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5), d=st.floats(-5, 5))
def test_fourth_difference_annihilates_bilinear_functions(a, b, c, d):
    np.testing.assert_allclose(mixed_fourth_difference(grid(lambda x, y: a * x * y + b * x + c * y + d)), 0,
                               atol=1e-9)


def test_constant_bound_is_zero_and_small_images_rejected():
    assert error_upper_bound(np.full((5, 5), 0.3)) == 0
    with pytest.raises(ValueError):
        mixed_fourth_difference(np.zeros((2, 5)))


@given(img=arrays(np.float64, (6, 6), elements=st.floats(0, 1)), c=st.floats(0, 10))
def test_bound_is_positively_homogeneous(img, c):
    assert error_upper_bound(c * img) == pytest.approx(c * error_upper_bound(img), rel=1e-9, abs=1e-12)


def test_rgb_uses_channel_mean():
    rng = np.random.default_rng(1)
    rgb = rng.random((6, 6, 3))
    assert error_upper_bound(rgb) == pytest.approx(error_upper_bound(rgb.mean(axis=2)))


def test_max_reduction_dominates_mean():
    img = np.random.default_rng(2).random((9, 9))
    assert error_upper_bound(img, "max") >= error_upper_bound(img)


def test_constant_image_curve_is_zero():
    curve = error_curve([np.full((112, 112), 0.5)], [7, 14, 28, 56])
    assert curve.mean_bound == [0.0] * 4


def test_curve_argument_checks():
    with pytest.raises(ValueError):
        error_curve([np.zeros((112, 112))], [2])
    with pytest.raises(ValueError):
        error_curve([np.zeros((50, 50))], [7])


def test_corpus_curve_decreases(tmp_path):
    imgs = load_corpus()
    assert len(imgs) >= 20
    curve = error_curve(imgs, [7, 14, 28, 56])
    b = curve.mean_bound
    assert all(x > y for x, y in zip(b, b[1:]))
    assert b[0] / b[3] > b[2] / b[3]
    curve.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "resolution,mean_bound,n_images"
    assert ErrorCurve.from_csv(tmp_path / "c.csv") == curve


def test_lower_resolution_has_larger_bound_per_image():
    img = load_corpus()[0]
    assert error_upper_bound(resize_bilinear(img, 14, 14)) > error_upper_bound(resize_bilinear(img, 56, 56))
