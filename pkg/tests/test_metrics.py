import colorsys

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dtpstereo.errors import ShapeError
from dtpstereo.metrics import MetricAccumulator, d1, epe
from dtpstereo.viz import colorize_disparity, colorize_error, save_rgb

ONES = np.ones(2, bool)


def test_epe_examples():
    gt = np.array([1.0, 2.0])
    assert epe(gt, gt, ONES) == 0.0
    assert epe(np.array([2.0, 5.0]), gt, ONES) == 2.0
    assert epe(np.array([6.0, 102.0]), gt, np.array([True, False])) == 5.0


def test_epe_empty_is_marker_not_zero():
    assert epe(np.zeros(3), np.ones(3), np.zeros(3, bool)) is None
    assert d1(np.zeros(3), np.ones(3), np.zeros(3, bool)) is None


def test_d1_examples():
    gt = np.zeros(2)
    assert d1(np.array([0.0, 4.0]), gt, ONES) == 50.0
    assert d1(np.array([3.0, -2.5]), gt, ONES) == 0.0
    assert d1(np.array([3.0]), np.array([0.0]), np.array([True])) == 0.0


def test_kitti_flag_adds_relative_condition():
    pred, gt = np.array([104.0, 7.0]), np.array([100.0, 2.0])
    assert d1(pred, gt, ONES) == 100.0
    assert d1(pred, gt, ONES, kitti=True) == 50.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        epe(np.zeros(3), np.zeros(4), np.ones(3, bool))


def test_accepts_tensors():
    assert epe(torch.tensor([1.0, 3.0]), torch.tensor([0.0, 0.0]), torch.tensor([True, True])) == 2.0


@given(arrays(np.float64, (6, 5), elements=st.floats(0, 50)),
       arrays(np.float64, (6, 5), elements=st.floats(0, 50)),
       arrays(bool, (6, 5)),
       arrays(np.float64, (6, 5), elements=st.floats(-1e6, 1e6)))
def test_masked_pixels_never_matter(pred, gt, mask, junk):
    bad_pred = np.where(mask, pred, junk)
    bad_gt = np.where(mask, gt, -junk)
    assert epe(pred, gt, mask) == epe(bad_pred, bad_gt, mask)
    assert d1(pred, gt, mask) == d1(bad_pred, bad_gt, mask)


@given(arrays(np.float64, (4, 4), elements=st.floats(0, 20)),
       arrays(np.float64, (4, 4), elements=st.floats(0, 20)))
def test_report_bounds(pred, gt):
    mask = np.ones((4, 4), bool)
    assert epe(pred, gt, mask) >= 0
    assert 0 <= d1(pred, gt, mask) <= 100


def test_accumulator_is_pixel_weighted():
    acc = MetricAccumulator()
    acc.update(np.array([1.0]), np.array([0.0]), np.array([True]), "a")
    acc.update(np.array([4.0, 4.0, 4.0]), np.zeros(3), np.ones(3, bool), "b")
    acc.update(np.array([9.0]), np.array([0.0]), np.array([False]), "c")
    rep = acc.report()
    assert rep.epe == pytest.approx(13 / 4)
    assert rep.d1 == 75.0
    assert rep.valid_pixel_count == 4
    assert [r["name"] for r in rep.per_image] == ["a", "b", "c"]
    assert rep.per_image[2]["epe"] is None
    assert "EPE 3.2500 px" in rep.format()


def test_empty_accumulator():
    rep = MetricAccumulator().report()
    assert rep.epe is None and rep.valid_pixel_count == 0 and "n/a" in rep.format()


# -- images ----------------------------------------------------------------

def test_images_keep_dimensions(tmp_path):
    from PIL import Image
    disp = np.random.default_rng(0).uniform(0, 31, size=(13, 21))
    rgb = colorize_disparity(disp, 32)
    err = colorize_error(disp, disp + 1, np.ones((13, 21), bool))
    assert rgb.shape == err.shape == (13, 21, 3) and rgb.dtype == np.uint8
    with Image.open(save_rgb(rgb, tmp_path / "x" / "d.png")) as im:
        assert im.size == (21, 13)


def test_error_map_warmer_for_larger_error():
    errors = np.linspace(0, 6, 13)[None]
    rgb = colorize_error(errors, np.zeros_like(errors), np.ones_like(errors, bool)) / 255.0
    # hue walks from blue (about 230 degrees) down through red (0, wrapping to negative)
    hsv = np.array([colorsys.rgb_to_hsv(*px) for px in rgb[0]])
    # the neutral midpoint has no defined hue
    hue = hsv[hsv[:, 1] > 0.05, 0] * 360
    hue = np.where(hue > 300, hue - 360, hue)
    assert hue[0] > 200 and hue[-1] < 20
    assert np.all(np.diff(hue) < 0)
    masked = colorize_error(np.array([[10.0]]), np.zeros((1, 1)), np.zeros((1, 1), bool))
    assert masked[0, 0].tolist() == [0, 0, 0]
