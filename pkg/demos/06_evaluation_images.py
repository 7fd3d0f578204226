"""
Metrics and error images
========================

EPE is the mean absolute disparity error over valid pixels; D1 the share
of valid pixels off by more than 3 px. Error maps go from blue (small) to
red (large), invalid pixels black.
"""

import numpy as np

from dtpstereo.metrics import MetricAccumulator, d1, epe
from dtpstereo.viz import colorize_disparity, colorize_error, save_rgb

gt = np.array([[1.0, 2.0, 10.0, 4.0]])
pred = np.array([[1.5, 2.0, 15.0, 100.0]])
mask = np.array([[True, True, True, False]])
print("EPE", epe(pred, gt, mask), "D1", d1(pred, gt, mask))

# masked pixels never count, whatever they hold
print("with junk in masked pixel:", epe(np.where(mask, pred, 1e9), gt, mask))

# no valid pixels is a marker, not zero
print("empty mask:", epe(pred, gt, np.zeros_like(mask)))

# the official KITTI outlier also needs a 5 % relative error
print("KITTI D1", d1(np.array([104.0, 7.0]), np.array([100.0, 2.0]), np.ones(2, bool), kitti=True))

# the accumulator weights images by their valid pixel count
acc = MetricAccumulator()
rng = np.random.default_rng(0)
for i in range(3):
    g = rng.uniform(0, 30, (32, 48))
    p = g + rng.normal(0, 1 + i, g.shape)
    acc.update(p, g, g > 2, f"img{i}")
    save_rgb(colorize_disparity(p, 32), f"demo_out/img{i}_disparity.png")
    save_rgb(colorize_error(p, g, g > 2), f"demo_out/img{i}_error.png")
print(acc.report().format())
