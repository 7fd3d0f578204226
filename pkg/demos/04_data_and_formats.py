"""
Synthetic stereo pairs and disparity file formats
=================================================

A seeded generator stands in for real datasets: fronto-parallel planes with
integer disparities, the right view warped from the left. PFM and KITTI
16-bit PNG readers handle the real ones.
"""

import io

import numpy as np
from PIL import Image

from dtpstereo.data.formats import read_kitti_disparity, read_pfm, write_kitti_disparity, write_pfm
from dtpstereo.data.loaders import DatasetSpec, batches, make_dataset
from dtpstereo.data.synthetic import synth_stereo
from dtpstereo.viz import colorize_disparity, save_rgb

s = synth_stereo(seed=3, h=64, w=96, max_d=24)
print("left", s.left.shape, "valid", f"{100 * s.valid_mask.mean():.1f}%",
      "disparity", s.gt_disparity[s.valid_mask].min(), "..", s.gt_disparity.max())

# the ground truth lives in the left view: left[y, x] appears at right[y, x - d]
ys, xs = np.nonzero(s.valid_mask)
d = s.gt_disparity[ys, xs].astype(int)
print("warp identity holds:", np.array_equal(s.left[ys, xs], s.right[ys, xs - d]))

save_rgb(colorize_disparity(s.gt_disparity, 24), "demo_out/synthetic_gt.png")
save_rgb((s.left * 255).astype(np.uint8), "demo_out/synthetic_left.png")

# datasets are described by a spec; synthetic roots encode seed, size and range
ds = make_dataset(DatasetSpec(root="synthetic://1/32x48/12", n=10, d_max=16))
for b in batches(ds, 4, seed=0, epoch=0, training=True, crop=(16, 24)):
    print("batch", b.indices, tuple(b.left.shape))

# PFM: little-endian floats stored bottom row first
disp = np.arange(12, dtype=np.float32).reshape(3, 4)
data = write_pfm(disp)
print("PFM header", data[:12], "round trip", np.array_equal(read_pfm(data), disp))

# KITTI: uint16 PNG, value / 256 px, zero means no measurement
buf = io.BytesIO()
Image.fromarray(np.array([[512, 0, 1000]], dtype=np.uint16)).save(buf, format="PNG")
d, valid = read_kitti_disparity(buf.getvalue())
print("KITTI", d.tolist(), valid.tolist())
again, again_valid = read_kitti_disparity(write_kitti_disparity(d, valid))
print("re-encoded equal:", np.array_equal(again, d) and np.array_equal(again_valid, valid))
