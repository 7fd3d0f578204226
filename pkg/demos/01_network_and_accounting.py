"""
Building the stereo network and counting its cost
=================================================

The network is described by a list of layer nodes. The same description
drives the PyTorch model, the parameter and FLOP counter and the pruner.
"""

import torch

from dtpstereo.accounting import count_flops, count_params, infer_shapes
from dtpstereo.config import build_config
from dtpstereo.model import DTPNet

# the compact student at full disparity range, 16 base channels
cfg = build_config("Setting3", d_max=192, base_channels=16)
print(len(cfg.layers), "layer nodes")
for spec in cfg.layers[:6]:
    print(f"  {spec.name:<20} {spec.kind:<18} {spec.in_channels:>3} -> {spec.out_channels:<3} {spec.module}")

# parameters per module; no resolution needed
print(count_params(cfg).format())

# FLOPs depend on the input size; the default is 540x960
print(count_flops(cfg).format())
print(count_flops(cfg, 256, 512).format())

# the counter never runs the model, it walks the node shapes
shapes = infer_shapes(cfg, 64, 96)
print("cost volume", shapes["cv3"], "logits", shapes["reg_logits"])

# the built model agrees with the counter tensor by tensor
net = DTPNet(cfg).eval()
print("model parameters", net.num_parameters(), "counter", count_params(cfg).total.params)

# one forward pass: per-pixel logits over 192 bins and the soft-argmax disparity
left, right = torch.rand(1, 3, 64, 96), torch.rand(1, 3, 64, 96)
with torch.no_grad():
    logits, disp = net(left, right)
print("logits", tuple(logits.shape), "disparity", tuple(disp.shape),
      f"range {disp.min():.1f}..{disp.max():.1f}")

# the larger settings add feature stages and hourglasses
for setting in ("Setting1", "Setting2", "Setting3"):
    print(setting, count_params(build_config(setting, 192, 16)).total.params)
