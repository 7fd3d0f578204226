"""
Soft-argmax and the distillation losses
=======================================

Disparity is the softmax-weighted mean of the bin indices. The student is
trained to match the teacher's tempered softmax over the same bins.
"""

import math

import torch

from dtpstereo.distill import (DistillConfig, TemperatureSchedule, combined_loss, kd_loss, kl_loss,
                               temperature_at)
from dtpstereo.model import soft_argmax


def pixel(values):
    # one pixel, bins on dim 1
    return torch.tensor(values, dtype=torch.float64).view(1, -1, 1, 1)


# flat logits put the estimate in the middle of the bin range
print("uniform over 4 bins:", soft_argmax(pixel([0, 0, 0, 0])).item())

# one dominant bin pulls the estimate onto it
print("peak at bin 3:", soft_argmax(pixel([0, 0, 0, 20])).item())

# weights (1, 3, 1, 1) / 6 give 4/3
print("weights 1:3:1:1 ->", soft_argmax(pixel([0, math.log(3), 0, 0])).item())

# two bins: the student is (1/2, 1/2), the teacher (1/4, 3/4); L1 gives 0.5
p, q = pixel([0, 0]), pixel([0, math.log(3)])
print("kd_loss", kd_loss(p, q, 1.0).item(), "kl_loss", kl_loss(p, q, 1.0).item())

# a high temperature flattens both distributions and the loss vanishes
for t in (0.5, 1.0, 4.0, 100.0):
    print(f"  t={t:<6} kd={kd_loss(p, q, t).item():.4f}")

# the temperature rises linearly from 0.5 to 1.0 across the distillation epochs
sched = TemperatureSchedule(0.5, 1.0, 6)
print("schedule", [round(temperature_at(sched, e), 3) for e in range(6)])

# loss modes: teacher only, ground truth only, or a weighted mix
torch.manual_seed(0)
student = torch.randn(2, 8, 4, 4)
teacher = torch.randn(2, 8, 4, 4)
gt = torch.rand(2, 4, 4) * 7
mask = torch.ones(2, 4, 4, dtype=torch.bool)
pred = soft_argmax(student)
for mode in ("KD_only", "GT_only", "KD_plus_GT"):
    loss = combined_loss(DistillConfig(mode), student, teacher, pred, gt, mask, 0.5)
    print(f"{mode:<10} {loss.item():.4f}")
