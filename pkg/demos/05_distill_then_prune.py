"""
Distill, then prune, on a toy problem
=====================================

A wide teacher is trained on synthetic pairs with ground truth. A small
student learns from the teacher's logits alone, then goes through rounds
of pruning and finetuning. Takes under a minute on a CPU.
"""

import torch

from dtpstereo.accounting import count_params
from dtpstereo.config import build_config
from dtpstereo.data.loaders import DatasetSpec, make_dataset
from dtpstereo.distill import DistillConfig
from dtpstereo.model import DTPNet
from dtpstereo.training import TrainingPlan, dtp_train, evaluate, seed_everything, train_supervised

D_MAX = 16
train = make_dataset(DatasetSpec(root="synthetic://1/32x48/12", n=96, d_max=D_MAX))
val = make_dataset(DatasetSpec(root="synthetic://2/32x48/12", n=8, d_max=D_MAX))

seed_everything(0)
teacher = DTPNet(build_config("Setting1", D_MAX, 8))
print("untrained teacher", evaluate(teacher, val).format())
train_supervised(teacher, train, val, TrainingPlan(teacher_epochs=20, batch_size=4), seed=0)
print("teacher", evaluate(teacher, val).format())

# student: the compact setting, no ground truth during training
student = DTPNet(build_config("Setting3", D_MAX, 8))
plan = TrainingPlan(distill_epochs=15, prune_steps=3, prune_rate=0.1, finetune_epochs=3, batch_size=4)
result = dtp_train(plan, teacher, student, train, val, DistillConfig("KD_only"))

for rec in result.history:
    print(f"{rec['phase']:<8} EPE {rec['epe']:.3f} px  D1 {rec['d1']:.2f}%  params {rec['params']}")

print("teacher params", count_params(teacher.config).total.params,
      "final student", count_params(result.student.config).total.params)
with torch.no_grad():
    _, disp = result.student.eval()(*[torch.rand(1, 3, 32, 48)] * 2)
print("student output", tuple(disp.shape))
