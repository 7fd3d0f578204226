"""Logit distillation losses, the supervised loss and the temperature schedule."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Protocol

import torch
import torch.nn.functional as F

from dtpstereo.errors import ConfigError, NumericError, ShapeError

SIGNAL_MODES = ("GT_only", "KD_plus_GT", "KD_only")
DIVERGENCES = ("L1", "KL")


class EmptyMaskWarning(UserWarning):
    pass


class TeacherHandle(Protocol):
    d_max: int

    def teacher_logits(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor: ...


@dataclass
class TemperatureSchedule:
    t_start: float = 0.5
    t_end: float = 1.0
    total_epochs: int = 20

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("temperature schedule needs at least one epoch")
        if self.t_start <= 0 or self.t_end < self.t_start:
            raise ConfigError("temperatures must be positive and nondecreasing")


@dataclass
class DistillConfig:
    signal_mode: str = "KD_only"
    divergence: str = "L1"
    gt_weight: float = 0.5

    def __post_init__(self):
        if self.signal_mode not in SIGNAL_MODES:
            raise ConfigError(f"signal_mode must be one of {SIGNAL_MODES}, got {self.signal_mode!r}")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if not 0.0 <= self.gt_weight <= 1.0:
            raise ConfigError(f"gt_weight must lie in [0, 1], got {self.gt_weight}")

    @property
    def needs_teacher(self) -> bool:
        return self.signal_mode != "GT_only"

    def to_dict(self) -> dict:
        return asdict(self)


def temperature_at(schedule: TemperatureSchedule, epoch: int) -> float:
    """Linear per-epoch ramp from t_start (first epoch) to t_end (last epoch).

    A one-epoch schedule stays at t_start.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return schedule.t_start
    frac = epoch / (schedule.total_epochs - 1)
    if frac == 1.0:
        return schedule.t_end
    return schedule.t_start + (schedule.t_end - schedule.t_start) * frac


def _check_pair(p: torch.Tensor, q: torch.Tensor, t: float) -> None:
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    if p.shape != q.shape:
        raise ShapeError(f"student logits {tuple(p.shape)} and teacher logits {tuple(q.shape)} differ")


def kd_loss(p: torch.Tensor, q: torch.Tensor, t: float) -> torch.Tensor:
    """Sum over bins of |softmax(p/t) - softmax(q/t)|, averaged over the other axes.

    Bins live on dim 1. ``q`` (the teacher) receives no gradient.
    """
    _check_pair(p, q, t)
    ps = F.softmax(p / t, dim=1)
    qs = F.softmax(q.detach() / t, dim=1)
    return (ps - qs).abs().sum(dim=1).mean()


def kl_loss(p: torch.Tensor, q: torch.Tensor, t: float) -> torch.Tensor:
    """KL(softmax(q/t) || softmax(p/t)) summed over bins, averaged over the other axes."""
    _check_pair(p, q, t)
    log_p = F.log_softmax(p / t, dim=1)
    log_q = F.log_softmax(q.detach() / t, dim=1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=1).mean()


def supervised_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 (beta = 1 px) averaged over mask-true pixels.

    An empty mask yields a zero that still carries the graph, plus an
    :class:`EmptyMaskWarning`.
    """
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeError(f"pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, mask {tuple(mask.shape)}")
    mask = mask.bool()
    if not mask.any():
        warnings.warn("supervised loss over an empty mask", EmptyMaskWarning, stacklevel=2)
        return pred.sum() * 0.0
    return F.smooth_l1_loss(pred[mask], gt[mask], beta=1.0)


def divergence(config: DistillConfig, p, q, t):
    return kd_loss(p, q, t) if config.divergence == "L1" else kl_loss(p, q, t)


def combined_loss(config: DistillConfig, p, q, pred, gt, mask, t) -> torch.Tensor:
    if config.signal_mode == "GT_only":
        return supervised_loss(pred, gt, mask)
    if q is None:
        raise ConfigError(f"{config.signal_mode} needs teacher logits")
    kd = divergence(config, p, q, t)
    if config.signal_mode == "KD_only":
        return kd
    if gt is None or mask is None:
        raise ConfigError("KD_plus_GT needs ground truth")
    w = config.gt_weight
    return w * supervised_loss(pred, gt, mask) + (1.0 - w) * kd


def check_finite(loss: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    return loss
