"""Supervised teacher training, logit distillation and the distill-then-prune loop."""
from __future__ import annotations

import copy
import json
import logging
import random
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from dtpstereo.accounting import count_params
from dtpstereo.checkpoint import save_checkpoint
from dtpstereo.data.loaders import batches, unpad
from dtpstereo.distill import (DistillConfig, TemperatureSchedule, combined_loss, supervised_loss,
                               temperature_at)
from dtpstereo.errors import ConfigError, DivergenceError, NumericError
from dtpstereo.metrics import MetricAccumulator, MetricReport
from dtpstereo.pruning import build_dependency_graph, prune_step

log = logging.getLogger(__name__)


@dataclass
class TrainingPlan:
    distill_epochs: int = 20      # M: initial distillation
    prune_steps: int = 5          # E
    prune_rate: float = 0.1       # r, fraction of each group's channels per step
    lr: float = 1e-3              # gamma
    finetune_epochs: int = 5      # distillation epochs after every prune step
    teacher_epochs: int = 20
    batch_size: int = 8

    def __post_init__(self):
        if not 0 < self.prune_rate < 1:
            raise ConfigError(f"prune_rate must lie in (0, 1), got {self.prune_rate}")
        if self.prune_steps < 1:
            raise ConfigError("prune_steps must be >= 1")
        for name in ("distill_epochs", "finetune_epochs", "teacher_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class OptimizerConfig:
    kind: str = "AdamW"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    # step decay: from `decay_epoch` on (within a phase) use `decay_lr`
    decay_epoch: int | None = None
    decay_lr: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("AdamW", "Adam"):
            raise ConfigError(f"optimizer kind must be AdamW or Adam, got {self.kind!r}")

    def build(self, params, lr: float) -> torch.optim.Optimizer:
        cls = torch.optim.AdamW if self.kind == "AdamW" else torch.optim.Adam
        return cls(params, lr=lr, betas=(self.beta1, self.beta2), weight_decay=self.weight_decay)

    def lr_at(self, base_lr: float, epoch: int) -> float:
        if self.decay_epoch is not None and epoch >= self.decay_epoch:
            return self.decay_lr
        return base_lr


class JsonlLog:
    """Line-delimited JSON records to a file and/or a stream."""

    def __init__(self, path=None, stream=None):
        self.path = Path(path) if path else None
        self.stream = stream
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, **record):
        self.records.append(record)
        line = json.dumps(record, sort_keys=False)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(line + "\n")
        if self.stream:
            print(line, file=self.stream, flush=True)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@torch.no_grad()
def evaluate(model, dataset, batch_size: int = 8, device="cpu", on_sample=None) -> MetricReport:
    """Eval-mode metrics; predictions are un-padded before scoring.

    ``on_sample(name, pred, gt, mask)`` receives each un-padded prediction.
    """
    was_training = model.training
    model.eval()
    acc = MetricAccumulator()
    for b in batches(dataset, batch_size, training=False, shuffle=False):
        _, disp = model(b.left.to(device), b.right.to(device))
        disp = disp.cpu()
        for k in range(disp.shape[0]):
            pred = unpad(disp[k], b.pads[k])
            gt, mask = unpad(b.gt[k], b.pads[k]), unpad(b.mask[k], b.pads[k])
            acc.update(pred, gt, mask, b.names[k])
            if on_sample is not None:
                on_sample(b.names[k], pred, gt, mask)
    model.train(was_training)
    return acc.report()


class TeacherCache:
    """Per-sample teacher logits; only valid when samples are not randomly cropped."""

    def __init__(self):
        self.store: dict[int, torch.Tensor] = {}

    def get(self, teacher, batch, device):
        missing = [i for i in batch.indices if i not in self.store]
        if missing:
            pos = [batch.indices.index(i) for i in missing]
            q = teacher.teacher_logits(batch.left[pos].to(device), batch.right[pos].to(device))
            for i, row in zip(missing, q.cpu()):
                self.store[i] = row
        return torch.stack([self.store[i] for i in batch.indices]).to(device)


def _run_epoch(model, dataset, optimizer, loss_fn, plan: TrainingPlan, seed, epoch, crop, device):
    model.train()
    total, steps = 0.0, 0
    for b in batches(dataset, plan.batch_size, seed=seed, epoch=epoch, training=True, crop=crop):
        left, right = b.left.to(device), b.right.to(device)
        logits, disp = model(left, right)
        loss = loss_fn(b, left, right, logits, disp)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {steps}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        total += loss.item()
        steps += 1
    return total / max(steps, 1)


def train_supervised(model, train_ds, val_ds, plan: TrainingPlan, opt_cfg: OptimizerConfig | None = None,
                     epochs: int | None = None, seed: int = 0, crop=None, device="cpu",
                     logger: JsonlLog | None = None) -> MetricReport:
    """Standard smooth-L1 training on ground truth (the teacher protocol)."""
    opt_cfg = opt_cfg or OptimizerConfig()
    epochs = epochs or plan.teacher_epochs
    model.to(device)
    optimizer = opt_cfg.build(model.parameters(), plan.lr)

    def loss_fn(b, left, right, logits, disp):
        return supervised_loss(disp, b.gt.to(device), b.mask.to(device))

    for epoch in range(epochs):
        for g in optimizer.param_groups:
            g["lr"] = opt_cfg.lr_at(plan.lr, epoch)
        loss = _run_epoch(model, train_ds, optimizer, loss_fn, plan, seed, epoch, crop, device)
        if logger:
            logger(phase="teacher", epoch=epoch, loss=loss, lr=optimizer.param_groups[0]["lr"])
    return evaluate(model, val_ds, plan.batch_size, device) if val_ds is not None else MetricReport()


def distill_epochs(student, teacher, train_ds, plan: TrainingPlan, epochs: int,
                   distill_cfg: DistillConfig, opt_cfg: OptimizerConfig, seed: int = 0,
                   phase: str = "distill", epoch_offset: int = 0, crop=None, device="cpu",
                   logger: JsonlLog | None = None, cache: TeacherCache | None = None,
                   on_epoch=None, temperature: tuple[float, float] = (0.5, 1.0)):
    """One distillation phase with a fresh optimizer and a restarted temperature ramp."""
    if distill_cfg.needs_teacher and teacher is None:
        raise ConfigError(f"{distill_cfg.signal_mode} needs a teacher")
    if teacher is not None and teacher.d_max != student.d_max:
        raise ConfigError(f"teacher d_max {teacher.d_max} != student d_max {student.d_max}")
    if cache is not None and crop is not None:
        raise ConfigError("teacher logit caching requires uncropped samples")
    schedule = TemperatureSchedule(temperature[0], temperature[1], total_epochs=epochs)
    optimizer = opt_cfg.build(student.parameters(), plan.lr)
    state = {"t": schedule.t_start}

    def loss_fn(b, left, right, logits, disp):
        q = None
        if distill_cfg.needs_teacher:
            q = cache.get(teacher, b, device) if cache is not None else teacher.teacher_logits(left, right)
        return combined_loss(distill_cfg, logits, q, disp, b.gt.to(device), b.mask.to(device), state["t"])

    for epoch in range(epochs):
        state["t"] = temperature_at(schedule, epoch)
        for g in optimizer.param_groups:
            g["lr"] = opt_cfg.lr_at(plan.lr, epoch)
        loss = _run_epoch(student, train_ds, optimizer, loss_fn, plan, seed, epoch_offset + epoch, crop, device)
        if logger:
            logger(phase=phase, epoch=epoch, t=state["t"], loss=loss)
        if on_epoch is not None:
            on_epoch(student, epoch)
    return optimizer


@dataclass
class DTPResult:
    student: object
    history: list[dict] = field(default_factory=list)
    prune_history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1]


def dtp_train(plan: TrainingPlan, teacher, student, train_ds, val_ds,
              distill_cfg: DistillConfig | None = None, opt_cfg: OptimizerConfig | None = None,
              seed: int = 0, out_dir=None, crop=None, device="cpu", logger: JsonlLog | None = None,
              metrics_log: JsonlLog | None = None, cache_teacher: bool = False,
              config_hash: str = "", temperature: tuple[float, float] = (0.5, 1.0)) -> DTPResult:
    """Distill for ``plan.distill_epochs``, then ``plan.prune_steps`` rounds of
    prune-at-rate-r + distillation finetuning.

    A checkpoint and a metrics record are written after the initial distillation
    and after every round.
    """
    distill_cfg = distill_cfg or DistillConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    out_dir = Path(out_dir) if out_dir else None
    if teacher is not None:
        if teacher.d_max != student.d_max:
            raise ConfigError(f"teacher d_max {teacher.d_max} != student d_max {student.d_max}")
        teacher.to(device).eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
    student.to(device)
    cache = TeacherCache() if cache_teacher else None
    result = DTPResult(student)
    last_good = {"state": copy.deepcopy(student.state_dict()), "config": student.config}

    def remember(model, _epoch):
        last_good["state"] = copy.deepcopy(model.state_dict())
        last_good["config"] = model.config

    def record(phase, round_idx, optimizer):
        model = result.student
        report = evaluate(model, val_ds, plan.batch_size, device)
        rec = {
            "phase": phase,
            "round": round_idx,
            "epe": report.epe,
            "d1": report.d1,
            "params": count_params(model.config).total.params,
            "group_sizes": build_dependency_graph(model.config).sizes(),
        }
        result.history.append(rec)
        if metrics_log:
            metrics_log(**rec)
        if out_dir:
            path = out_dir / f"dtp_{round_idx:02d}_{phase}.pt"
            save_checkpoint(path, model, result.prune_history, optimizer,
                            {"phase": phase, "round": round_idx}, config_hash, rec)
            result.checkpoints.append(path)

    def run(phase, epochs, offset):
        try:
            return distill_epochs(result.student, teacher, train_ds, plan, epochs, distill_cfg, opt_cfg,
                                  seed, phase, offset, crop, device, logger, cache, on_epoch=remember,
                                  temperature=temperature)
        except NumericError as exc:
            ckpt = None
            if out_dir:
                from dtpstereo.model import DTPNet
                good = DTPNet(last_good["config"])
                good.load_state_dict(last_good["state"])
                ckpt = save_checkpoint(out_dir / "last_good.pt", good, result.prune_history,
                                       config_hash=config_hash)
            raise DivergenceError(f"{phase}: {exc}", ckpt) from exc

    opt = run("distill", plan.distill_epochs, 0)
    record("distill", 0, opt)
    for e in range(1, plan.prune_steps + 1):
        pruned, rec = prune_step(result.student, plan.prune_rate)
        result.student = pruned.to(device)
        rec["round"] = e
        result.prune_history.append(rec)
        log.info("round %d: params %d -> %d", e, rec["params_before"], rec["params_after"])
        opt = run(f"round{e}", plan.finetune_epochs, 1000 * e)
        record(f"round{e}", e, opt)
    return result


def stderr_log() -> JsonlLog:
    return JsonlLog(stream=sys.stderr)


def plan_dict(plan: TrainingPlan) -> dict:
    return asdict(plan)
