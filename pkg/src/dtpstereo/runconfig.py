"""One YAML file describing a whole run, plus named presets."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from dtpstereo.config import ModelConfig, build_config
from dtpstereo.data.loaders import DatasetSpec
from dtpstereo.distill import DistillConfig
from dtpstereo.errors import ConfigError, DataError
from dtpstereo.training import OptimizerConfig, TrainingPlan

_DESK = {
    "seed": 0,
    "out_dir": "runs/desk",
    "d_max": 32,
    "student": {"setting": "Setting3", "base_channels": 16},
    "teacher": {"setting": "Setting1", "base_channels": 20},
    "plan": {"distill_epochs": 15, "prune_steps": 5, "prune_rate": 0.1, "lr": 1e-3,
             "finetune_epochs": 5, "teacher_epochs": 20, "batch_size": 8},
    "distill": {"signal_mode": "KD_only", "divergence": "L1", "gt_weight": 0.5},
    "temperature": {"t_start": 0.5, "t_end": 1.0},
    "optimizer": {"kind": "AdamW", "beta1": 0.9, "beta2": 0.999, "weight_decay": 1e-2},
    "data": {
        "train": {"kind": "synthetic", "root": "synthetic://1/64x96/24", "n": 500},
        "val": {"kind": "synthetic", "root": "synthetic://2/64x96/24", "n": 100},
        "crop": None,
    },
    "cache_teacher": False,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS: dict[str, dict] = {
    # synthetic end-to-end experiment, minutes on a CPU
    "desk": _DESK,
    # seconds; smoke tests and determinism checks
    "desk-tiny": _merge(_DESK, {
        "out_dir": "runs/desk-tiny",
        "d_max": 16,
        "student": {"setting": "Setting3", "base_channels": 4},
        "teacher": {"setting": "Setting3", "base_channels": 8},
        "plan": {"distill_epochs": 2, "prune_steps": 2, "finetune_epochs": 1, "teacher_epochs": 2,
                 "batch_size": 4},
        "data": {"train": {"root": "synthetic://1/32x48/12", "n": 16},
                 "val": {"root": "synthetic://2/32x48/12", "n": 8}},
    }),
    # SceneFlow protocol: 20 distillation epochs, 5 finetune epochs per prune step
    "sceneflow": _merge(_DESK, {
        "out_dir": "runs/sceneflow",
        "d_max": 192,
        "teacher": {"setting": "Setting1", "base_channels": 32},
        "plan": {"distill_epochs": 20, "finetune_epochs": 5, "teacher_epochs": 20, "batch_size": 8},
        "data": {"train": {"kind": "sceneflow", "root": "data/sceneflow", "split": "train", "n": 0},
                 "val": {"kind": "sceneflow", "root": "data/sceneflow", "split": "test", "n": 0},
                 "crop": [256, 512]},
    }),
    # KITTI 2015 protocol: 300 epochs at 1e-3, 300 at 1e-4, 100 finetune epochs per prune step;
    # one frame in five is held out for validation. Batch size and crop are chosen here
    "kitti": _merge(_DESK, {
        "out_dir": "runs/kitti",
        "d_max": 192,
        "teacher": {"setting": "Setting1", "base_channels": 32},
        "plan": {"distill_epochs": 600, "finetune_epochs": 100, "teacher_epochs": 600, "batch_size": 8},
        "optimizer": {"decay_epoch": 300, "decay_lr": 1e-4},
        "data": {"train": {"kind": "kitti", "root": "data/kitti2015", "split": "training",
                           "every": 5, "offset": 0, "exclude": True, "n": 0},
                 "val": {"kind": "kitti", "root": "data/kitti2015", "split": "training",
                         "every": 5, "offset": 0, "n": 0},
                 "crop": [256, 512]},
    }),
}


def _model(section: dict, d_max: int) -> ModelConfig:
    if "layers" in section:
        cfg = ModelConfig.from_dict({"d_max": d_max, **section})
        if cfg.d_max != d_max:
            raise ConfigError(f"model d_max {cfg.d_max} != run d_max {d_max}")
        return cfg.validate()
    return build_config(section.get("setting", "Setting3"), d_max, section.get("base_channels", 16))


@dataclass
class RunConfig:
    raw: dict
    student: ModelConfig
    teacher: ModelConfig
    plan: TrainingPlan
    distill: DistillConfig
    temperature: tuple[float, float]
    optimizer: OptimizerConfig
    train_data: DatasetSpec
    val_data: DatasetSpec
    crop: tuple[int, int] | None
    seed: int = 0
    out_dir: str = "runs"
    cache_teacher: bool = False
    student_init: str | None = None
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        try:
            d_max = int(d["d_max"])
            data = d.get("data", {})
            train = dict(data.get("train", {}))
            crop = tuple(data["crop"]) if data.get("crop") else None
            if crop is not None and any(c <= 0 or c % 4 for c in crop):
                raise ConfigError(f"crop {crop} must be positive multiples of 4")
            temp = d.get("temperature", {})
            cfg = cls(
                raw=d,
                student=_model(d.get("student", {}), d_max),
                teacher=_model(d.get("teacher", {}), d_max),
                plan=TrainingPlan(**d.get("plan", {})),
                distill=DistillConfig(**d.get("distill", {})),
                temperature=(float(temp.get("t_start", 0.5)), float(temp.get("t_end", 1.0))),
                optimizer=OptimizerConfig(**d.get("optimizer", {})),
                train_data=DatasetSpec(d_max=d_max, crop=crop, **train),
                val_data=DatasetSpec(d_max=d_max, **data.get("val", {})),
                crop=crop,
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "runs")),
                cache_teacher=bool(d.get("cache_teacher", False)),
                student_init=d.get("student_init"),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from None
        t0, t1 = cfg.temperature
        if t0 <= 0 or t1 < t0:
            raise ConfigError("temperature must satisfy 0 < t_start <= t_end")
        if cfg.cache_teacher and crop is not None:
            raise ConfigError("cache_teacher requires crop: null")
        return cfg

    def check_paths(self) -> None:
        for spec in (self.train_data, self.val_data):
            if spec.kind != "synthetic" and not Path(spec.root).is_dir():
                raise DataError(f"dataset root {spec.root!r} does not exist")
        if self.student_init and not Path(self.student_init).is_file():
            raise DataError(f"student_init checkpoint {self.student_init!r} not found")

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)


def apply_override(d: dict, assignment: str) -> dict:
    """``"plan.prune_rate=0.2"`` -> nested update; values parse as YAML scalars."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key.path=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside scalar field {key!r}")
    parsed = yaml.safe_load(value)
    if isinstance(parsed, (dict, list)):
        raise ConfigError(f"override {key!r} must be a scalar")
    node[parts[-1]] = parsed
    return d


def load_run_config(path=None, preset: str | None = None, overrides=()) -> RunConfig:
    if path is None and preset is None:
        raise ConfigError("give --config or --preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[preset]) if preset else {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        d = _merge(d, loaded)
    for o in overrides:
        apply_override(d, o)
    return RunConfig.from_dict(d)


def preset_yaml(name: str) -> str:
    return yaml.safe_dump(PRESETS[name], sort_keys=False)


def plan_as_dict(cfg: RunConfig) -> dict:
    return asdict(cfg.plan)
