"""Command-line entry point: train-teacher, dtp, eval, flops, bench, export-weights.

Every command reads one run config (``--config`` file and/or ``--preset``);
``--set key.path=value`` overrides scalar fields. ``DTP_OUT_DIR`` and
``DTP_DEVICE`` override the output directory and device.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from dtpstereo.errors import ConfigError, DataError, DTPError

log = logging.getLogger("dtpstereo")


def _device(args) -> str:
    return os.environ.get("DTP_DEVICE") or "cpu"


def _out_dir(args, cfg=None) -> Path:
    out = args.out or os.environ.get("DTP_OUT_DIR") or (cfg.out_dir if cfg is not None else "runs")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_config(args, required: bool = True):
    from dtpstereo.runconfig import load_run_config

    if args.config is None and args.preset is None:
        if required:
            raise ConfigError("give --config PATH or --preset NAME")
        return None
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(args.config, args.preset, overrides)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=str) + "\n")


def cmd_train_teacher(args) -> int:
    from dtpstereo.checkpoint import save_checkpoint
    from dtpstereo.data.loaders import make_dataset
    from dtpstereo.model import DTPNet
    from dtpstereo.training import JsonlLog, evaluate, seed_everything, train_supervised

    cfg = _run_config(args)
    cfg.check_paths()
    out, device = _out_dir(args, cfg), _device(args)
    train_ds, val_ds = make_dataset(cfg.train_data), make_dataset(cfg.val_data)
    seed_everything(cfg.seed)
    teacher = DTPNet(cfg.teacher).to(device)
    epochs_log = JsonlLog(out / "teacher_log.jsonl", sys.stderr if args.verbose else None)
    initial = evaluate(teacher, train_ds, cfg.plan.batch_size, device)
    val = train_supervised(teacher, train_ds, val_ds, cfg.plan, cfg.optimizer, seed=cfg.seed,
                           crop=cfg.crop, device=device, logger=epochs_log)
    final = evaluate(teacher, train_ds, cfg.plan.batch_size, device)
    record = {
        "phase": "teacher",
        "epochs": cfg.plan.teacher_epochs,
        "initial_train_epe": initial.epe,
        "final_train_epe": final.epe,
        "val_epe": val.epe,
        "val_d1": val.d1,
        "params": teacher.num_parameters(),
        "config_hash": cfg.digest(),
    }
    JsonlLog(out / "teacher_metrics.jsonl")(**record)
    path = save_checkpoint(out / "teacher.pt", teacher, epochs={"teacher": cfg.plan.teacher_epochs},
                           config_hash=cfg.digest(), metrics=record, role="teacher")
    (out / "run_config.yaml").write_text(cfg.to_yaml())
    print(json.dumps(record))
    print(f"teacher checkpoint: {path}")
    return 0


def cmd_dtp(args) -> int:
    from dtpstereo.accounting import count_flops
    from dtpstereo.checkpoint import load_checkpoint
    from dtpstereo.data.loaders import make_dataset
    from dtpstereo.model import DTPNet
    from dtpstereo.training import JsonlLog, dtp_train, seed_everything

    cfg = _run_config(args)
    cfg.check_paths()
    out, device = _out_dir(args, cfg), _device(args)
    teacher = None
    if cfg.distill.needs_teacher:
        if args.checkpoint is None:
            raise ConfigError(f"{cfg.distill.signal_mode} needs a teacher: pass --checkpoint")
        teacher, _ = load_checkpoint(args.checkpoint, device)
        if teacher.d_max != cfg.student.d_max:
            raise ConfigError(f"teacher d_max {teacher.d_max} != student d_max {cfg.student.d_max}")
    train_ds, val_ds = make_dataset(cfg.train_data), make_dataset(cfg.val_data)
    seed_everything(cfg.seed)
    if cfg.student_init:
        student, _ = load_checkpoint(cfg.student_init, device)
    else:
        student = DTPNet(cfg.student)
    h, w = _resolution(args, default=None) or _sample_resolution(val_ds)
    before = count_flops(student.config, h, w)
    # a fresh run must not append to the logs of an earlier one
    for name in ("dtp_log.jsonl", "dtp_metrics.jsonl"):
        (out / name).unlink(missing_ok=True)
    result = dtp_train(cfg.plan, teacher, student, train_ds, val_ds, cfg.distill, cfg.optimizer,
                       seed=cfg.seed, out_dir=out, crop=cfg.crop, device=device,
                       logger=JsonlLog(out / "dtp_log.jsonl", sys.stderr if args.verbose else None),
                       metrics_log=JsonlLog(out / "dtp_metrics.jsonl"),
                       cache_teacher=cfg.cache_teacher, config_hash=cfg.digest(),
                       temperature=cfg.temperature)
    after = count_flops(result.student.config, h, w)
    for tag, table in (("before", before), ("after", after)):
        (out / f"accounting_{tag}.txt").write_text(table.format() + "\n")
        (out / f"accounting_{tag}.jsonl").write_text(table.to_jsonl())
    _write_json(out / "prune_history.json", result.prune_history)
    _write_json(out / "final_metrics.json", result.final)
    (out / "run_config.yaml").write_text(cfg.to_yaml())
    print("before DTP\n" + before.format())
    print("after DTP\n" + after.format())
    print(json.dumps(result.final))
    return 0


def _sample_resolution(dataset) -> tuple[int, int]:
    h, w = dataset[0].gt_disparity.shape
    return h + (-h) % 4, w + (-w) % 4


def _resolution(args, default=(540, 960)):
    from dtpstereo.accounting import parse_resolution

    if getattr(args, "resolution", None):
        return parse_resolution(args.resolution)
    return default


def cmd_eval(args) -> int:
    from dtpstereo.checkpoint import load_checkpoint
    from dtpstereo.data.loaders import make_dataset
    from dtpstereo.training import evaluate
    from dtpstereo.viz import colorize_disparity, colorize_error, save_rgb

    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    cfg = _run_config(args)
    out, device = _out_dir(args, cfg), _device(args)
    model, payload = load_checkpoint(args.checkpoint, device)
    spec = cfg.train_data if args.split == "train" else cfg.val_data
    if spec.d_max != model.d_max:
        raise ConfigError(f"checkpoint d_max {model.d_max} != config d_max {spec.d_max}")
    dataset = make_dataset(spec)
    img_dir = out / "eval_images"
    count = {"n": 0}

    def emit(name, pred, gt, mask):
        i = count["n"]
        count["n"] += 1
        if args.max_images is not None and i >= args.max_images:
            return
        save_rgb(colorize_disparity(pred, model.d_max), img_dir / f"{i:04d}_disparity.png")
        save_rgb(colorize_error(pred, gt, mask), img_dir / f"{i:04d}_error.png")

    report = evaluate(model, dataset, args.batch_size, device, on_sample=emit)
    rec = {"checkpoint": str(args.checkpoint), "split": args.split, **report.summary()}
    _write_json(out / "eval_report.json", {**rec, "per_image": report.per_image})
    print(report.format())
    print(json.dumps(rec))
    return 0


def _model_config(args):
    """Model config from --checkpoint, a model YAML, or the run config's student/teacher."""
    from dtpstereo.config import ModelConfig

    if args.checkpoint is not None:
        from dtpstereo.checkpoint import load_checkpoint
        model, _ = load_checkpoint(args.checkpoint, "cpu")
        return model.config, model
    if args.config is not None and args.preset is None:
        text = Path(args.config).read_text() if Path(args.config).is_file() else None
        if text is None:
            raise ConfigError(f"config file {args.config} not found")
        raw = yaml.safe_load(text) or {}
        if isinstance(raw, dict) and "layers" in raw:
            return ModelConfig.from_dict(raw).validate(), None
    cfg = _run_config(args)
    return (cfg.teacher if args.model == "teacher" else cfg.student), None


def cmd_flops(args) -> int:
    from dtpstereo.accounting import count_flops

    config, _ = _model_config(args)
    h, w = _resolution(args)
    table = count_flops(config, h, w)
    print(table.format())
    if args.jsonl:
        print(table.to_jsonl(), end="")
    if args.out or os.environ.get("DTP_OUT_DIR"):
        out = _out_dir(args)
        (out / "accounting.txt").write_text(table.format() + "\n")
        (out / "accounting.jsonl").write_text(table.to_jsonl())
    return 0


def cmd_bench(args) -> int:
    from dtpstereo.accounting import count_flops, latency_bench
    from dtpstereo.model import DTPNet
    from dtpstereo.training import seed_everything

    config, model = _model_config(args)
    if model is None:
        seed_everything(args.seed or 0)
        model = DTPNet(config)
    h, w = _resolution(args)
    print(count_flops(config, h, w).format())
    stats = latency_bench(model, h, w, batch=args.batch, warmup=args.warmup, iters=args.iters,
                          device=_device(args))
    print(f"latency median {stats['median']:.2f} ms  p95 {stats['p95']:.2f} ms  "
          f"mean {stats['mean']:.2f} ms  on {stats['device']}")
    print(json.dumps(stats))
    return 0


def cmd_export_weights(args) -> int:
    from dtpstereo.checkpoint import load_checkpoint

    if args.checkpoint is None:
        raise ConfigError("export-weights needs --checkpoint")
    model, payload = load_checkpoint(args.checkpoint, "cpu")
    out = _out_dir(args)
    stem = Path(args.checkpoint).stem
    arrays = {k: v.numpy() for k, v in model.state_dict().items()}
    np.savez(out / f"{stem}_weights.npz", **arrays)
    model.config.save(out / f"{stem}_model.yaml")
    print(f"wrote {out / f'{stem}_weights.npz'} ({len(arrays)} tensors, "
          f"{model.num_parameters()} parameters) and {out / f'{stem}_model.yaml'}")
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "dtp": cmd_dtp,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "bench": cmd_bench,
    "export-weights": cmd_export_weights,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config YAML (or a model YAML for flops/bench)")
    common.add_argument("--preset", help="named preset: desk, desk-tiny, sceneflow, kitti")
    common.add_argument("--checkpoint", help="checkpoint path")
    common.add_argument("--out", help="output directory (env DTP_OUT_DIR)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a scalar config field, e.g. plan.prune_rate=0.2")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="dtpstereo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="supervised teacher training")
    sub.add_parser("dtp", parents=[common], help="distill then prune a student")
    p = sub.add_parser("eval", parents=[common], help="metrics plus disparity and error images")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-images", type=int, default=None, help="cap on emitted image pairs")
    for name, help_ in (("flops", "params and FLOPs table"), ("bench", "latency benchmark")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--resolution", help="HxW, default 540x960")
        p.add_argument("--model", choices=("student", "teacher"), default="student")
        if name == "flops":
            p.add_argument("--jsonl", action="store_true", help="also print line-delimited records")
        else:
            p.add_argument("--batch", type=int, default=1)
            p.add_argument("--warmup", type=int, default=3)
            p.add_argument("--iters", type=int, default=10)
    sub.add_parser("export-weights", parents=[common], help="weights to .npz, model to YAML")
    sub.choices["dtp"].add_argument("--resolution", help="accounting resolution, default: data size")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DTPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
