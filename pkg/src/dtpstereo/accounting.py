"""Parameter, FLOPs and latency accounting derived from a ModelConfig."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from dtpstereo.config import IMAGE, MODULES, ModelConfig, strip_view
from dtpstereo.errors import ConfigError, ShapeError

MODULE_TITLES = {
    "feature": "Feature extraction",
    "cost_volume": "Cost volume construction",
    "regression": "Disparity regression",
}
# SceneFlow test resolution
DEFAULT_RESOLUTION = (540, 960)


def check_resolution(h: int, w: int, multiple: int = 4) -> None:
    for axis, size in (("height", h), ("width", w)):
        if size <= 0 or size % multiple:
            raise ShapeError(f"{axis}={size} must be a positive multiple of {multiple}")


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(config: ModelConfig, h: int, w: int) -> dict[str, tuple[int, int, int]]:
    """Per-node output shape ``(C, H, W)`` for a single view of size h x w."""
    check_resolution(h, w)
    shapes: dict[str, tuple[int, int, int]] = {IMAGE: (3, h, w)}
    for spec in config.layers:
        ins = [shapes[strip_view(r)] for r in spec.inputs]
        _, ih, iw = ins[0]
        if spec.kind == "conv2d":
            oh = conv_out(ih, spec.kernel, spec.stride, spec.padding)
            ow = conv_out(iw, spec.kernel, spec.stride, spec.padding)
        elif spec.kind == "transpose_conv2d":
            _, oh, ow = shapes[spec.match]
            for size, target in ((ih, oh), (iw, ow)):
                base = (size - 1) * spec.stride - 2 * spec.padding + spec.kernel
                if not base <= target < base + spec.stride:
                    raise ShapeError(
                        f"{spec.name}: cannot reach size {target} from {size} with stride {spec.stride}")
        elif spec.kind == "bilinear_upsample":
            _, oh, ow = shapes[spec.match]
        elif spec.kind in ("skip_add", "concat"):
            if any(s[1:] != (ih, iw) for s in ins):
                raise ShapeError(f"{spec.name}: spatial mismatch among inputs {ins}")
            oh, ow = ih, iw
        else:
            oh, ow = ih, iw
        shapes[spec.name] = (spec.out_channels, oh, ow)
    return shapes


def layer_params(spec) -> int:
    if spec.kind in ("conv2d", "transpose_conv2d"):
        return spec.kernel * spec.kernel * spec.in_channels * spec.out_channels + (
            spec.out_channels if spec.bias else 0)
    if spec.kind == "norm":
        return 2 * spec.out_channels
    return 0


@dataclass
class AccountingRow:
    params: int = 0
    macs: int = 0
    elementwise: int = 0

    @property
    def flops2(self) -> int:
        return 2 * self.macs

    def __iadd__(self, other: "AccountingRow"):
        self.params += other.params
        self.macs += other.macs
        self.elementwise += other.elementwise
        return self


@dataclass
class AccountingTable:
    rows: dict[str, AccountingRow] = field(default_factory=dict)
    resolution: tuple[int, int] | None = None

    @property
    def total(self) -> AccountingRow:
        t = AccountingRow()
        for r in self.rows.values():
            t += r
        return t

    def records(self) -> list[dict]:
        out = []
        for name, r in list(self.rows.items()) + [("total", self.total)]:
            rec = {"module": name, "params": r.params}
            if self.resolution is not None:
                rec.update(resolution=f"{self.resolution[0]}x{self.resolution[1]}",
                           macs=r.macs, flops2=r.flops2, elementwise=r.elementwise)
            out.append(rec)
        return out

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records()) + "\n"

    def format(self) -> str:
        with_flops = self.resolution is not None
        head = f"{'Module':<28}{'Params(M)':>11}"
        if with_flops:
            head += f"{'MACs(G)':>10}{'2xMACs(G)':>11}{'Elem(G)':>10}"
        lines = [head, "-" * len(head)]
        for name, r in list(self.rows.items()) + [("total", self.total)]:
            title = MODULE_TITLES.get(name, name.capitalize())
            line = f"{title:<28}{r.params / 1e6:>11.3f}"
            if with_flops:
                line += f"{r.macs / 1e9:>10.3f}{r.flops2 / 1e9:>11.3f}{r.elementwise / 1e9:>10.3f}"
            lines.append(line)
        if with_flops:
            lines.append(f"resolution {self.resolution[0]}x{self.resolution[1]} (H x W)")
        return "\n".join(lines)


def count_params(config: ModelConfig) -> AccountingTable:
    table = AccountingTable({m: AccountingRow() for m in MODULES})
    for spec in config.layers:
        table.rows[spec.module].params += layer_params(spec)
    return table


def layer_macs(spec, out_shape) -> int:
    if spec.kind in ("conv2d", "transpose_conv2d"):
        # transpose convs are counted on their output grid as well
        _, oh, ow = out_shape
        return spec.kernel * spec.kernel * spec.in_channels * spec.out_channels * oh * ow
    return 0


def layer_elementwise(spec, out_shape) -> int:
    if spec.kind in ("norm", "activation", "bilinear_upsample", "skip_add"):
        c, oh, ow = out_shape
        return c * oh * ow
    return 0


def count_flops(config: ModelConfig, h: int = DEFAULT_RESOLUTION[0],
                w: int = DEFAULT_RESOLUTION[1]) -> AccountingTable:
    """Params, MACs and elementwise op counts per module at resolution h x w.

    The feature module runs once per view, so its compute is counted twice.
    """
    shapes = infer_shapes(config, h, w)
    table = count_params(config)
    table.resolution = (h, w)
    for spec in config.layers:
        views = 2 if spec.module == "feature" else 1
        row = table.rows[spec.module]
        row.macs += views * layer_macs(spec, shapes[spec.name])
        row.elementwise += views * layer_elementwise(spec, shapes[spec.name])
    return table


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution must look like HxW, got {text!r}") from None
    check_resolution(h, w)
    return h, w


def latency_bench(model, h: int, w: int, batch: int = 1, warmup: int = 3, iters: int = 10,
                  device=None) -> dict:
    """Wall-clock forward latency in milliseconds.

    Warmup iterations are discarded. Returns median, p95, mean, the device id
    and the per-iteration times.
    """
    import torch

    check_resolution(h, w)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    device = torch.device(device) if device is not None else next(model.parameters()).device
    model = model.to(device).eval()
    left = torch.rand(batch, 3, h, w, device=device)
    right = torch.rand(batch, 3, h, w, device=device)
    times = []
    with torch.no_grad():
        for i in range(warmup + iters):
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            t0 = time.perf_counter()
            model(left, right)
            if device.type == "cuda":
                torch.cuda.synchronize(device)
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    if device.type == "cuda":
        dev_name = torch.cuda.get_device_name(device)
    else:
        dev_name = f"cpu ({torch.get_num_threads()} threads)"
    return {
        "median": statistics.median(times),
        "p95": float(np.percentile(times, 95)),
        "mean": statistics.fmean(times),
        "device": dev_name,
        "iters": iters,
        "resolution": f"{h}x{w}",
        "batch": batch,
        "times": times,
    }
