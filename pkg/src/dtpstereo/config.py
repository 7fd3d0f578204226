"""Declarative network description.

A :class:`ModelConfig` is a flat, topologically ordered list of primitive
:class:`LayerSpec` nodes. The same list drives network construction
(:mod:`dtpstereo.model`), parameter/FLOPs accounting
(:mod:`dtpstereo.accounting`) and dependency analysis
(:mod:`dtpstereo.pruning`), so the three can never disagree.

Graph inputs are named ``"image"`` inside the feature module. Nodes of the
cost-volume module refer to feature outputs as ``"left:<name>"`` and
``"right:<name>"``; the feature module is executed once per view with shared
weights.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import yaml

from dtpstereo.errors import ConfigError

LAYER_KINDS = (
    "conv2d",
    "transpose_conv2d",
    "norm",
    "activation",
    "bilinear_upsample",
    "skip_add",
    "concat",
)
PARAMETRIC_KINDS = ("conv2d", "transpose_conv2d", "norm")
MODULES = ("feature", "cost_volume", "regression")
SETTINGS = ("Setting1", "Setting2", "Setting3")
IMAGE = "image"
VIEWS = ("left", "right")


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str]
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    module: str = "feature"
    # spatial reference: transpose convs and resizes take their output size
    # from this node ("image" for full input resolution)
    match: str | None = None
    bias: bool = True

    @property
    def is_parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["match"] is None:
            del d["match"]
        return d


def strip_view(ref: str) -> str:
    """``"left:feat_out"`` -> ``"feat_out"``."""
    return ref.split(":", 1)[1] if ":" in ref else ref


@dataclass
class ModelConfig:
    d_max: int = 192
    base_channels: int = 16
    setting: str = "Setting3"
    layers: list[LayerSpec] = field(default_factory=list)
    downsample_factor: int = 4

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    # -- lookup helpers -------------------------------------------------
    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def module_layers(self, module: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.module == module]

    @property
    def feature_output(self) -> str:
        return self.module_layers("feature")[-1].name

    @property
    def cost_output(self) -> str:
        return self.module_layers("cost_volume")[-1].name

    @property
    def logits_output(self) -> str:
        return self.layers[-1].name

    @property
    def feature_channels(self) -> int:
        return self.module_layers("feature")[-1].out_channels

    @property
    def cost_channels(self) -> int:
        return self.d_max // self.downsample_factor

    def consumers(self, name: str) -> list[LayerSpec]:
        return [l for l in self.layers if any(strip_view(i) == name for i in l.inputs)]

    # -- validation -----------------------------------------------------
    def validate(self) -> "ModelConfig":
        if self.d_max <= 0 or self.d_max % self.downsample_factor:
            raise ConfigError(
                f"d_max={self.d_max} must be positive and divisible by {self.downsample_factor}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        out: dict[str, int] = {IMAGE: 3}
        seen_modules: list[str] = []
        for spec in self.layers:
            if spec.kind not in LAYER_KINDS:
                raise ConfigError(f"{spec.name}: unknown layer kind {spec.kind!r}")
            if spec.module not in MODULES:
                raise ConfigError(f"{spec.name}: unknown module {spec.module!r}")
            if spec.name in out:
                raise ConfigError(f"duplicate layer name {spec.name!r}")
            if not seen_modules or seen_modules[-1] != spec.module:
                if spec.module in seen_modules:
                    raise ConfigError(f"{spec.name}: module {spec.module!r} is not contiguous")
                seen_modules.append(spec.module)
            srcs = []
            for ref in spec.inputs:
                base = strip_view(ref)
                if ":" in ref and ref.split(":", 1)[0] not in VIEWS:
                    raise ConfigError(f"{spec.name}: bad view prefix in {ref!r}")
                if base not in out:
                    raise ConfigError(f"{spec.name}: input {ref!r} is not defined before use")
                srcs.append(out[base])
            if spec.match is not None and spec.match not in out:
                raise ConfigError(f"{spec.name}: match target {spec.match!r} undefined")
            if spec.kind == "concat":
                expected = sum(srcs)
            elif spec.kind == "skip_add":
                if len(set(srcs)) != 1 or len(srcs) != 2:
                    raise ConfigError(f"{spec.name}: skip_add needs two equal-width inputs, got {srcs}")
                expected = srcs[0]
            else:
                if len(srcs) != 1:
                    raise ConfigError(f"{spec.name}: {spec.kind} takes exactly one input")
                expected = srcs[0]
            if spec.in_channels != expected:
                raise ConfigError(
                    f"{spec.name}: in_channels={spec.in_channels} but inputs provide {expected}")
            if spec.kind in ("norm", "activation", "bilinear_upsample", "skip_add", "concat") \
                    and spec.out_channels != spec.in_channels:
                raise ConfigError(f"{spec.name}: {spec.kind} cannot change channel count")
            if spec.kind in ("conv2d", "transpose_conv2d") and spec.kernel <= 0:
                raise ConfigError(f"{spec.name}: kernel must be positive")
            if spec.kind == "transpose_conv2d" and spec.match is None:
                raise ConfigError(f"{spec.name}: transpose conv needs a spatial match target")
            out[spec.name] = spec.out_channels
        if seen_modules != list(MODULES):
            raise ConfigError(f"modules must appear in order {MODULES}, got {seen_modules}")
        if self.module_layers("cost_volume")[-1].out_channels != self.cost_channels:
            raise ConfigError("cost volume must emit d_max / 4 channels")
        if self.layers[-1].out_channels != self.d_max:
            raise ConfigError("logit head must emit d_max channels")
        # spatial check at the smallest admissible and an odd-quarter size
        from dtpstereo.accounting import infer_shapes
        for h, w in ((4, 4), (12, 20), (28, 44)):
            shapes = infer_shapes(self, h, w)
            if shapes[self.feature_output][1:] != (h // 4, w // 4):
                raise ConfigError("feature extraction must produce quarter-resolution maps")
            if shapes[self.logits_output][1:] != (h, w):
                raise ConfigError("logits must be at full input resolution")
        return self

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d_max": self.d_max,
            "base_channels": self.base_channels,
            "setting": self.setting,
            "downsample_factor": self.downsample_factor,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**copy.deepcopy(d))

    def to_yaml(self) -> str:
        d = self.to_dict()
        layers = d.pop("layers")
        text = yaml.safe_dump(d, sort_keys=False)
        # one flow-style mapping per layer keeps the list readable
        text += "layers:\n"
        for l in layers:
            text += "  - " + yaml.safe_dump(l, default_flow_style=True, sort_keys=False, width=10**6).strip() + "\n"
        return text

    @classmethod
    def from_yaml(cls, text: str) -> "ModelConfig":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_yaml(Path(path).read_text())

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []
        self.module = "feature"

    def add(self, name, kind, inputs, cin, cout, **kw) -> str:
        self.layers.append(LayerSpec(name, kind, list(inputs), cin, cout, module=self.module, **kw))
        return name

    def conv(self, name, x, cin, cout, stride=1, bn=True, relu=True) -> str:
        y = self.add(name, "conv2d", [x], cin, cout, kernel=3, stride=stride, padding=1)
        if bn:
            y = self.add(name + "_bn", "norm", [y], cout, cout)
        if relu:
            y = self.add(name + "_relu", "activation", [y], cout, cout)
        return y

    def tconv(self, name, x, cin, cout, match) -> str:
        y = self.add(name, "transpose_conv2d", [x], cin, cout, kernel=3, stride=2, padding=1, match=match)
        return self.add(name + "_bn", "norm", [y], cout, cout)

    def residual_block(self, name, x, ch) -> str:
        y = self.conv(name + "_c1", x, ch, ch)
        y = self.conv(name + "_c2", y, ch, ch, relu=False)
        y = self.add(name + "_add", "skip_add", [y, x], ch, ch)
        return self.add(name + "_relu", "activation", [y], ch, ch)

    def hourglass(self, name, x, w0, w1, w2) -> str:
        e1 = self.conv(name + "_e1a", x, w0, w1, stride=2)
        e1 = self.conv(name + "_e1b", e1, w1, w1)
        e2 = self.conv(name + "_e2a", e1, w1, w2, stride=2)
        e2 = self.conv(name + "_e2b", e2, w2, w2)
        d1 = self.tconv(name + "_d1", e2, w2, w1, match=e1)
        d1 = self.add(name + "_d1_add", "skip_add", [d1, e1], w1, w1)
        d1 = self.add(name + "_d1_relu", "activation", [d1], w1, w1)
        d0 = self.tconv(name + "_d0", d1, w1, w0, match=x)
        d0 = self.add(name + "_d0_add", "skip_add", [d0, x], w0, w0)
        return self.add(name + "_d0_relu", "activation", [d0], w0, w0)


def build_config(setting: str = "Setting3", d_max: int = 192, base_channels: int = 16) -> ModelConfig:
    """Build one of the three architecture settings.

    Widths scale with ``base_channels`` (C): pyramid stages C and 4C (stages
    three and four, when present, 4C at quarter resolution), channel-to-disparity
    hidden width C (2C for the heavier settings), hourglass widths 3C/4C/8C.
    C=16 is the calibrated default for Setting3.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    if d_max <= 0 or d_max % 4:
        raise ConfigError(f"d_max={d_max} must be positive and divisible by 4")
    c = base_channels
    n_stages = 2 if setting == "Setting3" else 4
    n_hourglass = 3 if setting == "Setting1" else 1
    cost_hidden = c if setting == "Setting3" else 2 * c

    b = _Builder()
    stage_widths = [c, 4 * c, 4 * c, 4 * c][:n_stages]
    x, cin, outs = IMAGE, 3, []
    for i, w in enumerate(stage_widths, start=1):
        stride = 2 if i <= 2 else 1
        x = b.conv(f"feat{i}_down", x, cin, w, stride=stride)
        x = b.residual_block(f"feat{i}_res", x, w)
        outs.append((x, w))
        cin = w
    quarter = outs[1][0]
    parts = []
    for name, w in outs:
        if name == outs[0][0]:
            name = b.add("feat1_resample", "bilinear_upsample", [name], w, w, match=quarter)
        parts.append((name, w))
    feat_ch = sum(w for _, w in parts)
    feat = b.add("feat_out", "concat", [p for p, _ in parts], feat_ch, feat_ch)

    b.module = "cost_volume"
    d4 = d_max // 4
    y = b.add("cv_concat", "concat", [f"left:{feat}", f"right:{feat}"], 2 * feat_ch, 2 * feat_ch)
    y = b.conv("cv1", y, 2 * feat_ch, cost_hidden)
    y = b.conv("cv2", y, cost_hidden, cost_hidden)
    y = b.conv("cv3", y, cost_hidden, d4, bn=False, relu=False)

    b.module = "regression"
    w0, w1, w2 = 3 * c, 4 * c, 8 * c
    y = b.conv("reg_pre1", y, d4, w0)
    y = b.conv("reg_pre2", y, w0, w0)
    for k in range(1, n_hourglass + 1):
        y = b.hourglass(f"hg{k}", y, w0, w1, w2)
    y = b.conv("reg_classify", y, w0, d4)
    y = b.add("reg_logits", "conv2d", [y], d4, d_max, kernel=3, stride=1, padding=1)
    b.add("reg_upsample", "bilinear_upsample", [y], d_max, d_max, match=IMAGE)
    return ModelConfig(d_max=d_max, base_channels=c, setting=setting, layers=b.layers).validate()


def layer_names(specs: Iterable[LayerSpec]) -> list[str]:
    return [s.name for s in specs]
