"""The lightweight stereo network, interpreted from a :class:`ModelConfig`.

Only 2D convolutions, 2D transpose convolutions, batch norm, ReLU,
concatenation, addition, bilinear resizing and softmax appear on the
forward path.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from dtpstereo.config import IMAGE, VIEWS, ModelConfig, strip_view
from dtpstereo.errors import NumericError, ShapeError

FORWARD_OPS = frozenset(
    {"conv2d", "transpose_conv2d", "norm", "activation", "concat", "skip_add", "bilinear_upsample"})


def _make_module(spec) -> nn.Module | None:
    if spec.kind == "conv2d":
        return nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                         spec.padding, bias=spec.bias)
    if spec.kind == "transpose_conv2d":
        return nn.ConvTranspose2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                                  spec.padding, bias=spec.bias)
    if spec.kind == "norm":
        return nn.BatchNorm2d(spec.out_channels)
    return None


def soft_argmax(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Expected disparity under softmax(logits) with bin centres 0..d_max-1.

    The weighted sum is divided once by the partition sum, which makes the
    uniform case exactly (d_max - 1) / 2; the result is clamped to the bin
    range so rounding can never push it outside [0, d_max - 1].
    """
    if not torch.isfinite(logits).all():
        raise NumericError("soft_argmax received NaN or Inf logits")
    d = logits.shape[dim]
    shape = [1] * logits.dim()
    shape[dim] = d
    bins = torch.arange(d, dtype=logits.dtype, device=logits.device).view(shape)
    e = torch.exp(logits - logits.amax(dim=dim, keepdim=True))
    disp = (e * bins).sum(dim) / e.sum(dim)
    return disp.clamp(0, d - 1)


class DTPNet(nn.Module):
    """Siamese feature pyramid -> channel-to-disparity cost volume -> hourglass regression."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.layers = nn.ModuleDict()
        for spec in config.layers:
            mod = _make_module(spec)
            if mod is not None:
                self.layers[spec.name] = mod
        self._feature = config.module_layers("feature")
        self._cost = config.module_layers("cost_volume")
        self._regression = config.module_layers("regression")
        self.reset_parameters()

    @property
    def d_max(self) -> int:
        return self.config.d_max

    def reset_parameters(self) -> None:
        for spec in self.config.layers:
            if spec.kind not in ("conv2d", "transpose_conv2d", "norm"):
                continue
            mod = self.layers[spec.name]
            if spec.kind == "norm":
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
                continue
            fan_in = spec.in_channels * spec.kernel ** 2
            if spec.kind == "transpose_conv2d":
                fan_in /= spec.stride ** 2
            nn.init.normal_(mod.weight, 0.0, math.sqrt(2.0 / fan_in))
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)

    def _run(self, specs, env: dict) -> torch.Tensor:
        out = None
        for spec in specs:
            xs = [env[r] for r in spec.inputs]
            if spec.kind in ("conv2d", "norm"):
                out = self.layers[spec.name](xs[0])
            elif spec.kind == "transpose_conv2d":
                out = self.layers[spec.name](xs[0], output_size=env[spec.match].shape[-2:])
            elif spec.kind == "activation":
                out = F.relu(xs[0])
            elif spec.kind == "skip_add":
                out = xs[0] + xs[1]
            elif spec.kind == "concat":
                out = torch.cat(xs, dim=1)
            elif spec.kind == "bilinear_upsample":
                out = F.interpolate(xs[0], size=env[spec.match].shape[-2:], mode="bilinear",
                                    align_corners=False)
            else:
                raise ShapeError(f"{spec.name}: unsupported layer kind {spec.kind!r}")
            env[spec.name] = out
        return out

    def _features(self, image: torch.Tensor) -> torch.Tensor:
        return self._run(self._feature, {IMAGE: image})

    def extract_features(self, left: torch.Tensor, right: torch.Tensor):
        """Shared-weight features of both views, each B x C x H/4 x W/4."""
        for name, img in (("left", left), ("right", right)):
            if img.dim() != 4 or img.shape[1] != 3:
                raise ShapeError(f"{name} image must be B x 3 x H x W, got {tuple(img.shape)}")
            for axis, size in (("height", img.shape[2]), ("width", img.shape[3])):
                if size % 4:
                    raise ShapeError(f"{name} image {axis}={size} is not divisible by 4")
        if left.shape != right.shape:
            raise ShapeError(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ")
        if self.training:
            # one pass keeps batch-norm statistics shared across the two views
            both = self._features(torch.cat([left, right], dim=0))
            return both.chunk(2, dim=0)
        return self._features(left), self._features(right)

    def build_cost_volume(self, f_l: torch.Tensor, f_r: torch.Tensor) -> torch.Tensor:
        """Concatenate both feature maps and map channels to d_max/4 disparity channels."""
        if f_l.shape != f_r.shape:
            raise ShapeError(f"feature shapes differ: {tuple(f_l.shape)} vs {tuple(f_r.shape)}")
        if f_l.shape[1] != self.config.feature_channels:
            raise ShapeError(
                f"expected {self.config.feature_channels} feature channels, got {f_l.shape[1]}")
        feat = self.config.feature_output
        env = {f"{VIEWS[0]}:{feat}": f_l, f"{VIEWS[1]}:{feat}": f_r}
        return self._run(self._cost, env)

    def regress(self, cost: torch.Tensor, image_size=None) -> torch.Tensor:
        """Hourglass regression to logits of shape B x d_max x H x W.

        ``image_size`` defaults to four times the cost-volume resolution.
        """
        if cost.dim() != 4 or cost.shape[1] != self.config.cost_channels:
            raise ShapeError(
                f"cost volume must have {self.config.cost_channels} channels, got {tuple(cost.shape)}")
        if image_size is None:
            image_size = (cost.shape[2] * 4, cost.shape[3] * 4)
        ref = cost.new_empty((0, 0) + tuple(image_size))
        return self._run(self._regression, {self.config.cost_output: cost, IMAGE: ref})

    def forward(self, left: torch.Tensor, right: torch.Tensor):
        f_l, f_r = self.extract_features(left, right)
        cost = self.build_cost_volume(f_l, f_r)
        logits = self.regress(cost, image_size=left.shape[-2:])
        return logits, soft_argmax(logits)

    @torch.no_grad()
    def teacher_logits(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        """Logits in evaluation mode without gradient; the teacher interface."""
        was_training = self.training
        self.eval()
        try:
            return self(left, right)[0]
        finally:
            self.train(was_training)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def forward_ops(config: ModelConfig) -> set[str]:
    """Layer kinds used by a config, for the deployment-friendliness audit."""
    return {spec.kind for spec in config.layers}
