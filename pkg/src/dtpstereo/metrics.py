"""End-point error and D1 over valid pixels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from dtpstereo.errors import ShapeError

D1_THRESHOLD = 3.0


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _errors(pred, gt, mask):
    pred, gt, mask = _as_numpy(pred), _as_numpy(gt), _as_numpy(mask).astype(bool)
    if not pred.shape == gt.shape == mask.shape:
        raise ShapeError(f"pred {pred.shape}, gt {gt.shape}, mask {mask.shape} differ")
    return np.abs(pred.astype(np.float64) - gt.astype(np.float64))[mask], gt.astype(np.float64)[mask]


def epe(pred, gt, mask) -> float | None:
    """Mean absolute disparity error over mask-true pixels; None when no pixel is valid."""
    err, _ = _errors(pred, gt, mask)
    return float(err.mean()) if err.size else None


def d1(pred, gt, mask, kitti: bool = False) -> float | None:
    """Percent of valid pixels with error strictly above 3 px.

    ``kitti=True`` adds the official benchmark condition (error also above 5 %
    of the true disparity).
    """
    err, g = _errors(pred, gt, mask)
    if not err.size:
        return None
    bad = err > D1_THRESHOLD
    if kitti:
        bad &= err > 0.05 * np.abs(g)
    return 100.0 * float(bad.sum()) / err.size


@dataclass
class MetricReport:
    epe: float | None = None
    d1: float | None = None
    valid_pixel_count: int = 0
    per_image: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"epe": self.epe, "d1": self.d1, "valid_pixels": self.valid_pixel_count,
                "images": len(self.per_image)}

    def format(self) -> str:
        fmt = lambda v, unit: "n/a" if v is None else f"{v:.4f}{unit}"
        return (f"EPE {fmt(self.epe, ' px')}  D1 {fmt(self.d1, ' %')}  "
                f"valid pixels {self.valid_pixel_count}  images {len(self.per_image)}")


class MetricAccumulator:
    """Pixel-weighted EPE/D1 over many images, plus a per-image breakdown."""

    def __init__(self):
        self.abs_sum = 0.0
        self.bad = 0
        self.count = 0
        self.per_image: list[dict] = []

    def update(self, pred, gt, mask, name: str = "") -> None:
        err, _ = _errors(pred, gt, mask)
        self.abs_sum += float(err.sum())
        self.bad += int((err > D1_THRESHOLD).sum())
        self.count += int(err.size)
        self.per_image.append({
            "name": name,
            "epe": float(err.mean()) if err.size else None,
            "d1": 100.0 * float((err > D1_THRESHOLD).mean()) if err.size else None,
            "valid_pixels": int(err.size),
        })

    def report(self) -> MetricReport:
        if not self.count:
            return MetricReport(None, None, 0, self.per_image)
        return MetricReport(self.abs_sum / self.count, 100.0 * self.bad / self.count, self.count,
                            self.per_image)
