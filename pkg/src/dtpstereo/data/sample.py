from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dtpstereo.errors import DataError


@dataclass
class StereoSample:
    """One rectified pair with left-view ground truth.

    ``left``/``right`` are H x W x 3 float32 in [0, 1]; ``gt_disparity`` is
    H x W float32 pixels; ``valid_mask`` is H x W bool.
    """

    left: np.ndarray
    right: np.ndarray
    gt_disparity: np.ndarray
    valid_mask: np.ndarray
    name: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_disparity.shape

    def check(self, d_max: int | None = None) -> "StereoSample":
        """Enforce the sample invariants; tightens the mask to 0 < gt < d_max."""
        h, w = self.gt_disparity.shape
        for name in ("left", "right"):
            img = getattr(self, name)
            if img.shape != (h, w, 3):
                raise DataError(f"{self.name or 'sample'}: {name} image {img.shape} != {(h, w, 3)}")
        if self.valid_mask.shape != (h, w):
            raise DataError(f"{self.name or 'sample'}: mask shape {self.valid_mask.shape} != {(h, w)}")
        mask = self.valid_mask & np.isfinite(self.gt_disparity) & (self.gt_disparity > 0)
        if d_max is not None:
            mask &= self.gt_disparity < d_max
        self.valid_mask = mask
        return self
