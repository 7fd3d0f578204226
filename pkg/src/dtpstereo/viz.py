"""Colorized disparity and error maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

# errors at or beyond this many pixels get the warmest color
ERROR_CEIL = 6.0


def _as_numpy(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def colorize_disparity(disp, d_max: float, cmap: str = "magma") -> np.ndarray:
    """H x W disparity -> H x W x 3 uint8; near (large disparity) is bright."""
    disp = _as_numpy(disp).astype(np.float64)
    scaled = np.clip(np.nan_to_num(disp) / max(float(d_max) - 1, 1e-6), 0.0, 1.0)
    return (colormaps[cmap](scaled)[..., :3] * 255).round().astype(np.uint8)


def colorize_error(pred, gt, mask, ceil: float = ERROR_CEIL, cmap: str = "coolwarm") -> np.ndarray:
    """|pred - gt| mapped blue (small) to red (large); invalid pixels are black."""
    err = np.abs(_as_numpy(pred).astype(np.float64) - _as_numpy(gt).astype(np.float64))
    mask = _as_numpy(mask).astype(bool)
    rgb = (colormaps[cmap](np.clip(err / ceil, 0.0, 1.0))[..., :3] * 255).round().astype(np.uint8)
    rgb[~mask] = 0
    return rgb


def save_rgb(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path
