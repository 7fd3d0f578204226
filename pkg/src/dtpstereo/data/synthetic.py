"""Deterministic synthetic stereo pairs with exact ground truth.

Scenes are stacks of fronto-parallel textured rectangles at integer
disparities: a full-frame background (the farthest plane) plus
``n_planes - 1`` foreground rectangles. Textures are attached to the planes,
so a left pixel at column x on a plane with disparity d appears in the right
image at column x - d, bit for bit.
"""
from __future__ import annotations

import re

import numpy as np

from dtpstereo.data.sample import StereoSample
from dtpstereo.errors import ConfigError

_URI = re.compile(r"^synthetic://(\d+)/(\d+)x(\d+)/(\d+)$")


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.85, size=3)
    cell = int(rng.integers(1, 3))
    fine = rng.uniform(-1, 1, size=(h // cell + 1, w // cell + 1, 3))
    fine = np.repeat(np.repeat(fine, cell, axis=0), cell, axis=1)[:h, :w]
    coarse = rng.uniform(-1, 1, size=(h // 8 + 2, w // 8 + 2, 1))
    coarse = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)[:h, :w]
    tex = base + 0.22 * fine + 0.12 * coarse
    return np.clip(tex, 0.0, 1.0).astype(np.float32)


def synth_stereo(seed: int, h: int = 64, w: int = 96, max_d: int = 24,
                 n_planes: int = 3) -> StereoSample:
    if h % 4 or w % 4:
        raise ConfigError(f"synthetic size {h}x{w} must be divisible by 4")
    if not 1 <= max_d <= w // 4:
        raise ConfigError(f"max_d={max_d} must lie in [1, W/4={w // 4}]")
    if n_planes < 1 or n_planes > max_d:
        raise ConfigError(f"n_planes={n_planes} must lie in [1, max_d]")
    rng = np.random.default_rng(seed)
    disps = np.sort(rng.choice(np.arange(1, max_d + 1), size=n_planes, replace=False))

    # planes in left-view coordinates: (disparity, y0, y1, x0, x1, texture)
    planes = [(int(disps[0]), 0, h, 0, w + max_d, _texture(rng, h, w + max_d))]
    for d in disps[1:]:
        ph = int(rng.integers(h // 4, h // 2 + 1))
        pw = int(rng.integers(w // 6, w // 3 + 1))
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        planes.append((int(d), y0, y0 + ph, x0, x0 + pw, _texture(rng, h, w + max_d)))

    # nearer planes (larger disparity) are painted last
    left = np.zeros((h, w, 3), np.float32)
    right = np.zeros((h, w, 3), np.float32)
    gt = np.zeros((h, w), np.float32)
    owner_l = np.zeros((h, w), np.int32)
    owner_r = np.zeros((h, w), np.int32)
    cols = np.arange(w)
    for idx, (d, y0, y1, x0, x1, tex) in enumerate(planes):
        xl = cols[(cols >= x0) & (cols < x1)]
        left[y0:y1, xl] = tex[y0:y1, xl]
        gt[y0:y1, xl] = d
        owner_l[y0:y1, xl] = idx
        # right column xr shows plane column xr + d
        src = cols + d
        xr = cols[(src >= x0) & (src < x1)]
        right[y0:y1, xr] = tex[y0:y1, xr + d]
        owner_r[y0:y1, xr] = idx

    yy, xx = np.mgrid[0:h, 0:w]
    xr = xx - gt.astype(np.int64)
    in_frame = xr >= 0
    valid = np.zeros((h, w), bool)
    valid[in_frame] = owner_r[yy[in_frame], xr[in_frame]] == owner_l[in_frame]
    return StereoSample(left, right, gt, valid, name=f"synthetic-{seed}")


def parse_synthetic_uri(uri: str) -> tuple[int, int, int, int]:
    """``synthetic://seed/HxW/max_d`` -> (seed, H, W, max_d)."""
    m = _URI.match(uri)
    if not m:
        raise ConfigError(f"bad synthetic dataset address {uri!r}; expected synthetic://seed/HxW/max_d")
    seed, h, w, max_d = (int(g) for g in m.groups())
    return seed, h, w, max_d


class SyntheticStereo:
    """Indexable collection of ``n`` synthetic samples; sample i uses seed base_seed * 1_000_003 + i."""

    def __init__(self, n: int, seed: int = 0, h: int = 64, w: int = 96, max_d: int = 24,
                 n_planes: int = 3):
        self.n, self.seed, self.h, self.w = n, seed, h, w
        self.max_d, self.n_planes = max_d, n_planes

    @classmethod
    def from_uri(cls, uri: str, n: int, n_planes: int = 3) -> "SyntheticStereo":
        seed, h, w, max_d = parse_synthetic_uri(uri)
        return cls(n, seed, h, w, max_d, n_planes)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> StereoSample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        return synth_stereo(self.seed * 1_000_003 + i, self.h, self.w, self.max_d, self.n_planes)
