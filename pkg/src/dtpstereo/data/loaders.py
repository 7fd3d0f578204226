"""Dataset access, preprocessing and deterministic batching."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from dtpstereo.data.formats import load_pfm, read_kitti_disparity, read_rgb
from dtpstereo.data.sample import StereoSample
from dtpstereo.data.synthetic import SyntheticStereo
from dtpstereo.errors import ConfigError, DataError

# ImageNet channel statistics
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)
DATASET_KINDS = ("sceneflow", "kitti", "synthetic")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    root: str = ""                   # directory, or synthetic://seed/HxW/max_d
    split: str = "train"
    crop: tuple[int, int] | None = None
    d_max: int = 192
    n: int = 0                       # synthetic sample count / optional cap for file datasets
    n_planes: int = 3
    every: int = 0                   # kitti: select every k-th frame (0 = all)
    offset: int = 0                  # kitti: start index for `every`
    exclude: bool = False            # kitti: keep the frames `every` does not select
    mean: tuple[float, ...] = NORM_MEAN
    std: tuple[float, ...] = NORM_STD

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.crop is not None:
            self.crop = tuple(self.crop)
            if any(c <= 0 or c % 4 for c in self.crop):
                raise ConfigError(f"crop {self.crop} must be positive multiples of 4")
        self.mean, self.std = tuple(self.mean), tuple(self.std)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop"] = list(self.crop) if self.crop else None
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d


class _FileStereo:
    def __init__(self, items, d_max):
        self.items, self.d_max = items, d_max

    def __len__(self):
        return len(self.items)


class SceneFlowStereo(_FileStereo):
    """FlyingThings3D layout: ``frames_cleanpass/<SPLIT>/*/*/{left,right}/*.png`` with
    ``disparity/<SPLIT>/*/*/left/*.pfm``."""

    def __init__(self, root, split="train", d_max=192, passname="frames_cleanpass", limit=0):
        root = Path(root)
        split_dir = split.upper()
        lefts = sorted((root / passname / split_dir).glob("*/*/left/*.png"))
        if not lefts:
            raise DataError(f"no SceneFlow images under {root / passname / split_dir}")
        items = []
        for left in lefts:
            rel = left.relative_to(root / passname)
            items.append((left, left.parent.parent / "right" / left.name,
                          (root / "disparity" / rel).with_suffix(".pfm")))
        super().__init__(items[:limit] if limit else items, d_max)

    def __getitem__(self, i) -> StereoSample:
        left, right, disp = self.items[i]
        for p in (left, right, disp):
            if not p.exists():
                raise DataError(f"missing file {p}")
        gt = load_pfm(disp)
        gt = np.abs(gt) if gt.ndim == 2 else np.abs(gt[..., 0])
        sample = StereoSample(read_rgb(left), read_rgb(right), gt, np.ones(gt.shape, bool), name=str(left))
        return sample.check(self.d_max)


class KittiStereo(_FileStereo):
    """KITTI 2015 layout: ``<split>/image_2``, ``image_3`` and ``disp_occ_0`` (``*_10.png``)."""

    def __init__(self, root, split="training", d_max=192, every=0, offset=0, exclude=False, limit=0):
        root = Path(root) / split
        lefts = sorted((root / "image_2").glob("*_10.png"))
        if not lefts:
            raise DataError(f"no KITTI images under {root / 'image_2'}")
        items = [(l, root / "image_3" / l.name, root / "disp_occ_0" / l.name) for l in lefts]
        if every:
            chosen = [i % every == offset for i in range(len(items))]
            items = [it for it, c in zip(items, chosen) if c != exclude]
        super().__init__(items[:limit] if limit else items, d_max)

    def __getitem__(self, i) -> StereoSample:
        left, right, disp = self.items[i]
        l_img, r_img = read_rgb(left), read_rgb(right)
        if disp.exists():
            gt, mask = read_kitti_disparity(disp.read_bytes())
        else:
            gt, mask = np.zeros(l_img.shape[:2], np.float32), np.zeros(l_img.shape[:2], bool)
        return StereoSample(l_img, r_img, gt, mask, name=str(left)).check(self.d_max)


class _CheckedSynthetic(SyntheticStereo):
    def __init__(self, *args, d_max=192, **kw):
        super().__init__(*args, **kw)
        self.d_max = d_max
        self._cache: dict[int, StereoSample] = {}

    def __getitem__(self, i):
        if i not in self._cache:
            self._cache[i] = super().__getitem__(i).check(self.d_max)
        return self._cache[i]


def make_dataset(spec: DatasetSpec):
    if spec.kind == "synthetic":
        if spec.n <= 0:
            raise ConfigError("synthetic datasets need n > 0")
        from dtpstereo.data.synthetic import parse_synthetic_uri
        seed, h, w, max_d = parse_synthetic_uri(spec.root)
        return _CheckedSynthetic(spec.n, seed, h, w, max_d, spec.n_planes, d_max=spec.d_max)
    if not Path(spec.root).is_dir():
        raise DataError(f"dataset root {spec.root!r} does not exist")
    if spec.kind == "sceneflow":
        return SceneFlowStereo(spec.root, spec.split, spec.d_max, limit=spec.n)
    return KittiStereo(spec.root, spec.split, spec.d_max, spec.every, spec.offset, spec.exclude,
                       limit=spec.n)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize(img: np.ndarray, mean=NORM_MEAN, std=NORM_STD) -> np.ndarray:
    return (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def denormalize(img: np.ndarray, mean=NORM_MEAN, std=NORM_STD) -> np.ndarray:
    return img * np.asarray(std, np.float32) + np.asarray(mean, np.float32)


@dataclass
class ModelInput:
    left: torch.Tensor       # 3 x H x W
    right: torch.Tensor
    gt: torch.Tensor         # H x W
    mask: torch.Tensor       # H x W bool
    pad: tuple[int, int] = (0, 0)   # rows added on top, columns added on the right
    name: str = ""


def random_crop_box(h, w, crop, rng: np.random.Generator) -> tuple[int, int]:
    ch, cw = crop
    if ch > h or cw > w:
        raise ConfigError(f"crop {crop} larger than image {h}x{w}")
    return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))


def pad_amount(size: int, multiple: int = 4) -> int:
    return (-size) % multiple


def preprocess(sample: StereoSample, crop=None, training=False, rng=None,
               mean=NORM_MEAN, std=NORM_STD) -> ModelInput:
    """Training: seeded random crop. Evaluation: pad top/right to a multiple of 4."""
    left = normalize(sample.left, mean, std)
    right = normalize(sample.right, mean, std)
    gt, mask = sample.gt_disparity, sample.valid_mask
    h, w = gt.shape
    pad = (0, 0)
    if training and crop is not None:
        y, x = random_crop_box(h, w, crop, rng if rng is not None else np.random.default_rng())
        sl = (slice(y, y + crop[0]), slice(x, x + crop[1]))
        left, right, gt, mask = left[sl], right[sl], gt[sl], mask[sl]
    else:
        pad = (pad_amount(h), pad_amount(w))
        if any(pad):
            spec = ((pad[0], 0), (0, pad[1]))
            left = np.pad(left, spec + ((0, 0),))
            right = np.pad(right, spec + ((0, 0),))
            gt = np.pad(gt, spec)
            mask = np.pad(mask, spec)
    as_chw = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))
    return ModelInput(as_chw(left), as_chw(right), torch.from_numpy(np.ascontiguousarray(gt)),
                      torch.from_numpy(np.ascontiguousarray(mask)), pad, sample.name)


def unpad(pred: torch.Tensor, pad: tuple[int, int]) -> torch.Tensor:
    top, right = pad
    h, w = pred.shape[-2:]
    return pred[..., top:h, : w - right]


@dataclass
class Batch:
    left: torch.Tensor
    right: torch.Tensor
    gt: torch.Tensor
    mask: torch.Tensor
    pads: list = field(default_factory=list)
    names: list = field(default_factory=list)
    indices: list = field(default_factory=list)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset, batch_size: int, seed: int = 0, epoch: int = 0, training: bool = False,
            crop=None, shuffle: bool | None = None, workers: int = 0, mean=NORM_MEAN, std=NORM_STD):
    """Yield :class:`Batch` objects.

    Order and crops are pure functions of (seed, epoch, index); ``workers``
    only changes how samples are fetched.
    """
    shuffle = training if shuffle is None else shuffle
    order = epoch_order(len(dataset), seed, epoch, shuffle)

    def load(i):
        rng = np.random.default_rng([seed, epoch, int(i), 7])
        return preprocess(dataset[int(i)], crop, training, rng, mean, std)

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            items = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
            shapes = {tuple(it.gt.shape) for it in items}
            if len(shapes) != 1:
                raise DataError(f"cannot batch samples of different sizes {shapes}; set a crop")
            yield Batch(torch.stack([it.left for it in items]), torch.stack([it.right for it in items]),
                        torch.stack([it.gt for it in items]), torch.stack([it.mask for it in items]),
                        [it.pad for it in items], [it.name for it in items], [int(i) for i in idx])
    finally:
        if pool:
            pool.shutdown()
