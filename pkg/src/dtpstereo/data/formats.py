"""Readers and writers for stereo disparity formats.

PFM (SceneFlow): ASCII header ``Pf``/``PF``, ``width height``, ``scale``,
then float32 rows stored bottom-to-top. A negative scale means little-endian
payload, positive means big-endian; ``|scale|`` multiplies the stored values.

KITTI: 16-bit single-channel PNG, disparity = value / 256, value 0 = no data.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from dtpstereo.errors import FormatError


@dataclass
class PFMHeader:
    channels: int
    width: int
    height: int
    scale: float
    data_offset: int

    @property
    def little_endian(self) -> bool:
        return self.scale < 0


def _line(data: bytes, start: int) -> tuple[bytes, int]:
    end = data.find(b"\n", start)
    if end < 0:
        raise FormatError("unterminated PFM header line", start)
    return data[start:end].strip(), end + 1


def read_pfm_header(data: bytes) -> PFMHeader:
    magic, pos = _line(data, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise FormatError(f"bad PFM magic {magic[:8]!r}", 0)
    dims_at = pos
    dims, pos = _line(data, pos)
    try:
        width, height = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(f"bad PFM dimensions {dims[:32]!r}", dims_at) from None
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive PFM dimensions {width}x{height}", dims_at)
    scale_at = pos
    raw_scale, pos = _line(data, pos)
    try:
        scale = float(raw_scale)
    except ValueError:
        raise FormatError(f"bad PFM scale {raw_scale[:32]!r}", scale_at) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("PFM scale must be finite and nonzero", scale_at)
    return PFMHeader(channels, width, height, scale, pos)


def read_pfm(data: bytes) -> np.ndarray:
    """Decode PFM bytes to a float32 array, H x W (``Pf``) or H x W x 3 (``PF``), top row first."""
    hdr = read_pfm_header(data)
    n = hdr.width * hdr.height * hdr.channels
    need = hdr.data_offset + 4 * n
    if len(data) < need:
        raise FormatError(f"truncated PFM payload: need {need} bytes, have {len(data)}", len(data))
    dtype = np.dtype("<f4" if hdr.little_endian else ">f4")
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=hdr.data_offset)
    shape = (hdr.height, hdr.width) if hdr.channels == 1 else (hdr.height, hdr.width, 3)
    arr = np.flipud(arr.reshape(shape)).astype(np.float32)
    if abs(hdr.scale) != 1.0:
        arr = arr * np.float32(abs(hdr.scale))
    return np.ascontiguousarray(arr)


def write_pfm(image: np.ndarray, scale: float = -1.0) -> bytes:
    """Encode a float image as PFM. Negative ``scale`` writes little-endian."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM needs H x W or H x W x 3, got {image.shape}")
    if scale == 0:
        raise ValueError("PFM scale must be nonzero")
    if abs(scale) != 1.0:
        image = image / np.float32(abs(scale))
    h, w = image.shape[:2]
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    header = magic + b"\n" + f"{w} {h}\n{scale}\n".encode()
    return header + np.flipud(image).astype(dtype).tobytes()


def load_pfm(path) -> np.ndarray:
    return read_pfm(Path(path).read_bytes())


def save_pfm(path, image: np.ndarray, scale: float = -1.0) -> None:
    Path(path).write_bytes(write_pfm(image, scale))


def read_kitti_disparity(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """16-bit PNG bytes -> (disparity in px, valid mask)."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise FormatError(f"unreadable disparity PNG: {exc}", 0) from None
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise FormatError(f"KITTI disparity must be a 16-bit single-channel PNG, got mode {img.mode}", 0)
    raw = np.array(img, dtype=np.uint16)
    return raw.astype(np.float32) / 256.0, raw > 0


def write_kitti_disparity(disparity: np.ndarray, valid: np.ndarray | None = None) -> bytes:
    raw = np.clip(np.round(np.asarray(disparity, np.float64) * 256.0), 0, 65535).astype(np.uint16)
    if valid is not None:
        raw[~np.asarray(valid, bool)] = 0
    buf = io.BytesIO()
    Image.fromarray(raw).save(buf, format="PNG")
    return buf.getvalue()


def read_rgb(path) -> np.ndarray:
    """8-bit image file -> H x W x 3 float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from None
