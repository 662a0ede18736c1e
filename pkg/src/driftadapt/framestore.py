"""One-file-per-frame storage for sequence data.

Frame layout: magic "DAFR", u32 version, u16 H, u16 W, u8 channels,
u8 class count, image as little-endian float32 (C*H*W values, CHW
order), labels as u8 (H*W).  Loading validates every header field,
optionally against the dimensions the caller expects, so corruption
anywhere in the header is rejected rather than misread.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"DAFR"
VERSION = 1
HEADER = struct.Struct("<4sIHHBB")


def write_frame(path, image: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    image = np.asarray(image, dtype="<f4")
    labels = np.asarray(labels)
    if image.ndim != 3:
        raise FormatError(f"image must be CxHxW, got shape {image.shape}")
    c, h, w = image.shape
    if labels.shape != (h, w):
        raise FormatError(f"labels shaped {labels.shape} do not match image {h}x{w}")
    if not np.all(np.isfinite(image)):
        raise FormatError("image contains non-finite values")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise FormatError(f"labels outside [0, {num_classes}): "
                          f"range {labels.min()}..{labels.max()}")
    blob = (HEADER.pack(MAGIC, VERSION, h, w, c, num_classes)
            + image.tobytes() + labels.astype(np.uint8).tobytes())
    Path(path).write_bytes(blob)


def load_frame(path, expect: tuple | None = None) -> tuple:
    """Read a frame file back as (image float32 CxHxW, labels uint8 HxW, K).

    ``expect``, when given, is (H, W, C, K); any mismatch is rejected, which
    covers every byte of the header.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"frame file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: too short for a frame header")
    magic, version, h, w, c, k = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path} is not a frame file (bad magic)")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported frame version {version}")
    if expect is not None:
        eh, ew, ec, ek = expect
        if (h, w, c, k) != (eh, ew, ec, ek):
            raise FormatError(f"{path}: header says {h}x{w}, {c} channels, {k} classes; "
                              f"expected {eh}x{ew}, {ec} channels, {ek} classes")
    if h < 1 or w < 1 or c < 1 or k < 2:
        raise FormatError(f"{path}: implausible header ({h}x{w}, {c} channels, {k} classes)")
    need = HEADER.size + 4 * c * h * w + h * w
    if len(blob) != need:
        raise FormatError(f"{path}: file is {len(blob)} bytes, header implies {need}")
    image = np.frombuffer(blob, dtype="<f4", count=c * h * w,
                          offset=HEADER.size).reshape(c, h, w).copy()
    labels = np.frombuffer(blob, dtype=np.uint8, count=h * w,
                           offset=HEADER.size + 4 * c * h * w).reshape(h, w).copy()
    if not np.all(np.isfinite(image)):
        raise FormatError(f"{path}: image contains non-finite values")
    if labels.max() >= k:
        bad = np.argwhere(labels >= k)[0]
        raise FormatError(f"{path}: label {labels[bad[0], bad[1]]} at pixel "
                          f"({bad[0]}, {bad[1]}) exceeds class count {k}")
    return image, labels, k


def write_ppm(path, image: np.ndarray) -> None:
    """Dump a CxHxW [0,1] image as binary PPM for quick visual checks."""
    c, h, w = image.shape
    if c != 3:
        raise FormatError(f"PPM export needs 3 channels, got {c}")
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def frame_name(t: int) -> str:
    return f"frame_{t:04d}.dafr"
