"""VLRD dataset files.

Little-endian layout::

    magic        4 bytes  b"VLRD"
    version      u8       1
    count        u32
    height       u16
    width        u16
    channels     u8       1
    class_count  u16
    pixels       count*H*W u8    (value = byte / 255)
    labels       count u16
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .data import ImageDataset
from .errors import FormatError

MAGIC = b"VLRD"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHBH")


def encode_dataset(dataset: ImageDataset) -> bytes:
    count, channels, h, w = dataset.images.shape
    if channels != 1:
        raise FormatError(f"only single-channel datasets are supported, got {channels}")
    if dataset.class_count > 0xFFFF:
        raise FormatError(f"class_count {dataset.class_count} does not fit in u16")
    pixels = np.round(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype("u1")
    header = _HEADER.pack(MAGIC, VERSION, count, h, w, 1, dataset.class_count)
    return header + pixels.tobytes() + dataset.labels.astype("<u2").tobytes()


def decode_dataset(blob: bytes) -> ImageDataset:
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes, need {_HEADER.size}")
    magic, version, count, h, w, channels, class_count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if channels != 1:
        raise FormatError(f"channels must be 1, got {channels}")
    if class_count < 1:
        raise FormatError("class_count must be positive")
    n_pix = count * h * w
    expected = _HEADER.size + n_pix + 2 * count
    if len(blob) != expected:
        raise FormatError(
            f"payload size {len(blob) - _HEADER.size} does not match header "
            f"(count={count}, {h}x{w} needs {expected - _HEADER.size})"
        )
    off = _HEADER.size
    pixels = np.frombuffer(blob, dtype="u1", count=n_pix, offset=off)
    labels = np.frombuffer(blob, dtype="<u2", count=count, offset=off + n_pix).astype(np.int64)
    if count and labels.max() >= class_count:
        raise FormatError(f"label {labels.max()} >= class_count {class_count}")
    images = pixels.reshape(count, 1, h, w).astype(np.float64) / 255.0
    return ImageDataset(images, labels, class_count)


def save_dataset(dataset: ImageDataset, path) -> str:
    """Write ``dataset`` and return the sha256 of the bytes written."""
    blob = encode_dataset(dataset)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path) -> ImageDataset:
    return decode_dataset(Path(path).read_bytes())
