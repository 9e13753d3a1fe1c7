"""Dataset ingestion: IDX (MNIST format), CIFAR-10 binary and synthetic 2-D sets."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .netcore import Batch

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def _read_idx(path, expected_magic, ndim):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"unexpected magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"truncated payload: need {size} bytes, found {len(raw) - header}",
                          len(raw))
    if len(raw) > header + size:
        raise FormatError("trailing bytes after IDX payload", header + size)
    return np.frombuffer(raw, dtype=np.uint8, offset=header, count=size).reshape(dims)


def load_idx(images_path, labels_path) -> Batch:
    """Read an IDX image/label pair; pixels are scaled to [0, 1].

    Images come back as (count, 1, rows, cols).
    """
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Batch(x, labels.astype(np.int64))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (count, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS, len(labels)) + labels.tobytes())


def load_cifar10_bin(path) -> Batch:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    rec = 1 + 3 * 32 * 32
    if raw.size % rec:
        raise FormatError(f"size {raw.size} is not a multiple of the {rec}-byte record",
                          raw.size - raw.size % rec)
    raw = raw.reshape(-1, rec)
    x = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Batch(x, raw[:, 0].astype(np.int64))


def gen_synthetic(kind, n, noise, seed=0) -> Batch:
    """Two-class 2-D data.

    ``blobs`` puts the class means at (-1, -1) and (1, 1); ``moons`` is the
    usual pair of interleaved half circles. Gaussian noise of std ``noise``.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    if kind == "blobs":
        x = np.concatenate([np.full((n0, 2), -1.0), np.full((n1, 2), 1.0)])
    elif kind == "moons":
        t0 = np.linspace(0, np.pi, n0)
        t1 = np.linspace(0, np.pi, n1)
        outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        inner = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x = np.concatenate([outer, inner])
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    if noise > 0:
        x = x + rng.normal(scale=noise, size=x.shape)
    order = rng.permutation(n)
    return Batch(x[order], y[order])


def to_unit_box(batch: Batch, lo=None, hi=None, margin=0.05):
    """Affinely map features into [margin, 1 - margin]; returns ``(batch, lo, hi)``.

    ``lo``/``hi`` default to the per-feature extremes of ``batch``; reuse them
    to map other splits identically (values are clipped to [0, 1]).
    """
    x = batch.inputs
    lo = x.min(axis=0) if lo is None else lo
    hi = x.max(axis=0) if hi is None else hi
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = margin + (1 - 2 * margin) * (x - lo) / span
    return Batch(np.clip(scaled, 0.0, 1.0), batch.labels), lo, hi


def split(batch: Batch, fractions, seed=0):
    """Shuffle and cut into consecutive parts with the given fractions (rest last)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(batch))
    cuts, acc = [], 0
    for f in fractions:
        acc += int(round(f * len(batch)))
        cuts.append(acc)
    return [batch.subset(np.sort(part)) for part in np.split(order, cuts)]
