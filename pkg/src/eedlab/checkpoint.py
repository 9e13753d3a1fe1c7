"""Binary model checkpoints.

Layout (all little-endian)::

    b"EEDM" | u32 version | u32 arch_len | arch JSON (utf-8)
    u64 rng_seed
    per layer, in order:
        u32 n_tensors
        per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 data[...]

Tensor names are ``param:<name>``, ``buffer:<name>`` or ``mask``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .netcore import Model, build_model

MAGIC = b"EEDM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(layer):
    out = [(f"param:{k}", v) for k, v in layer.params.items()]
    out += [(f"buffer:{k}", v) for k, v in layer.buffers.items()]
    if layer.mask is not None:
        out.append(("mask", layer.mask))
    return out


def dumps(model: Model) -> bytes:
    buf = io.BytesIO()
    arch = json.dumps(model.architecture(), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<Q", model.rng_seed & 0xFFFFFFFFFFFFFFFF))
    for layer in model.layers:
        tensors = _tensors(layer)
        buf.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Model:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not an EEDM checkpoint (bad magic)")
    version, arch_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = json.loads(bytes(take(arch_len)).decode())
    (seed,) = struct.unpack("<Q", take(8))
    model = build_model(_arch_for_build(arch), seed)
    for i, layer in enumerate(model.layers):
        (n,) = struct.unpack("<I", take(4))
        for _ in range(n):
            (nlen,) = struct.unpack("<H", take(2))
            name = bytes(take(nlen)).decode()
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(bytes(take(8 * count)), dtype="<f8").astype(np.float64)
            arr = arr.reshape(shape)
            kind, _, key = name.partition(":")
            if name == "mask":
                layer.mask = arr
            elif kind == "param":
                layer.params[key] = arr
            elif kind == "buffer":
                layer.buffers[key] = arr
            else:
                raise CheckpointError(f"unknown tensor {name!r} in layer {i}")
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return model


def _arch_for_build(arch):
    # stored configs carry resolved in/out dims; the builder only needs kind/out/kernel/padding
    layers = []
    for cfg in arch["layers"]:
        c = {"kind": cfg["kind"]}
        for key in ("out", "kernel", "padding"):
            if key in cfg:
                c[key] = cfg[key]
        layers.append(c)
    return {"input_shape": arch["input_shape"], "num_classes": arch["num_classes"],
            "layers": layers}


def save(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model))
    return path


def load(path) -> Model:
    return loads(Path(path).read_bytes())
