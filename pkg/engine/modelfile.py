"""
fgvis — FGV1 Model File

Layout (little-endian):
    b"FGV1"
    u32 C, H, W                           input shape
    f64[C] mean, f64[C] std               normalization
    u32 layer count
    per layer: u8 tag, tag-specific u32 hyperparameters, then parameter tensors
               (u32 ndim, u32[ndim] dims, f32 payload)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import math
import struct
import zlib
from pathlib import Path

import numpy as np

from shared.models import ChecksumError, FormatError, Normalization, VersionError
from shared.tensor import ENGINE_DTYPE, Tensor

from .network import Conv2d, Flatten, Layer, Linear, MaxPool2d, Network, ReLU, Softmax

MAGIC = b"FGV1"

_TAGS: dict[type, int] = {Conv2d: 1, ReLU: 2, MaxPool2d: 3, Flatten: 4, Linear: 5, Softmax: 6}


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _pack_tensor(t: Tensor) -> bytes:
    head = struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
    return head + np.ascontiguousarray(t, dtype="<f4").tobytes()


def encode_model(net: Network) -> bytes:
    c = net.input_shape[0]
    parts = [
        MAGIC,
        struct.pack("<3I", *net.input_shape),
        struct.pack(f"<{c}d", *net.normalization.mean),
        struct.pack(f"<{c}d", *net.normalization.std),
        struct.pack("<I", len(net.layers)),
    ]
    for layer in net.layers:
        parts.append(struct.pack("<B", _TAGS[type(layer)]))
        if isinstance(layer, Conv2d):
            parts.append(struct.pack("<2I", layer.stride, layer.padding))
        elif isinstance(layer, MaxPool2d):
            parts.append(struct.pack("<2I", layer.window, layer.stride))
        parts.extend(_pack_tensor(p) for p in layer.params)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(net: Network, path: Path | str) -> None:
    Path(path).write_bytes(encode_model(net.astype(ENGINE_DTYPE)))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(
                f"truncated model file: need {size} bytes, {len(self.data) - self.pos} left",
                offset=self.pos,
            )
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def tensor(self) -> Tensor:
        (ndim,) = self.unpack("<I")
        if ndim > 8:
            raise FormatError(f"implausible tensor rank {ndim}", offset=self.pos - 4)
        dims = self.unpack(f"<{ndim}I")
        count = math.prod(dims)
        if self.pos + 4 * count > len(self.data):
            raise FormatError(f"truncated tensor payload of {count} values", offset=self.pos)
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos)
        self.pos += 4 * count
        return arr.astype(ENGINE_DTYPE).reshape(dims)


def decode_model(data: bytes) -> Network:
    if data[:4] != MAGIC:
        raise VersionError(f"unknown model file magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < 8:
        raise FormatError("model file too short for a checksum", offset=len(data))
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    actual = zlib.crc32(body)
    if stored != actual:
        raise ChecksumError(
            f"CRC32 mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}",
            offset=len(body),
        )

    r = _Reader(body)
    r.pos = len(MAGIC)
    input_shape = r.unpack("<3I")
    c = input_shape[0]
    mean, std = r.unpack(f"<{c}d"), r.unpack(f"<{c}d")
    (count,) = r.unpack("<I")
    tag_to_kind = {v: k for k, v in _TAGS.items()}
    layers: list[Layer] = []
    for _ in range(count):
        (tag,) = r.unpack("<B")
        kind = tag_to_kind.get(tag)
        if kind is None:
            raise FormatError(f"unknown layer tag {tag}", offset=r.pos - 1)
        if kind is Conv2d:
            stride, padding = r.unpack("<2I")
            layers.append(Conv2d(r.tensor(), r.tensor(), stride=stride, padding=padding))
        elif kind is MaxPool2d:
            window, stride = r.unpack("<2I")
            layers.append(MaxPool2d(window, stride))
        elif kind is Linear:
            layers.append(Linear(r.tensor(), r.tensor()))
        else:
            layers.append(kind())
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes after last layer", offset=r.pos)
    return Network(
        input_shape=tuple(input_shape),
        layers=tuple(layers),
        normalization=Normalization(mean=mean, std=std),
    )


def load_model(path: Path | str) -> Network:
    return decode_model(Path(path).read_bytes())
