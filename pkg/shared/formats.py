"""
fgvis — External Byte Formats

  - IDX containers (big-endian; u8 payload; 1-D labels, 3-D [N, H, W] and
    4-D [N, C, H, W] images), optionally gzip-compressed
  - binary netpbm images: PGM (P5) for one channel, PPM (P6) for three
  - plain-text key=value files (run configs, manifests)

Every parser is total: bad input raises FormatError with a byte offset,
never anything else.
"""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel

from .models import FormatError, GameConfig, ShapeError
from .tensor import ENGINE_DTYPE, Tensor

# Colour images are stored B, G, R along the channel axis.
CHANNEL_ORDER = "BGR"

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
IDX_IMAGE4_MAGIC = 0x00000804
_IDX_U8 = 0x08


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def parse_idx(data: bytes, expected_magic: Optional[int] = None) -> NDArray[np.uint8]:
    """Decode an IDX u8 container into an array shaped by its dimension header."""
    if len(data) < 4:
        raise FormatError(f"IDX header needs 4 magic bytes, file has {len(data)}", offset=0)
    zero, dtype_code, ndim = struct.unpack_from(">HBB", data, 0)
    magic = struct.unpack_from(">I", data, 0)[0]
    if zero != 0 or dtype_code != _IDX_U8 or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(
            f"expected IDX magic 0x{expected_magic:08x}, found 0x{magic:08x}", offset=0
        )

    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError(
            f"truncated IDX header: expected {header_end} bytes, got {len(data)}",
            offset=len(data),
        )
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    expected = header_end + math.prod(dims)
    if len(data) != expected:
        raise FormatError(
            f"IDX payload length mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
        )
    if expected == header_end:
        return np.zeros(dims, dtype=np.uint8)
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(dims)


def read_idx_file(path: Path | str, expected_magic: Optional[int] = None) -> NDArray[np.uint8]:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError, zlib.error) as exc:
            raise FormatError(f"corrupt gzip stream in {path}: {exc}", offset=0) from exc
    return parse_idx(data, expected_magic)


def encode_idx(array: NDArray[np.uint8]) -> bytes:
    if array.dtype != np.uint8 or array.ndim == 0:
        raise ShapeError("IDX encoding needs a non-scalar uint8 array")
    header = struct.pack(">HBB", 0, _IDX_U8, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

def quantize(img: Tensor) -> NDArray[np.uint8]:
    """[0,1] -> bytes, round half up."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _encode_pnm(img: Tensor, channels: int, magic: bytes) -> bytes:
    if img.ndim != 3 or img.shape[0] != channels:
        raise ShapeError(f"{magic.decode()} needs a [{channels}, H, W] image, got {img.shape}")
    _, h, w = img.shape
    raster = quantize(img)
    if channels == 3:
        raster = raster[::-1]  # BGR -> file order RGB
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(raster.transpose(1, 2, 0)).tobytes()


def encode_pgm(img: Tensor) -> bytes:
    return _encode_pnm(img, 1, b"P5")


def encode_ppm(img: Tensor) -> bytes:
    return _encode_pnm(img, 3, b"P6")


def encode_image(img: Tensor) -> tuple[bytes, str]:
    """PGM or PPM by channel count; returns (bytes, file suffix)."""
    if img.ndim == 3 and img.shape[0] == 3:
        return encode_ppm(img), "ppm"
    return encode_pgm(img), "pgm"


def _header_tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header", offset=pos)
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise FormatError("netpbm header must end with one whitespace byte", offset=pos)
    return tokens, pos + 1


def decode_pnm(data: bytes) -> Tensor:
    """Binary PGM/PPM -> float32 [C, H, W] in [0,1] (colour returned as BGR)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}", offset=0)
    channels = 1 if magic == b"P5" else 3
    tokens, pos = _header_tokens(data, 3, 2)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"non-numeric netpbm header field: {exc}", offset=2) from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"invalid image size {w}x{h}", offset=2)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=2)
    expected = pos + w * h * channels
    if len(data) != expected:
        raise FormatError(
            f"netpbm raster length mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
        )
    raster = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w, channels)
    img = raster.transpose(2, 0, 1)
    if channels == 3:
        img = img[::-1]
    return (img.astype(np.float64) / 255.0).astype(ENGINE_DTYPE)


# ---------------------------------------------------------------------------
# key=value files
# ---------------------------------------------------------------------------

def parse_key_values(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def dump_key_values(values: Mapping[str, Any] | BaseModel) -> str:
    if isinstance(values, BaseModel):
        values = values.model_dump(by_alias=True)
    return "".join(f"{k}={_format_value(v)}\n" for k, v in values.items())


def load_game_config(path: Path | str, **overrides: Any) -> GameConfig:
    """Run config file (keys mirror GameConfig fields); empty values mean unset."""
    raw = parse_key_values(Path(path).read_text(encoding="utf-8"))
    # one spelling per field, so an override always replaces the file value
    canonical = {"lambda_": "lambda"}
    fields = {canonical.get(k, k): v for k, v in raw.items() if v != ""}
    fields.update({canonical.get(k, k): v for k, v in overrides.items() if v is not None})
    return GameConfig.model_validate(fields)
