"""Binary array formats.

BGRM: ``b"BGRM"``, uint32 LE rows, uint32 LE cols, 4 zero bytes, then
rows*cols float64 LE, row-major.

BGRP: ``b"BGRP"``, uint32 LE height, uint32 LE width, then height*width uint32
LE segment ids; the segment table lives in a ``<file>.json`` sidecar.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

BGRM_MAGIC = b"BGRM"
BGRP_MAGIC = b"BGRP"
_BGRM_HEADER = struct.Struct("<4sII4s")
_BGRP_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_bgrm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim != 2:
        raise FormatError(f"BGRM holds 2-D matrices, got shape {arr.shape}")
    rows, cols = arr.shape
    return _BGRM_HEADER.pack(BGRM_MAGIC, rows, cols, b"\0\0\0\0") + np.ascontiguousarray(arr).tobytes()


def decode_bgrm(buf: bytes) -> np.ndarray:
    if len(buf) < _BGRM_HEADER.size:
        raise FormatError(f"BGRM: file is {len(buf)} bytes, header needs {_BGRM_HEADER.size}")
    magic, rows, cols, pad = _BGRM_HEADER.unpack_from(buf, 0)
    if magic != BGRM_MAGIC:
        raise FormatError(f"BGRM: bad magic {magic!r} at byte offset 0")
    if pad != b"\0\0\0\0":
        raise FormatError("BGRM: nonzero padding at byte offset 12")
    expected = _BGRM_HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise FormatError(
            f"BGRM: {rows}x{cols} payload needs {expected} bytes, file has {len(buf)} "
            f"(mismatch from byte offset {min(len(buf), expected)})"
        )
    return np.frombuffer(buf, dtype="<f8", offset=_BGRM_HEADER.size).reshape(rows, cols).astype(np.float64)


def write_bgrm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_bgrm(arr))


def read_bgrm(path) -> np.ndarray:
    return decode_bgrm(Path(path).read_bytes())


def write_chw(path, values: np.ndarray) -> None:
    """Write a C x H x W array as a C x (H*W) BGRM plus its layout sidecar."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise FormatError(f"CHW array expected, got shape {values.shape}")
    c, h, w = values.shape
    write_bgrm(path, values.reshape(c, h * w))
    meta = {"layout": "CHW", "channels": c, "height": h, "width": w}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True))


def read_chw(path) -> np.ndarray:
    arr = read_bgrm(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError as e:
        raise FormatError(f"missing layout sidecar {sidecar_path(path)}") from e
    if meta.get("layout") != "CHW":
        raise FormatError(f"unsupported layout {meta.get('layout')!r}")
    c, h, w = meta["channels"], meta["height"], meta["width"]
    if arr.shape != (c, h * w):
        raise FormatError(f"sidecar says {c}x{h}x{w} but matrix is {arr.shape[0]}x{arr.shape[1]}")
    return arr.reshape(c, h, w)


def encode_bgrp(raster: np.ndarray) -> bytes:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise FormatError(f"BGRP holds a 2-D raster, got shape {raster.shape}")
    h, w = raster.shape
    return _BGRP_HEADER.pack(BGRP_MAGIC, h, w) + np.ascontiguousarray(raster, dtype="<u4").tobytes()


def decode_bgrp(buf: bytes) -> np.ndarray:
    if len(buf) < _BGRP_HEADER.size:
        raise FormatError(f"BGRP: file is {len(buf)} bytes, header needs {_BGRP_HEADER.size}")
    magic, h, w = _BGRP_HEADER.unpack_from(buf, 0)
    if magic != BGRP_MAGIC:
        raise FormatError(f"BGRP: bad magic {magic!r} at byte offset 0")
    expected = _BGRP_HEADER.size + 4 * h * w
    if len(buf) != expected:
        raise FormatError(
            f"BGRP: {h}x{w} raster needs {expected} bytes, file has {len(buf)} "
            f"(mismatch from byte offset {min(len(buf), expected)})"
        )
    return np.frombuffer(buf, dtype="<u4", offset=_BGRP_HEADER.size).reshape(h, w).astype(np.uint32)
