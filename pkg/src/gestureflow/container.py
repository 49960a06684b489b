"""Shared binary formats: the repo-wide tensor container and checkpoints.

Tensor container layout (little-endian throughout)::

    magic "GLSM" | format version u16 | rank u8 | extents u32[rank]
    | dtype tag u8 (0 = f32, 1 = f64) | raw payload

Checkpoints bundle named tensors behind a JSON manifest::

    magic "GLSM" | version u16 | manifest length u32 | manifest JSON (utf-8)
    | tensor containers at the manifest's relative offsets

The manifest carries ``format_version``, a ``config`` echo, and a
``tensors`` map of name -> offset (relative to the blob section start).
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

__all__ = [
    "FORMAT_VERSION",
    "FormatError",
    "write_tensor",
    "read_tensor",
    "tensor_bytes",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"GLSM"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Corrupt, truncated, or wrong-version container data."""


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; containers hold f32/f64 only")
    if arr.ndim > 255:
        raise FormatError("rank exceeds u8")
    stream.write(MAGIC)
    stream.write(struct.pack("<H", FORMAT_VERSION))
    stream.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        stream.write(struct.pack("<I", extent))
    stream.write(struct.pack("<B", tag))
    stream.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated container: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}: not a GLSM container or version mismatch")
    (version,) = struct.unpack("<H", _read_exact(stream, 2))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    (rank,) = struct.unpack("<B", _read_exact(stream, 1))
    shape = tuple(struct.unpack("<I", _read_exact(stream, 4))[0] for _ in range(rank))
    (tag,) = struct.unpack("<B", _read_exact(stream, 1))
    dtype = _TAG_DTYPES.get(tag)
    if dtype is None:
        raise FormatError(f"unknown dtype tag {tag}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(stream, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write named tensors plus a config echo behind a JSON manifest."""
    blobs: dict[str, bytes] = {}
    offsets: dict[str, int] = {}
    pos = 0
    for name in sorted(tensors):
        b = tensor_bytes(tensors[name])
        blobs[name] = b
        offsets[name] = pos
        pos += len(b)
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config, "tensors": offsets},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for name in sorted(blobs):
            fh.write(blobs[name])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4))
        manifest = json.loads(_read_exact(fh, mlen).decode("utf-8"))
        blob_start = fh.tell()
        tensors: dict[str, np.ndarray] = {}
        for name, offset in manifest["tensors"].items():
            fh.seek(blob_start + offset)
            tensors[name] = read_tensor(fh)
    return tensors, manifest.get("config", {})
