"""Binary tensor records (DTNS) and checkpoint containers (DFCLIP01).

Tensor record::

    b"DTNS" | u8 version=1 | u8 rank | rank x u32 LE extents | float64 LE data

Checkpoint::

    b"DFCLIP01" | u32 LE entry count | per entry: u16 LE name length, UTF-8 name, tensor record

Text metadata travels as an ordinary entry whose tensor holds the UTF-8 bytes
of a flat ``key=value`` document, one byte per element.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"DTNS"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"DFCLIP01"
META_ENTRY = "__config__"


class FormatError(ValueError):
    pass


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def write_tensor_record(fh: BinaryIO, t) -> None:
    arr = _as_array(t)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", TENSOR_VERSION, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_record(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor_record(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor_record(io.BytesIO(raw))


def save_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor_record(fh)


def encode_meta(meta: Mapping[str, object]) -> np.ndarray:
    text = "".join(f"{k}={v}\n" for k, v in meta.items())
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_meta(arr: np.ndarray) -> dict[str, str]:
    text = bytes(arr.astype(np.uint8).tolist()).decode("utf-8")
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def write_checkpoint(path, entries: Mapping[str, object], meta: Mapping[str, object] | None = None) -> None:
    """Write entries (name -> Tensor/array) atomically, metadata first."""
    items = []
    if meta is not None:
        items.append((META_ENTRY, encode_meta(meta)))
    items.extend(entries.items())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor_record(buf, t)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a DFCLIP01 checkpoint")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries: dict[str, np.ndarray] = {}
        meta: dict[str, str] = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode("utf-8")
            arr = read_tensor_record(fh)
            if name == META_ENTRY:
                meta = decode_meta(arr)
            else:
                entries[name] = arr
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} entries")
    return entries, meta
