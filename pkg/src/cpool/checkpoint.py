"""Binary checkpoint and dataset dump files.

Layout (little-endian throughout)::

    magic            10 bytes  b"CPOOLCKPT1" or b"CPOOLDATA1"
    meta_len         uint32
    meta             utf-8 key=value lines
    n_records        uint32
    n_records x record:
        name_len     uint32
        name         utf-8
        extents      4 x uint32
        values       float64 x prod(extents)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

CKPT_MAGIC = b"CPOOLCKPT1"
DATA_MAGIC = b"CPOOLDATA1"


class CheckpointError(Exception):
    pass


def format_meta(meta: dict) -> str:
    return "".join(f"{k}={meta[k]}\n" for k in sorted(meta))


def parse_meta(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"bad meta line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_records(f: BinaryIO, records: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 4:
            raise CheckpointError(f"record {name!r} must have 4 extents, got {arr.shape}")
        enc = name.encode()
        f.write(struct.pack("<I", len(enc)))
        f.write(enc)
        f.write(struct.pack("<4I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_records(buf: memoryview, offset: int) -> tuple[dict[str, np.ndarray], int]:
    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise CheckpointError("truncated record stream")
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        shape = struct.unpack("<4I", take(16))
        n = int(np.prod(shape))
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
    return out, offset


def _save(path, magic: bytes, meta: dict, records: dict[str, np.ndarray]) -> None:
    meta_bytes = format_meta(meta).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        write_records(f, records)


def _load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    if raw[: len(magic)] != magic:
        raise CheckpointError(f"{path}: not a {magic.decode()} file")
    buf = memoryview(raw)
    off = len(magic)
    if off + 4 > len(buf):
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<I", buf[off : off + 4])
    off += 4
    meta = parse_meta(bytes(buf[off : off + mlen]).decode())
    records, off = read_records(buf, off + mlen)
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return meta, records


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    _save(path, CKPT_MAGIC, meta, tensors)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return _load(path, CKPT_MAGIC)


def save_dataset(path, meta: dict, images: np.ndarray, targets: np.ndarray) -> None:
    _save(path, DATA_MAGIC, meta, {"images": images, "targets": targets})


def load_dataset(path) -> tuple[dict, np.ndarray, np.ndarray]:
    meta, rec = _load(path, DATA_MAGIC)
    try:
        return meta, rec["images"], rec["targets"]
    except KeyError as e:
        raise CheckpointError(f"{path}: missing record {e}") from None
