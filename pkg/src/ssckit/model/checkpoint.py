"""Versioned binary parameter checkpoints and loss-curve CSV files.

Layout (little endian): magic ``SSCK``, u32 version, u32 tensor count, then per
tensor: u16 name length, utf-8 name, u8 ndim, ndim x u64 dims, float64 data.
Tensors are written in sorted name order so the bytes depend only on content.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from ..formats import FormatError

MAGIC = b"SSCK"
VERSION = 1


def save_checkpoint(params: dict, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after the last tensor")
    return params


CSV_COLUMNS = ("step", "l_cd", "l_ce", "total")


def write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in curve:
            w.writerow([r.step, repr(float(r.l_cd)), repr(float(r.l_ce)), repr(float(r.total))])


def read_loss_csv(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise FormatError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
    return [(int(s), float(a), float(b), float(c)) for s, a, b, c in rows[1:]]
