"""On-disk formats: binary matrix files and CSV exports.

A matrix file is the 4-byte magic ``RGR1``, the row and column counts as
little-endian u64, then the entries as little-endian float64 in row-major
order.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidData

MAGIC = b"RGR1"
_HEADER = struct.Struct("<4sQQ")


def write_matrix(path, a) -> None:
    a = np.asarray(a, dtype="<f8")
    if a.ndim != 2:
        raise InvalidData(f"matrix files hold 2-D arrays, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidData(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidData(f"{path}: bad magic {magic!r}")
    need = 8 * rows * cols
    payload = len(data) - _HEADER.size
    if payload != need:
        raise InvalidData(f"{path}: payload has {payload} bytes, expected {need}")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)


def format_csv(a) -> str:
    """Rows of comma-separated values with 17 significant digits."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return ""
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(a), fmt="%.17g", delimiter=",")
    return buf.getvalue()


def parse_csv(text: str) -> np.ndarray:
    rows = [[float(v) for v in r] for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=np.float64)


def write_table(path, header, columns) -> None:
    """Write equally long columns as a CSV table with a header row."""
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v
