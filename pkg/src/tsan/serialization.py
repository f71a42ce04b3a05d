"""Binary container for named float64 arrays ("TSNW" files).

Layout: 4 magic bytes ``TSNW``, a little-endian u32 format version, an
optional version-specific header, then repeated records:

    name length (u32 LE) | UTF-8 name | rank (u32 LE) | dims (u32 LE each)
    | float64 LE values, row-major

Version 1 carries model weights (no extra header). Version 2 carries sorter
weights and inserts two u32 header fields (sequence length, hidden width)
before the records. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"TSNW"
MODEL_VERSION = 1
SORTER_VERSION = 2


def _write_u32(f, value: int):
    f.write(struct.pack("<I", value))


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated TSNW file")
    return struct.unpack("<I", raw)[0]


def _write_records(f, arrays: dict[str, np.ndarray]):
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        _write_u32(f, len(encoded))
        f.write(encoded)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _write_u32(f, arr.ndim)
        for d in arr.shape:
            _write_u32(f, d)
        f.write(arr.astype("<f8").tobytes())


def _read_records(f) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    while True:
        head = f.read(4)
        if len(head) == 0:
            return arrays
        if len(head) != 4:
            raise FormatError("truncated TSNW record header")
        (name_len,) = struct.unpack("<I", head)
        name_raw = f.read(name_len)
        if len(name_raw) != name_len:
            raise FormatError("truncated TSNW record name")
        name = name_raw.decode("utf-8")
        rank = _read_u32(f)
        shape = tuple(_read_u32(f) for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = f.read(8 * count)
        if len(raw) != 8 * count:
            raise FormatError(f"truncated data for record {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def write_weights(path, arrays: dict[str, np.ndarray], version: int = MODEL_VERSION,
                  header: tuple[int, ...] = ()):
    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_u32(f, version)
        for value in header:
            _write_u32(f, value)
        _write_records(f, arrays)


def read_weights(path, expect_version: int = MODEL_VERSION,
                 header_fields: int = 0) -> tuple[dict[str, np.ndarray], tuple[int, ...]]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version = _read_u32(f)
        if version != expect_version:
            raise FormatError(f"{path}: format version {version}, expected {expect_version}")
        header = tuple(_read_u32(f) for _ in range(header_fields))
        return _read_records(f), header
