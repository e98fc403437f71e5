"""Little-endian binary sidecar formats.

Three layouts share one framing (4-byte magic, u32 version):

* ``GGFM`` feature matrix: u64 n, u64 d, then n*d float32 row-major.
* ``GGVI`` vector index: u64 n, u64 d, n length-prefixed (u32) UTF-8 row
  ids, then n*d float32 row-major.
* ``GGTS`` named-tensor table: u32 count, then per tensor a length-prefixed
  name, u8 dtype code (0=float32, 1=float64), u32 ndim, u64 dims, and the
  raw data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from groundgen.errors import DataError

VERSION = 1
MATRIX_MAGIC = b"GGFM"
INDEX_MAGIC = b"GGVI"
TENSOR_MAGIC = b"GGTS"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated binary file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_header(fh: BinaryIO, magic: bytes) -> None:
    got = _read_exact(fh, 4)
    if got != magic:
        raise DataError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != VERSION:
        raise DataError(f"unsupported format version {version}")


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def _read_floats(fh: BinaryIO, count: int, dtype: np.dtype) -> np.ndarray:
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + struct.pack("<IQQ", VERSION, *mat.shape))
        fh.write(mat.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        _read_header(fh, MATRIX_MAGIC)
        n, d = struct.unpack("<QQ", _read_exact(fh, 16))
        return _read_floats(fh, n * d, _DTYPES[0]).reshape(n, d)


def write_index(path: str | Path, row_ids: list[str], matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.shape[0] != len(row_ids):
        raise ValueError("row_ids and matrix rows disagree")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<IQQ", VERSION, *mat.shape))
        for rid in row_ids:
            _write_str(fh, rid)
        fh.write(mat.tobytes())


def read_index(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        _read_header(fh, INDEX_MAGIC)
        n, d = struct.unpack("<QQ", _read_exact(fh, 16))
        row_ids = [_read_str(fh) for _ in range(n)]
        mat = _read_floats(fh, n * d, _DTYPES[0]).reshape(n, d)
    return row_ids, mat


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            code = _CODES.get(arr.dtype)
            if code is None:
                arr = arr.astype(np.float64)
                code = 1
            _write_str(fh, name)
            fh.write(struct.pack("<BI", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _read_header(fh, TENSOR_MAGIC)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            name = _read_str(fh)
            code, ndim = struct.unpack("<BI", _read_exact(fh, 5))
            if code not in _DTYPES:
                raise DataError(f"tensor {name!r}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            count_el = int(np.prod(shape)) if ndim else 1
            out[name] = _read_floats(fh, count_el, _DTYPES[code]).reshape(shape)
    return out
