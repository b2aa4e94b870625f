"""Matrix file formats: headerless CSV and the ``SLRM`` binary container."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLRM"
_HEADER = struct.Struct("<4sQQ")
# refuse anything that would not fit in memory on a desk machine
MAX_ENTRIES = 1 << 31


class MatrixFormatError(ValueError):
    pass


def _check(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 2:
        raise MatrixFormatError(f"expected a 2-D matrix, got {arr.ndim}-D")
    if not np.all(np.isfinite(arr)):
        raise MatrixFormatError("matrix has non-finite entries")
    return arr


def write_matrix_binary(path, mat) -> None:
    arr = _check(np.asarray(mat, dtype="<f8"))
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_matrix_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MatrixFormatError("file too short for header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}")
    if rows > MAX_ENTRIES or cols > MAX_ENTRIES or rows * cols > MAX_ENTRIES:
        raise MatrixFormatError(f"dimensions {rows}x{cols} overflow")
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise MatrixFormatError(f"payload is {len(raw) - _HEADER.size} bytes, expected {8 * rows * cols}")
    arr = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)
    return _check(arr)


def write_matrix_csv(path, mat) -> None:
    arr = _check(np.atleast_2d(np.asarray(mat, dtype=np.float64)))
    np.savetxt(path, arr, delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise MatrixFormatError(str(exc)) from exc
    return _check(arr)


def write_matrix(path, mat) -> None:
    """Dispatch on suffix: ``.csv`` is text, anything else is binary."""
    if str(path).endswith(".csv"):
        write_matrix_csv(path, mat)
    else:
        write_matrix_binary(path, mat)


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_matrix_binary(path)
    return read_matrix_csv(path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
