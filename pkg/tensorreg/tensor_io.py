"""
Tensor files
============

DTEN1 binary layout (all little-endian):

    b"DTEN" | u8 version = 1 | u8 element type (0 = float64) | u32 order p
    | p x u64 dims | prod(dims) float64 values, first mode fastest

CSV import/export covers tensors of order <= 2. Numeric tables are written with
a header row and 17 significant digits so they round-trip exactly.
"""

import csv
import logging
import struct
from pathlib import Path

import numpy as np

from tensorreg.errors import TensorFileError
from tensorreg.tensor_core import DenseTensor

logger = logging.getLogger(__name__)

MAGIC = b"DTEN"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f8")}
HEADER = struct.Struct("<4sBBI")

CSV_FLOAT = "{:.17g}"


def write_tensor(path, tensor):
    """Write a tensor (DenseTensor or ndarray) as a DTEN1 file."""
    t = tensor if isinstance(tensor, DenseTensor) else DenseTensor(tensor)
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(HEADER.pack(MAGIC, VERSION, 0, t.order))
            f.write(struct.pack(f"<{t.order}Q", *t.dims))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    except OSError as exc:
        raise TensorFileError(f"cannot write {path}: {exc}") from exc


def read_tensor(path) -> DenseTensor:
    """Read a DTEN1 file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc}") from exc

    if len(raw) < HEADER.size or raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a DTEN1 file (bad magic bytes, expected 'DTEN')")
    _, version, code, order = HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported DTEN version {version}")
    if code not in DTYPE_CODES:
        raise TensorFileError(f"{path}: unsupported DTEN element type {code}")

    offset = HEADER.size
    if len(raw) < offset + 8 * order:
        raise TensorFileError(f"{path}: truncated DTEN header")
    dims = struct.unpack_from(f"<{order}Q", raw, offset)
    offset += 8 * order
    count = int(np.prod(dims)) if order else 1
    if any(d < 1 for d in dims):
        raise TensorFileError(f"{path}: DTEN dims must be positive, got {dims}")
    if len(raw) != offset + 8 * count:
        raise TensorFileError(
            f"{path}: DTEN payload holds {(len(raw) - offset) // 8} values, dims {dims} need {count}"
        )
    data = np.frombuffer(raw, dtype=DTYPE_CODES[code], count=count, offset=offset)
    return DenseTensor(data.astype(np.float64), dims)


def write_csv_tensor(path, tensor):
    """Write an order <= 2 tensor as a headerless CSV matrix."""
    t = tensor if isinstance(tensor, DenseTensor) else DenseTensor(tensor)
    if t.order > 2:
        raise TensorFileError(f"CSV export supports order <= 2, got order {t.order}")
    mat = np.atleast_2d(t.array) if t.order < 2 else t.array
    if t.order == 1:
        mat = mat.T
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for row in mat:
                writer.writerow([CSV_FLOAT.format(v) for v in row])
    except OSError as exc:
        raise TensorFileError(f"cannot write {path}: {exc}") from exc


def read_csv_tensor(path) -> DenseTensor:
    """Read a headerless numeric CSV matrix; a single column becomes a vector."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows = [row for row in csv.reader(f) if row]
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise TensorFileError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise TensorFileError(f"{path}: ragged CSV rows")
    try:
        mat = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise TensorFileError(f"{path}: non-numeric CSV entry ({exc})") from exc
    if width == 1:
        return DenseTensor(mat[:, 0])
    return DenseTensor(mat)


def load_tensor(path) -> DenseTensor:
    """Dispatch on suffix: .csv goes through the CSV reader, anything else is DTEN1."""
    if str(path).lower().endswith(".csv"):
        return read_csv_tensor(path)
    return read_tensor(path)


def write_table(path, header, rows):
    """Write a CSV table; floats get 17 significant digits."""

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return CSV_FLOAT.format(float(v))
        if isinstance(v, (tuple, list)):
            return " ".join(str(x) for x in v)
        return str(v)

    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise TensorFileError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote %d rows to %s", len(rows), path)


def read_table(path):
    """Read a CSV table written by `write_table` -> (header, rows of strings)."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise TensorFileError(f"{path}: empty table")
    return rows[0], rows[1:]
