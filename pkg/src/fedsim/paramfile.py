"""FLPV binary parameter files.

Layout (little-endian): magic ``FLPV`` (4 bytes), format version u32 (=1),
parameter count u64, count float64 values, then the count repeated as a
trailing u64 so truncation is detectable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLPV"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_TRAILER = struct.Struct("<Q")


class ParamFileError(ValueError):
    """Malformed or inconsistent FLPV file."""


def write_params(path: str | Path, values: np.ndarray) -> None:
    """Write a flat float64 parameter vector to an FLPV file."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ParamFileError(f"parameter vector must be 1-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ParamFileError("refusing to write non-finite parameters")
    payload = v.astype("<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, v.size))
        fh.write(payload)
        fh.write(_TRAILER.pack(v.size))


def read_params(path: str | Path) -> np.ndarray:
    """Read and validate an FLPV file, returning the float64 vector."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParamFileError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParamFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ParamFileError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + 8 * count + _TRAILER.size
    if len(data) < expected:
        raise ParamFileError(
            f"{path}: truncated at byte {len(data)}, expected {expected}"
        )
    if len(data) > expected:
        raise ParamFileError(
            f"{path}: {len(data) - expected} trailing bytes after byte {expected}"
        )
    (trailer,) = _TRAILER.unpack_from(data, _HEADER.size + 8 * count)
    if trailer != count:
        raise ParamFileError(
            f"{path}: trailing count {trailer} does not match header count {count}"
        )
    values = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size)
    values = values.astype(np.float64)
    if not np.isfinite(values).all():
        raise ParamFileError(f"{path}: file contains non-finite values")
    return values
