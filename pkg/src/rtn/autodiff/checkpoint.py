"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"RTNC" | version u32 | count u32 |
    count * (name_len u32 | name utf-8 | rank u8 | extents u32*rank | dtype u8 | raw data)

dtype code 0 is float32, 1 is float64.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"RTNC"
VERSION = 1

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised when a binary file has the wrong magic, version or structure."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(buf)})")
    return buf


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise ValueError(f"cannot serialise dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", DTYPE_CODES[dt]))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    (code,) = struct.unpack("<B", _read_exact(fh, 1))
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, arr in state.items():
        write_str(buf, name)
        write_array(buf, arr)
    return buf.getvalue()


def loads_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
    fh = io.BytesIO(payload)
    if fh.read(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        name = read_str(fh)
        if name in state:
            raise FormatError(f"duplicate parameter name {name!r}")
        state[name] = read_array(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after last parameter")
    return state


def save_checkpoint(path: str | os.PathLike, state: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps_checkpoint(state))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
