"""Bag archive (``RTNB``) and the human-readable manifest written beside it.

Layout (integers little-endian)::

    b"RTNB" | version u32 | bag_count u32 |
    bag_count * (id_len u32 | id utf-8 | label u8 | n u16 | mask u8*n | n * tensor)

Each tensor uses the checkpoint tensor layout: rank u8, extents u32*rank,
dtype code u8, raw data.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..autodiff.checkpoint import FormatError, atomic_write_bytes, read_array, read_str, write_array, write_str
from .cubes import Bag

MAGIC = b"RTNB"
VERSION = 1


def dumps_bags(bags: Iterable[Bag]) -> bytes:
    bags = list(bags)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(bags)))
    for bag in bags:
        write_str(buf, bag.id)
        buf.write(struct.pack("<BH", bag.label, bag.n))
        buf.write(np.asarray(bag.informative, dtype=np.uint8).tobytes())
        for cube in bag.cubes:
            write_array(buf, cube)
    return buf.getvalue()


def loads_bags(payload: bytes) -> list[Bag]:
    fh = io.BytesIO(payload)
    if fh.read(4) != MAGIC:
        raise FormatError("not a bag archive (bad magic)")
    try:
        version, count = struct.unpack("<II", fh.read(8))
    except struct.error:
        raise FormatError("truncated bag archive header") from None
    if version != VERSION:
        raise FormatError(f"unsupported bag archive version {version}")
    bags = []
    for _ in range(count):
        bag_id = read_str(fh)
        header = fh.read(3)
        if len(header) != 3:
            raise FormatError("truncated bag record")
        label, n = struct.unpack("<BH", header)
        mask_raw = fh.read(n)
        if len(mask_raw) != n:
            raise FormatError("truncated informative mask")
        mask = np.frombuffer(mask_raw, dtype=np.uint8)
        if np.any(mask > 1):
            raise FormatError("informative mask must be 0/1")
        cubes = [read_array(fh) for _ in range(n)]
        if len({c.shape for c in cubes}) > 1:
            raise FormatError(f"bag {bag_id}: cubes have differing shapes")
        bags.append(Bag(bag_id, label, np.stack(cubes), informative=mask.astype(bool)))
    if fh.read(1):
        raise FormatError("trailing bytes after last bag")
    return bags


def manifest_lines(bags: Iterable[Bag]) -> list[str]:
    lines = []
    for bag in bags:
        line = f"id={bag.id} label={bag.label} n={bag.n}"
        if bag.has_duplicate_centers():
            line += " duplicate_centers=1"
        lines.append(line)
    return lines


def save_bags(path: str | os.PathLike, bags: Iterable[Bag], manifest: bool = True) -> None:
    """Write the archive atomically, plus ``<path>.manifest`` unless disabled."""
    bags = list(bags)
    atomic_write_bytes(path, dumps_bags(bags))
    if manifest:
        text = "\n".join(manifest_lines(bags)) + "\n"
        atomic_write_bytes(f"{os.fspath(path)}.manifest", text.encode("utf-8"))


def load_bags(path: str | os.PathLike) -> list[Bag]:
    return loads_bags(Path(path).read_bytes())
