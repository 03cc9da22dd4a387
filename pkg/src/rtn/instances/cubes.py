"""Cropping instance cubes along a centerline, and centre-jitter augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# The six axis-aligned unit steps in (z, y, x).
NEIGHBOURS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)
MAX_JITTER = 3


@dataclass
class Volume:
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be 3-d with positive extents, got {self.voxels.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class Centerline:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    def validate(self, volume: Volume) -> None:
        if len(self.points) < 2:
            raise ValueError(f"centerline needs at least 2 points, got {len(self.points)}")
        ext = np.array(volume.extents)
        if np.any(self.points < 0) or np.any(self.points >= ext):
            raise ValueError("centerline point outside volume extents")


@dataclass
class Instance:
    cube: np.ndarray  # (1, d, h, w)
    center: tuple[int, int, int]
    index_on_centerline: int


def sample_positions(length: int, n: int) -> np.ndarray:
    """Index-uniform positions ``round(j * (length - 1) / (n - 1))``, halves rounded up."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.array([int(np.floor((length - 1) / 2 + 0.5))])
    j = np.arange(n)
    return np.floor(j * (length - 1) / (n - 1) + 0.5).astype(np.int64)


def extract_cube(voxels: np.ndarray, center, size: int) -> np.ndarray:
    """Cube of edge ``size`` whose voxel ``size // 2`` sits on ``center``; zero outside the volume."""
    out = np.zeros((size, size, size), dtype=voxels.dtype)
    lo = np.asarray(center, dtype=np.int64) - size // 2
    hi = lo + size
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, voxels.shape)
    if np.any(src_hi <= src_lo):
        return out
    dst_lo = src_lo - lo
    dst_hi = dst_lo + (src_hi - src_lo)
    out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = voxels[
        src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
    ]
    return out


def crop_cubes(volume: Volume, centerline: Centerline, n: int, size: int, centers=None) -> list[Instance]:
    """Crop ``n`` cubes at index-uniform positions along ``centerline``.

    ``centers`` overrides the sampled centres (used after jittering); it must
    have ``n`` rows.
    """
    if size < 1:
        raise ValueError("cube size must be >= 1")
    centerline.validate(volume)
    if centers is None:
        centers = centerline.points[sample_positions(len(centerline), n)]
    centers = np.asarray(centers, dtype=np.int64).reshape(n, 3)
    return [
        Instance(extract_cube(volume.voxels, c, size)[None], tuple(int(v) for v in c), i)
        for i, c in enumerate(centers)
    ]


def jitter_augment(centers, rng: np.random.Generator, extents=None) -> np.ndarray:
    """Move each centre 0..3 voxels along one of the six axis directions.

    Magnitude and direction are drawn uniformly and independently per centre.
    With ``extents`` given, results are clamped inside the volume.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    k = len(centers)
    magnitude = rng.integers(0, MAX_JITTER + 1, size=k)
    direction = rng.integers(0, len(NEIGHBOURS), size=k)
    moved = centers + NEIGHBOURS[direction] * magnitude[:, None]
    if extents is not None:
        moved = np.clip(moved, 0, np.asarray(extents) - 1)
    return moved


def shift_cube(cube: np.ndarray, offset) -> np.ndarray:
    """Content of ``cube`` re-centred ``offset`` voxels away, zero-filled.

    Equivalent to cropping around a moved centre when the surrounding volume
    is background.
    """
    out = np.zeros_like(cube)
    src = [slice(None)] * (cube.ndim - 3)
    dst = [slice(None)] * (cube.ndim - 3)
    for ax, off in enumerate(offset):
        extent = cube.shape[cube.ndim - 3 + ax]
        off = int(off)
        if abs(off) >= extent:
            return out
        if off >= 0:
            src.append(slice(off, extent))
            dst.append(slice(0, extent - off))
        else:
            src.append(slice(0, extent + off))
            dst.append(slice(-off, extent))
    out[tuple(dst)] = cube[tuple(src)]
    return out


def jitter_cubes(cubes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply centre jitter to a stack of cubes ``[k, C, d, h, w]``."""
    offsets = jitter_augment(np.zeros((len(cubes), 3), dtype=np.int64), rng)
    return np.stack([shift_cube(c, o) for c, o in zip(cubes, offsets)])


@dataclass
class Bag:
    """One vessel: ``n`` cubes in centerline order and its binary quality label."""

    id: str
    label: int
    cubes: np.ndarray  # (n, 1, s, s, s)
    informative: np.ndarray = field(default=None)  # bool (n,)
    kinds: np.ndarray | None = None  # synthetic only; see synthetic.InstanceKind
    centers: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        self.label = int(self.label)
        if self.cubes.ndim != 5:
            raise ValueError(f"cubes must be [n, C, d, h, w], got {self.cubes.shape}")
        if self.informative is None:
            self.informative = np.ones(len(self.cubes), dtype=bool)
        self.informative = np.asarray(self.informative, dtype=bool)

    @property
    def n(self) -> int:
        return len(self.cubes)

    @property
    def cube_size(self) -> int:
        return self.cubes.shape[-1]

    @property
    def instances(self) -> list[Instance]:
        centers = self.centers if self.centers is not None else np.zeros((self.n, 3), dtype=np.int64)
        return [Instance(self.cubes[i], tuple(int(v) for v in centers[i]), i) for i in range(self.n)]

    def has_duplicate_centers(self) -> bool:
        if self.centers is None:
            return False
        return len({tuple(c) for c in np.asarray(self.centers).tolist()}) < self.n


def bag_from_volume(
    bag_id: str,
    label: int,
    volume: Volume,
    centerline: Centerline,
    n: int,
    size: int,
    rng: np.random.Generator | None = None,
) -> Bag:
    """Crop a bag from a volume; with ``rng`` the sampled centres are jittered first."""
    centerline.validate(volume)
    centers = centerline.points[sample_positions(len(centerline), n)]
    if rng is not None:
        centers = jitter_augment(centers, rng, volume.extents)
    instances = crop_cubes(volume, centerline, n, size, centers=centers)
    cubes = np.stack([inst.cube for inst in instances]).astype(np.float32)
    return Bag(bag_id, label, cubes, centers=np.asarray(centers))
