"""Synthetic planted-signal bags that stand in for clinical vessel data.

Each bag holds ``num_informative`` cubes whose content encodes the label and
``n - num_informative`` negative cubes of three kinds: pure background, a
vessel too faint to identify, and a vessel carrying the opposite label's
pattern. Label 1 draws a clean tube; label 0 draws the same tube with streak
and ghosting artifacts on top (each cube independently, with probability
``artifact_probability``), which also raises mean intensity.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import asdict, dataclass, field

import numpy as np

from .cubes import Bag


class InstanceKind(enum.IntEnum):
    INFORMATIVE = 0
    BACKGROUND = 1
    LOW_CONTRAST = 2
    MISMATCHED = 3


NEGATIVE_KINDS = (InstanceKind.BACKGROUND, InstanceKind.LOW_CONTRAST, InstanceKind.MISMATCHED)


@dataclass
class SignalPatterns:
    background: float = 0.1
    tube_intensity: float = 0.7
    tube_sigma: float = 1.5
    low_contrast_intensity: float = 0.08
    low_contrast_noise_scale: float = 2.0
    streak_amplitude: float = 0.4
    streak_period: int = 4
    ghost_intensity: float = 0.35
    ghost_shift: int = 3
    # Chance that a label-0 vessel cube actually shows the artifacts; below 1
    # a single cube is weak evidence and confidence grows with more of them.
    artifact_probability: float = 0.5


@dataclass
class SyntheticSpec:
    n: int = 19
    cube_size: int = 20
    num_informative: int = 5
    noise_level: float = 0.05
    num_bags: int = 210
    positive_fraction: float = 114 / 210
    # "segment": informative cubes form a contiguous run near segment_center;
    # "scatter": informative positions are uniformly random.
    layout: str = "segment"
    segment_center: int | None = None
    segment_jitter: int = 2
    # Relative frequency of (background, low-contrast, mismatched) negatives.
    negative_mix: tuple[float, float, float] = (0.5, 0.45, 0.05)
    signal_patterns: SignalPatterns = field(default_factory=SignalPatterns)
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1 or self.cube_size < 1 or self.num_bags < 1:
            raise ValueError("n, cube_size and num_bags must be positive")
        if not 1 <= self.num_informative <= self.n:
            raise ValueError(f"num_informative must be in [1, n], got {self.num_informative}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in [0, 1]")
        if self.layout not in ("segment", "scatter"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not 0.0 <= self.signal_patterns.artifact_probability <= 1.0:
            raise ValueError("artifact_probability must be in [0, 1]")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        mix = np.asarray(self.negative_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or mix.sum() <= 0:
            raise ValueError(f"negative_mix must be three nonnegative weights, got {self.negative_mix}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    bags: list[Bag]
    spec: SyntheticSpec

    def masks(self) -> np.ndarray:
        return np.stack([b.informative for b in self.bags])


@functools.lru_cache(maxsize=8)
def _grid(size: int) -> np.ndarray:
    grid = np.stack(np.meshgrid(*(np.arange(size),) * 3, indexing="ij"), axis=-1).astype(float)
    grid.flags.writeable = False
    return grid


def _tube_profile(size: int, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Gaussian cross-section of a straight tube through (near) the cube centre."""
    axis = rng.integers(0, 3)
    direction = np.zeros(3)
    direction[axis] = 1.0
    direction += rng.normal(0.0, 0.15, size=3)
    direction /= np.linalg.norm(direction)
    origin = np.full(3, size // 2, dtype=float) + rng.uniform(-1.0, 1.0, size=3)
    rel = _grid(size) - origin
    along = rel @ direction
    radial2 = (rel * rel).sum(-1) - along * along
    return np.exp(-radial2 / (2.0 * sigma * sigma)), axis


def _pattern(label: int, size: int, rng: np.random.Generator, p: SignalPatterns) -> np.ndarray:
    profile, axis = _tube_profile(size, rng, p.tube_sigma)
    vol = p.tube_intensity * profile
    if label == 0 and rng.random() < p.artifact_probability:
        # Streak planes perpendicular to a random axis plus a displaced ghost copy.
        streak_axis = rng.integers(0, 3)
        phase = rng.integers(0, p.streak_period)
        coords = np.arange(size)
        planes = ((coords + phase) % p.streak_period == 0).astype(float)
        shape = [1, 1, 1]
        shape[streak_axis] = size
        vol = vol + p.streak_amplitude * planes.reshape(shape)
        ghost_axis = (axis + 1 + rng.integers(0, 2)) % 3
        vol = vol + p.ghost_intensity * np.roll(profile, p.ghost_shift, axis=ghost_axis)
    return vol


def _render(kind: InstanceKind, label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    p = spec.signal_patterns
    size = spec.cube_size
    noise = spec.noise_level
    if kind == InstanceKind.INFORMATIVE:
        body = _pattern(label, size, rng, p)
    elif kind == InstanceKind.MISMATCHED:
        body = _pattern(1 - label, size, rng, p)
    elif kind == InstanceKind.LOW_CONTRAST:
        profile, _ = _tube_profile(size, rng, p.tube_sigma)
        body = p.low_contrast_intensity * profile
        noise = noise * p.low_contrast_noise_scale
    else:
        body = 0.0
    vol = p.background + body + rng.normal(0.0, noise, size=(size,) * 3)
    return np.clip(vol, 0.0, 1.0)


def _informative_positions(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n, k = spec.n, spec.num_informative
    if spec.layout == "scatter" or k == n:
        return np.sort(rng.choice(n, size=k, replace=False))
    center = spec.segment_center if spec.segment_center is not None else n // 2
    start = center - k // 2 + rng.integers(-spec.segment_jitter, spec.segment_jitter + 1)
    start = int(np.clip(start, 0, n - k))
    return np.arange(start, start + k)


def generate_bag(index: int, label: int, spec: SyntheticSpec, rng: np.random.Generator) -> Bag:
    kinds = np.empty(spec.n, dtype=np.int8)
    informative = np.zeros(spec.n, dtype=bool)
    informative[_informative_positions(spec, rng)] = True
    kinds[informative] = InstanceKind.INFORMATIVE
    n_neg = int((~informative).sum())
    mix = np.asarray(spec.negative_mix, dtype=float)
    kinds[~informative] = rng.choice(np.array(NEGATIVE_KINDS, dtype=np.int8), size=n_neg, p=mix / mix.sum())
    cubes = np.stack([_render(InstanceKind(k), label, spec, rng) for k in kinds])
    return Bag(
        id=f"bag-{index:04d}",
        label=label,
        cubes=cubes[:, None].astype(np.float32),
        informative=informative,
        kinds=kinds,
    )


def generate_synthetic_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate ``spec.num_bags`` bags; a pure function of ``spec`` (seed included).

    Exactly ``round(positive_fraction * num_bags)`` bags get label 1. Bag ``i``
    draws from its own child of ``SeedSequence(seed)``, so bags can be
    generated independently and in any order.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    label_ss, *bag_ss = root.spawn(spec.num_bags + 1)
    n_pos = int(round(spec.positive_fraction * spec.num_bags))
    labels = np.zeros(spec.num_bags, dtype=np.int64)
    labels[:n_pos] = 1
    np.random.default_rng(label_ss).shuffle(labels)
    bags = [
        generate_bag(i, int(labels[i]), spec, np.random.default_rng(ss))
        for i, ss in enumerate(bag_ss)
    ]
    return SyntheticDataset(bags, spec)


def mean_intensity_threshold_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Best accuracy of any single threshold (either polarity) on ``scores``.

    This is the oracle used to check that the planted signal is present:
    it only looks at one scalar per bag.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    total_pos = y.sum()
    best = max(total_pos, len(y) - total_pos)
    # Predict 1 above the cut (and the reverse polarity); cuts between distinct scores.
    pos_below = np.cumsum(y)
    for i in range(1, len(s)):
        if s[i] == s[i - 1]:
            continue
        below_neg = i - pos_below[i - 1]
        above_pos = total_pos - pos_below[i - 1]
        correct = below_neg + above_pos
        best = max(best, correct, len(y) - correct)
    return best / len(y)
