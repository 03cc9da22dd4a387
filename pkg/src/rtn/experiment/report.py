"""Where along the centerline kept and discarded instances sit.

Episodes are split by whether the final prediction was right, and each
instance index is counted as either reserved (survived) or discarded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..prid import Episode, EpisodeRecord, parse_episode_line

STRATA = (
    ("correct", "reserved"),
    ("correct", "discarded"),
    ("incorrect", "reserved"),
    ("incorrect", "discarded"),
)


@dataclass
class IndexDistribution:
    n: int
    counts: dict[tuple[str, str], np.ndarray]
    episodes: dict[str, int]

    def frequencies(self, stratum: tuple[str, str]) -> np.ndarray | None:
        """Per-index share of the stratum's total count; None when it is empty."""
        c = self.counts[stratum]
        total = c.sum()
        return None if total == 0 else c / total

    def render(self, width: int = 40) -> str:
        out = []
        for stratum in STRATA:
            outcome, fate = stratum
            out.append(f"[{outcome} / {fate}] episodes={self.episodes[outcome]}")
            freq = self.frequencies(stratum)
            if freq is None:
                out.append("  (empty stratum: no episodes)")
                continue
            peak = freq.max()
            for i, f in enumerate(freq):
                bar = "#" * int(round(width * f / peak)) if peak > 0 else ""
                out.append(f"  {i:3d} {f:6.3f} {bar}")
        return "\n".join(out)


def _as_record(ep: Episode | EpisodeRecord) -> EpisodeRecord:
    if isinstance(ep, EpisodeRecord):
        return ep
    return EpisodeRecord(ep.bag_id, ep.label, ep.discarded, ep.rewards, ep.prediction, ep.n)


def index_distribution(episodes: Iterable[Episode | EpisodeRecord], n: int | None = None) -> IndexDistribution:
    records = [_as_record(e) for e in episodes]
    if n is None:
        sizes = {r.n for r in records if r.n is not None}
        if len(sizes) > 1:
            raise ValueError(f"episodes disagree on bag size: {sorted(sizes)}")
        if not sizes:
            raise ValueError("bag size unknown: pass n or use episode lines that carry n=")
        n = sizes.pop()
    counts = {s: np.zeros(n, dtype=np.int64) for s in STRATA}
    episodes = {"correct": 0, "incorrect": 0}
    for r in records:
        outcome = "correct" if r.correct else "incorrect"
        episodes[outcome] += 1
        discarded = np.zeros(n, dtype=bool)
        if any(not 0 <= a < n for a in r.actions):
            raise ValueError(f"bag {r.bag_id}: action index outside 0..{n - 1}")
        discarded[r.actions] = True
        counts[(outcome, "discarded")] += discarded
        counts[(outcome, "reserved")] += ~discarded
    return IndexDistribution(n, counts, episodes)


def read_episode_log(lines: Sequence[str]) -> list[EpisodeRecord]:
    return [parse_episode_line(line) for line in lines if line.strip()]
