from __future__ import annotations

from typing import Sequence, TypeVar

import numpy as np

T = TypeVar("T")


def kfold_split(items: Sequence[T], k: int, seed: int) -> list[tuple[list[T], list[T]]]:
    """Shuffle ``items`` with ``seed`` and cut them into ``k`` (train, test) folds.

    Fold sizes differ by at most one and every item lands in exactly one test fold.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(items) < k:
        raise ValueError(f"cannot split {len(items)} items into {k} folds")
    order = np.random.default_rng(seed).permutation(len(items))
    chunks = np.array_split(order, k)
    folds = []
    for i, test_idx in enumerate(chunks):
        train_idx = np.concatenate([c for j, c in enumerate(chunks) if j != i])
        folds.append(([items[j] for j in sorted(train_idx)], [items[j] for j in sorted(test_idx)]))
    return folds
