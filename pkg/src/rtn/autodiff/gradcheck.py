"""Central finite-difference gradient checking.

The numerical side only ever evaluates forward passes, so it stays independent
of the backward closures it is used to verify.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    step: float = 1e-4,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """d fn() / d tensor by central differences, at ``indices`` or everywhere."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    if indices is None:
        indices = list(np.ndindex(tensor.shape))
    with no_grad():
        for idx in indices:
            orig = tensor.data[idx]
            tensor.data[idx] = orig + step
            plus = float(fn().data.sum())
            tensor.data[idx] = orig - step
            minus = float(fn().data.sum())
            tensor.data[idx] = orig
            grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor sits well above float64 central-difference roundoff (about
    1e-12 at step 1e-4), so gradients that are structurally zero, such as a
    key-projection bias under softmax, compare as equal instead of as noise
    over noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Compare backward() gradients against central differences.

    Returns one relative error per tensor. With ``max_entries`` set, only that
    many randomly chosen coordinates of each tensor are compared.
    """
    for t in tensors:
        t.grad = None
    fn().sum().backward()
    rng = rng or np.random.default_rng(0)
    errors = []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        numeric = numerical_grad(fn, t, step, all_idx)
        sel = tuple(np.array(all_idx).T)
        errors.append(relative_error(analytic[sel], numeric[sel]))
    return errors
