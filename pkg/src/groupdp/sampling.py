"""Fixed-size sampling without replacement, integer batch allocation and
exponential reweighting of group allocations and weights."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class SamplingError(ValueError):
    pass


def sample_without_replacement(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct indices from ``range(n)``, uniform over all size-``m`` subsets.

    Partial Fisher-Yates shuffle; consumes exactly ``m`` draws from ``rng``.
    """
    if m < 0 or m > n:
        raise SamplingError(f"cannot sample {m} items from a population of {n}")
    pool = np.arange(n)
    for i in range(m):
        j = i + int(rng.integers(n - i))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:m].copy()


def round_to_total(weights: Sequence[float], M: int, rng: np.random.Generator) -> np.ndarray:
    """Round nonnegative ``weights`` to integers summing to ``M``.

    Weights are rescaled to sum to ``M`` and rounded half-to-even; any
    remaining discrepancy is fixed one unit at a time at uniformly random
    positions. Increments may land anywhere, decrements only on positive
    entries. A position can absorb several units.
    """
    w = np.asarray(weights, dtype=float)
    if M < 1:
        raise SamplingError("total must be at least 1")
    if w.ndim != 1 or w.size == 0:
        raise SamplingError("weights must be a nonempty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise SamplingError("weights must be finite and nonnegative")
    if not w.max() > 0:
        raise SamplingError("weights must not all be zero")
    w = w / w.max()  # keeps the sum finite for huge weights and nonzero for tiny ones
    m = np.rint(w / w.sum() * M).astype(np.int64)  # np.rint rounds half to even
    diff = M - int(m.sum())
    while diff > 0:
        m[rng.integers(m.size)] += 1
        diff -= 1
    while diff < 0:
        positive = np.flatnonzero(m > 0)
        m[positive[rng.integers(positive.size)]] -= 1
        diff += 1
    return m


def _check_temperature(temperature: float) -> None:
    if not temperature >= 0:
        raise SamplingError(f"temperature must be nonnegative, got {temperature}")


def _tilt(base: np.ndarray, losses: Sequence[float], temperature: float) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if losses.shape != base.shape:
        raise SamplingError("one loss per group required")
    if not np.all(np.isfinite(losses)):
        raise SamplingError("losses must be finite")
    with np.errstate(divide="ignore"):
        logits = np.log(base) + temperature * losses
    logits -= logits.max()
    tilted = np.exp(logits)
    return tilted / tilted.sum()


def reweight_allocation(
    m: Sequence[int], losses: Sequence[float], temperature: float, rng: np.random.Generator
) -> np.ndarray:
    """Tilt batch sizes by ``exp(temperature * loss)`` and round back to the same total."""
    _check_temperature(temperature)
    m = np.asarray(m, dtype=float)
    M = int(round(m.sum()))
    return round_to_total(M * _tilt(m, losses, temperature), M, rng)


def reweight_lambda(lam: Sequence[float], losses: Sequence[float], temperature: float) -> np.ndarray:
    """Exponentiated-gradient step on the probability simplex."""
    _check_temperature(temperature)
    return _tilt(np.asarray(lam, dtype=float), losses, temperature)


def clamp_allocation(m: Sequence[int], sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Cap each entry at its group size and hand the surplus to uncapped groups.

    The surplus is spread proportionally to the uncapped entries' current
    weights (uniformly if those are all zero), then rounded.
    """
    m = np.asarray(m, dtype=np.int64).copy()
    sizes = np.asarray(sizes, dtype=np.int64)
    if m.sum() > sizes.sum():
        raise SamplingError(f"total batch size {m.sum()} exceeds dataset size {sizes.sum()}")
    while True:
        over = m > sizes
        if not over.any():
            return m
        surplus = int((m - sizes)[over].sum())
        m[over] = sizes[over]
        free = np.flatnonzero(m < sizes)
        w = m[free].astype(float)
        if w.sum() == 0:
            w = np.ones(free.size)
        m[free] += round_to_total(w, surplus, rng)
