"""Sampling variance of stratified (ASC) and group-sampled (aZB) DRO updates.

The three update schemes, all unbiased for ``U_dro = sum_g lam_g U_g``:

* ``asc``: draw ``m_g`` examples without replacement from every group and
  return the sum of their gradients divided by ``M = sum m_g``.
* ``azb``: pick one group ``g ~ Categorical(lam)`` and average ``M``
  gradients drawn without replacement from it.
* ``azb_prop``: as ``azb`` but the batch from group ``g`` has size ``M_g``.

No clipping or noise is involved here; this is pure sampling variance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import GroupDataset
from .models import ModelParams, per_example_grads

METHODS = ("asc", "azb", "azb_prop")
ORACLE_MAX_N = 10


class VarianceDomainError(ValueError):
    pass


@dataclass(frozen=True)
class GroupGradientStats:
    """Full-data gradient means ``U[g]`` and within-group variances ``var[g]`` (divide by n_g)."""

    means: np.ndarray  # G x p
    var: np.ndarray  # G
    sizes: tuple[int, ...]

    @property
    def G(self) -> int:
        return len(self.sizes)

    def dro_mean(self, lam: Sequence[float]) -> np.ndarray:
        return np.asarray(lam, dtype=float) @ self.means


def _group_grads(data: GroupDataset, params: ModelParams) -> list[np.ndarray]:
    out = []
    for g, (X, y) in enumerate(zip(data.X, data.y)):
        if len(y) == 0:
            raise VarianceDomainError(f"group {g} is empty")
        out.append(per_example_grads(params, X, y))
    return out


def stats_from_grads(grads: Sequence[np.ndarray]) -> GroupGradientStats:
    means, var = [], []
    for G_g in grads:
        G_g = np.asarray(G_g, dtype=float)
        if G_g.ndim != 2 or G_g.shape[0] == 0:
            raise VarianceDomainError("each group needs a nonempty n_g x p gradient matrix")
        mu = G_g.mean(axis=0)
        means.append(mu)
        var.append(float(np.mean(np.sum((G_g - mu) ** 2, axis=1))))
    return GroupGradientStats(np.vstack(means), np.asarray(var), tuple(len(G_g) for G_g in grads))


def group_gradient_stats(data: GroupDataset, params: ModelParams) -> GroupGradientStats:
    return stats_from_grads(_group_grads(data, params))


def between_group_term(stats: GroupGradientStats, lam: Sequence[float]) -> float:
    """``sum_g lam_g ||U_g - U_dro||^2``, the spread that group sampling adds."""
    lam = np.asarray(lam, dtype=float)
    diff = stats.means - stats.dro_mean(lam)
    return float(lam @ np.sum(diff**2, axis=1))


def pairwise_between_group_term(stats: GroupGradientStats, lam: Sequence[float]) -> float:
    """Same quantity written as ``1/2 sum_{g,h} lam_g lam_h ||U_g - U_h||^2``."""
    lam = np.asarray(lam, dtype=float)
    d2 = np.sum((stats.means[:, None, :] - stats.means[None, :, :]) ** 2, axis=2)
    return float(0.5 * lam @ d2 @ lam)


def _fpc(n: int, m: int) -> float:
    """Finite-population correction ``(n - m) / (n - 1)``; zero when the whole group is drawn."""
    if m > n:
        raise VarianceDomainError(f"batch of {m} exceeds group size {n}")
    return 0.0 if m == n else (n - m) / (n - 1)


def _check_lambda(lam, G: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (G,) or np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
        raise VarianceDomainError(f"lambda must be a probability vector of length {G}")
    return lam


def _check_allocation(allocation, G: int) -> np.ndarray:
    if allocation is None:
        raise VarianceDomainError("this method needs a per-group allocation")
    m = np.asarray(allocation)
    if m.shape != (G,) or np.any(m < 0) or not np.all(m == np.round(m)):
        raise VarianceDomainError(f"allocation must be {G} nonnegative integers")
    return m.astype(np.int64)


def analytic_variance(
    method: str,
    stats: GroupGradientStats,
    lam: Sequence[float],
    M: int,
    allocation: Sequence[int] | None = None,
) -> float:
    """Closed-form ``E||U - U_dro||^2`` for one of :data:`METHODS`.

    ``asc`` reads the per-group batch sizes from ``allocation`` and expects
    ``lam = allocation / M``; ``azb_prop`` uses ``allocation[g]`` as the batch
    size for group ``g``; ``azb`` uses ``M`` for every group.
    """
    G = stats.G
    lam = _check_lambda(lam, G)
    if M < 1:
        raise VarianceDomainError("M must be >= 1")
    n = stats.sizes
    if method == "asc":
        m = _check_allocation(allocation, G)
        if m.sum() != M:
            raise VarianceDomainError(f"allocation sums to {m.sum()}, expected M={M}")
        if not np.allclose(lam, m / M, atol=1e-9):
            raise VarianceDomainError("stratified update needs lambda_g = m_g / M")
        return float(sum(lam[g] * _fpc(n[g], m[g]) * stats.var[g] for g in range(G)) / M)
    if method == "azb":
        within = sum(lam[g] * _fpc(n[g], M) * stats.var[g] for g in range(G) if lam[g] > 0) / M
        return float(within + between_group_term(stats, lam))
    if method == "azb_prop":
        m = _check_allocation(allocation, G)
        within = 0.0
        for g in range(G):
            if lam[g] == 0:
                continue
            if m[g] < 1:
                raise VarianceDomainError(f"group {g} can be selected but has an empty batch")
            within += lam[g] * _fpc(n[g], m[g]) * stats.var[g] / m[g]
        return float(within + between_group_term(stats, lam))
    raise VarianceDomainError(f"unknown method {method!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class MonteCarloResult:
    mean: np.ndarray  # average update over all trials
    mean_se: np.ndarray  # per-coordinate standard error of ``mean``
    variance: float  # average of ||U - U_dro||^2
    variance_se: float
    target: np.ndarray  # U_dro
    trials: int

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "variance": self.variance,
            "variance_se": self.variance_se,
            "mean": self.mean.tolist(),
            "mean_se": self.mean_se.tolist(),
            "target": self.target.tolist(),
        }


def _distinct_rows(n: int, m: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """``trials`` uniform ``m``-subsets of ``range(n)``, one per row.

    Small batches from large groups use rejection: draw with replacement and
    redraw any row holding a repeat, which leaves the accepted rows uniform
    over ordered distinct tuples. Otherwise take the head of a random permutation.
    """
    if m * m > n:
        return np.argsort(rng.random((trials, n)), axis=1)[:, :m]
    idx = rng.integers(0, n, size=(trials, m))
    while True:
        s = np.sort(idx, axis=1)
        bad = np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))
        if bad.size == 0:
            return idx
        idx[bad] = rng.integers(0, n, size=(bad.size, m))


def _batch_sums(G_g: np.ndarray, m: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Sum of ``m`` rows drawn without replacement, for ``trials`` independent draws."""
    n = G_g.shape[0]
    if m == 0 or trials == 0:
        return np.zeros((trials, G_g.shape[1]))
    if m == n:
        return np.broadcast_to(G_g.sum(axis=0), (trials, G_g.shape[1])).copy()
    return G_g[_distinct_rows(n, m, trials, rng)].sum(axis=1)


def _draw_updates(method, grads, lam, M, m, trials, rng) -> np.ndarray:
    p = grads[0].shape[1]
    if method == "asc":
        total = np.zeros((trials, p))
        for g, G_g in enumerate(grads):
            total += _batch_sums(G_g, int(m[g]), trials, rng)
        return total / M
    picks = rng.choice(len(grads), size=trials, p=lam)
    out = np.empty((trials, p))
    for g, G_g in enumerate(grads):
        rows = np.flatnonzero(picks == g)
        b = M if method == "azb" else int(m[g])
        out[rows] = _batch_sums(G_g, b, len(rows), rng) / b
    return out


def empirical_variance(
    method: str,
    data: GroupDataset,
    params: ModelParams,
    lam: Sequence[float],
    M: int,
    trials: int,
    rng: np.random.Generator,
    allocation: Sequence[int] | None = None,
    n_batches: int = 10,
) -> MonteCarloResult:
    """Monte Carlo estimate of the update mean and ``E||U - U_dro||^2`` at fixed params.

    Trials are split into ``n_batches`` equal chunks; standard errors come
    from the spread of the chunk averages.
    """
    grads = _group_grads(data, params)
    stats = stats_from_grads(grads)
    # validates the configuration with the same rules as the closed form
    analytic_variance(method, stats, lam, M, allocation)
    lam = np.asarray(lam, dtype=float)
    m = None if method == "azb" else _check_allocation(allocation, stats.G)
    if trials < n_batches or trials % n_batches:
        raise VarianceDomainError(f"trials must be a positive multiple of {n_batches}")
    target = stats.dro_mean(lam)
    per = trials // n_batches
    means, variances = [], []
    for _ in range(n_batches):
        U = _draw_updates(method, grads, lam, M, m, per, rng)
        means.append(U.mean(axis=0))
        variances.append(float(np.mean(np.sum((U - target) ** 2, axis=1))))
    means = np.vstack(means)
    variances = np.asarray(variances)
    root = math.sqrt(n_batches)
    return MonteCarloResult(
        mean=means.mean(axis=0),
        mean_se=means.std(axis=0, ddof=1) / root,
        variance=float(variances.mean()),
        variance_se=float(variances.std(ddof=1) / root),
        target=target,
        trials=trials,
    )


def wor_cov_oracle(population, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Covariance of the sum of a uniform ``m``-subset, by enumeration and in closed form.

    Returns ``(exact, closed_form)`` where the closed form is
    ``m (n - m) / (n - 1) * cov(population)`` with the population covariance
    normalized by ``n``.
    """
    v = np.asarray(population, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    n = v.shape[0]
    if n < 1 or n > ORACLE_MAX_N:
        raise VarianceDomainError(f"exhaustive enumeration supports 1 <= n <= {ORACLE_MAX_N}, got {n}")
    if not 1 <= m <= n:
        raise VarianceDomainError(f"need 1 <= m <= n, got m={m}, n={n}")
    sums = np.array([v[list(c)].sum(axis=0) for c in itertools.combinations(range(n), m)])
    centered = sums - sums.mean(axis=0)
    exact = centered.T @ centered / len(sums)
    pc = v - v.mean(axis=0)
    pop_cov = pc.T @ pc / n
    closed = (0.0 if m == n else m * (n - m) / (n - 1)) * pop_cov
    return exact, closed
