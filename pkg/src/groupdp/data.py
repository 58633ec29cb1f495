"""Grouped classification datasets: synthetic generation, CSV I/O and splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GroupDataset:
    """Per-group feature matrices ``X[g]`` (n_g x d) and labels ``y[g]``."""

    X: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    c: int

    def __post_init__(self):
        if len(self.X) != len(self.y) or not self.X:
            raise DataError("need matching, nonempty per-group features and labels")
        X = tuple(_frozen(np.asarray(x, dtype=float)) for x in self.X)
        y = tuple(_frozen(np.asarray(v, dtype=np.int64)) for v in self.y)
        d = X[0].shape[1] if X[0].ndim == 2 else -1
        for g, (xg, yg) in enumerate(zip(X, y)):
            if xg.ndim != 2 or xg.shape[1] != d:
                raise DataError(f"group {g}: features must be an n_g x {d} matrix")
            if yg.shape != (xg.shape[0],):
                raise DataError(f"group {g}: one label per row required")
            if xg.shape[0] < 1:
                raise DataError(f"group {g} is empty")
            if np.any(yg < 0) or np.any(yg >= self.c):
                raise DataError(f"group {g}: labels must lie in [0, {self.c})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def G(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X[0].shape[1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.X)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    def default_delta(self) -> float:
        return 1.0 / (2 * self.n)

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(X, y, group)`` with groups concatenated in order."""
        groups = np.concatenate([np.full(s, g) for g, s in enumerate(self.sizes)])
        return np.concatenate(self.X), np.concatenate(self.y), groups

    def standardized(self, mean=None, std=None) -> "GroupDataset":
        X, _, _ = self.pooled()
        mean = X.mean(axis=0) if mean is None else mean
        std = X.std(axis=0) if std is None else std
        std = np.where(std > 0, std, 1.0)
        return GroupDataset(tuple((x - mean) / std for x in self.X), self.y, self.c)


@dataclass(frozen=True)
class SynthSpec:
    """Class-conditional isotropic Gaussians per group.

    ``means[g][k]`` is the mean of class ``k`` in group ``g``;
    ``class_fractions[g]`` the label mix (balanced when omitted).
    """

    sizes: tuple[int, ...]
    means: tuple[tuple[tuple[float, ...], ...], ...]
    spread: float = 1.0
    class_fractions: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.sizes) != len(self.means) or not self.sizes:
            raise DataError("one size and one set of class means per group")
        if any(s < 1 for s in self.sizes):
            raise DataError("group sizes must be >= 1")
        if self.spread < 0:
            raise DataError("spread must be nonnegative")
        shapes = {np.asarray(m, dtype=float).shape for m in self.means}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise DataError("every group needs a c x d matrix of class means")


# Majority groups separate cleanly on the first feature; the minority group
# sits on a tilted boundary with closer class means, so a classifier fitted
# to the majority misclassifies much of it.
DEFAULT_SYNTH = SynthSpec(
    sizes=(1000, 1000, 100),
    means=(
        ((-2.0, 1.0), (2.0, 1.0)),
        ((-2.0, -1.0), (2.0, -1.0)),
        ((0.6, 3.0), (2.2, 3.0)),
    ),
    spread=0.6,
    seed=0,
)


def _class_counts(n: int, fractions: np.ndarray) -> np.ndarray:
    raw = fractions / fractions.sum() * n
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def generate_synthetic(spec: SynthSpec = DEFAULT_SYNTH, rng: np.random.Generator | None = None) -> GroupDataset:
    """Draw a dataset from ``spec``; ``rng`` defaults to one seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    means = np.asarray(spec.means, dtype=float)
    G, c, d = means.shape
    Xs, ys = [], []
    for g, n_g in enumerate(spec.sizes):
        fr = np.ones(c) if spec.class_fractions is None else np.asarray(spec.class_fractions[g], float)
        labels = np.repeat(np.arange(c), _class_counts(n_g, fr))
        labels = labels[rng.permutation(n_g)]
        Xs.append(means[g][labels] + spec.spread * rng.standard_normal((n_g, d)))
        ys.append(labels)
    return GroupDataset(tuple(Xs), tuple(ys), c)


def write_csv(dataset: GroupDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "label"] + [f"f{i}" for i in range(dataset.d)])
        for g in range(dataset.G):
            for x, label in zip(dataset.X[g], dataset.y[g]):
                w.writerow([g, int(label)] + [repr(float(v)) for v in x])


def load_csv(path: str | Path, c: int | None = None) -> GroupDataset:
    """Parse ``group,label,f0,...`` rows; class count inferred unless given."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["group", "label"] or len(header) < 3:
        raise DataError(f"{path}: header must start with group,label followed by feature columns")
    d = len(header) - 2
    if header[2:] != [f"f{i}" for i in range(d)]:
        raise DataError(f"{path}: feature columns must be named f0..f{d - 1}")
    if len(rows) == 1:
        raise DataError(f"{path}: no data rows")
    groups, labels, feats = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise DataError(f"{path}:{lineno}: expected {d + 2} columns, got {len(row)}")
        try:
            g, label = int(row[0]), int(row[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: group and label must be integers") from None
        try:
            x = [float(v) for v in row[2:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric feature") from None
        if g < 0 or label < 0 or (c is not None and label >= c):
            raise DataError(f"{path}:{lineno}: group or label out of range")
        if not np.all(np.isfinite(x)):
            raise DataError(f"{path}:{lineno}: non-finite feature")
        groups.append(g); labels.append(label); feats.append(x)
    groups = np.asarray(groups)
    labels = np.asarray(labels)
    feats = np.asarray(feats, dtype=float)
    G = int(groups.max()) + 1
    missing = sorted(set(range(G)) - set(groups.tolist()))
    if missing:
        raise DataError(f"{path}: groups {missing} have no rows")
    c = int(labels.max()) + 1 if c is None else c
    Xs = tuple(feats[groups == g] for g in range(G))
    ys = tuple(labels[groups == g] for g in range(G))
    return GroupDataset(Xs, ys, c)


def split(
    dataset: GroupDataset, fractions: Sequence[float], rng: np.random.Generator
) -> tuple[GroupDataset, ...]:
    """Stratified per-group split; every part gets at least one example of every group."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError("split fractions must be positive and sum to 1")
    parts_X = [[] for _ in fr]
    parts_y = [[] for _ in fr]
    for g in range(dataset.G):
        n_g = dataset.sizes[g]
        counts = _class_counts(n_g, fr)
        if np.any(counts == 0):
            raise DataError(f"group {g} with {n_g} examples is too small to split {tuple(fractions)}")
        perm = rng.permutation(n_g)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(len(fr)):
            idx = np.sort(perm[bounds[i] : bounds[i + 1]])
            parts_X[i].append(dataset.X[g][idx])
            parts_y[i].append(dataset.y[g][idx])
    return tuple(GroupDataset(tuple(px), tuple(py), dataset.c) for px, py in zip(parts_X, parts_y))
