"""Per-group accuracy, worst-case group accuracy (WGA) and average group accuracy (AVG)."""

from __future__ import annotations

import numpy as np

from .data import DataError, GroupDataset
from .models import ModelParams, predict


def group_accuracies(params: ModelParams, dataset: GroupDataset) -> np.ndarray:
    accs = []
    for g, (X, y) in enumerate(zip(dataset.X, dataset.y)):
        if len(y) == 0:
            raise DataError(f"group {g} is empty")
        accs.append(float(np.mean(predict(params, X) == y)))
    return np.asarray(accs)


def wga(params: ModelParams, dataset: GroupDataset) -> float:
    return float(group_accuracies(params, dataset).min())


def avg_group_accuracy(params: ModelParams, dataset: GroupDataset) -> float:
    """Unweighted mean over groups, not over examples."""
    return float(group_accuracies(params, dataset).mean())
