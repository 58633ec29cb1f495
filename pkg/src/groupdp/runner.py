"""Turn a privacy target into calibrated training configurations."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import accountant as acc
from .data import DEFAULT_SYNTH, DataError, GroupDataset, generate_synthetic, load_csv, split
from .trainers import TrainConfig, train


def reference_rate(algorithm: str, M: int, sizes) -> float:
    """Model sampling rate the noise is calibrated against."""
    n = sum(sizes)
    if algorithm in ("dpsgd", "asc", "azb-prop"):
        return M / n
    if algorithm == "azb":
        return M / min(sizes)
    if algorithm == "azb-weak":
        return M / max(sizes)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def calibrate_config(
    base: TrainConfig,
    data: GroupDataset,
    epsilon: float,
    delta: float | None = None,
    dro_scale: float = 25.0,
) -> tuple[TrainConfig, acc.Calibration]:
    """Fill in ``sigma``, ``tau``, ``eps_step`` and ``working_alpha`` for ``(epsilon, delta)``.

    ASC's per-step budget is the model cost at the pooled rate ``M / n``
    under the calibrated noise multiplier, so ASC and aZB-prop share a
    noise multiplier.
    """
    sizes = data.sizes
    delta = data.default_delta() if delta is None else delta
    if base.algorithm in ("azb", "azb-weak") and base.M > min(sizes):
        raise DataError(f"batch size {base.M} exceeds the smallest group ({min(sizes)})")
    gamma = reference_rate(base.algorithm, base.M, sizes)
    k = base.k if base.algorithm != "dpsgd" else None
    cal = acc.calibrate_base_noise(
        epsilon, delta, base.T, gamma, k=k, gamma_loss=base.gamma_loss, dro_scale=dro_scale
    )
    eps_step = None
    if base.algorithm == "asc":
        eps_step = acc.subsampled_gaussian_rdp(cal.alpha, acc.MechanismSpec(base.M / sum(sizes), cal.kappa_model))
    config = replace(
        base,
        sigma=cal.kappa_model * base.xi,
        tau=cal.kappa_loss * base.zeta,
        eps_step=eps_step,
        working_alpha=cal.alpha,
        delta=delta,
    )
    return config, cal


SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def resolve_dataset(source: str) -> GroupDataset:
    """A CSV path, ``synth:default``, or ``synth:default:SEED`` for a fresh draw from the same design."""
    if source.startswith("synth:"):
        name, _, seed = source[len("synth:"):].partition(":")
        if name != "default":
            raise DataError(f"unknown synthetic dataset {name!r}; only 'synth:default' is built in")
        if not seed:
            return generate_synthetic(DEFAULT_SYNTH)
        try:
            return generate_synthetic(replace(DEFAULT_SYNTH, seed=int(seed)))
        except ValueError:
            raise DataError(f"synthetic seed must be an integer, got {seed!r}") from None
    try:
        return load_csv(source)
    except OSError as exc:
        raise DataError(f"cannot read {source}: {exc.strerror or exc}") from None


def train_test_split(dataset: GroupDataset, split_seed: int = 0) -> tuple[GroupDataset, GroupDataset]:
    """Train and test parts of the 80/10/10 split; the middle part is held out for tuning."""
    train_part, _, test_part = split(dataset, SPLIT_FRACTIONS, np.random.default_rng(split_seed))
    return train_part, test_part


@dataclass(frozen=True)
class PairedSummary:
    algorithm: str
    wga: tuple[float, ...]
    avg: tuple[float, ...]
    epsilon: float

    @property
    def mean_wga(self) -> float:
        return float(np.mean(self.wga))

    @property
    def mean_avg(self) -> float:
        return float(np.mean(self.avg))


def paired_comparison(
    algorithms: Sequence[str],
    base: TrainConfig,
    train_data: GroupDataset,
    test_data: GroupDataset,
    epsilon: float,
    seeds: Sequence[int],
    delta: float | None = None,
    dro_scale: float = 25.0,
) -> dict[str, PairedSummary]:
    """Train each algorithm once per seed at the same privacy target; report final test WGA and AVG.

    aZB's batch size is capped at the smallest group size, which its
    sampling scheme requires.
    """
    out = {}
    for algo in algorithms:
        M = min(base.M, min(train_data.sizes)) if algo in ("azb", "azb-weak") else base.M
        wgas, avgs, eps = [], [], 0.0
        for seed in seeds:
            # eps_step is a placeholder here; calibration overwrites it
            start = replace(base, algorithm=algo, M=M, seed=seed, eps_step=base.eps_step or 1.0)
            cfg, _ = calibrate_config(start, train_data, epsilon, delta, dro_scale)
            report = train(cfg, train_data, eval_data=test_data)
            wgas.append(report.history[-1]["wga"])
            avgs.append(report.history[-1]["avg"])
            eps = max(e for e, _ in report.epsilons.values())
        out[algo] = PairedSummary(algo, tuple(wgas), tuple(avgs), eps)
    return out
