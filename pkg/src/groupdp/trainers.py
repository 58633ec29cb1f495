"""DP-SGD, ASC and the aZB family, with per-group RDP ledgers.

All runs draw from a single generator in a fixed order (init, then per step:
batches, noise, and every ``k`` steps the loss-release batches and noise), so
a config plus seed reproduces a run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import accountant as acc
from .data import DataError, GroupDataset
from .metrics import group_accuracies
from .models import ModelParams, init_params, per_example_grads, per_example_losses
from .sampling import (
    clamp_allocation,
    reweight_allocation,
    reweight_lambda,
    round_to_total,
    sample_without_replacement,
)

ALGORITHMS = ("dpsgd", "asc", "azb", "azb-weak", "azb-prop")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``lr`` is the model step size and ``temperature`` the loss-reweighting
    scale. ``sigma`` and ``tau`` are noise standard deviations; ``xi`` the
    fixed gradient clip threshold (DP-SGD, aZB family); ``eps_step`` the
    per-step RDP budget at ``working_alpha`` (ASC).
    """

    algorithm: str
    T: int
    M: int
    lr: float
    sigma: float
    xi: float = 1.0
    temperature: float = 1.0
    gamma_loss: float = 1.0
    tau: float = 0.0
    zeta: float = 1.0
    k: int | None = 1
    eps_step: float | None = None
    working_alpha: int = 8
    momentum: float = 0.0
    delta: float | None = None
    eval_every: int | None = None
    arch: str = "softmax"
    hidden: int = 32
    seed: int = 0
    # diagnostic only: drop the Gaussian noise draws but keep the accounting
    add_noise: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.T < 1 or self.M < 1:
            raise ConfigError("T and M must be >= 1")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.sigma < 0 or self.tau < 0:
            raise ConfigError("noise scales must be nonnegative")
        if not self.lr > 0 or self.temperature < 0:
            raise ConfigError("lr must be positive and temperature nonnegative")
        if not self.zeta > 0 or not self.xi > 0:
            raise ConfigError("clip thresholds must be positive")
        if not 0 < self.gamma_loss <= 1:
            raise ConfigError("loss sampling rate must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.algorithm == "asc" and not (self.eps_step and self.eps_step > 0):
            raise ConfigError("ASC needs a positive per-step budget eps_step")
        acc.check_orders([self.working_alpha])

    @property
    def reweights(self) -> bool:
        return self.algorithm != "dpsgd" and self.k is not None and self.k <= self.T

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepInfo:
    """What a training step touched; passed to ``on_step`` callbacks."""

    step: int
    group: int | None
    batch_sizes: np.ndarray
    thresholds: np.ndarray
    max_norms: np.ndarray  # largest clipped contribution per group (0 if unsampled)


@dataclass
class TrainReport:
    config: TrainConfig
    params: ModelParams
    history: list[dict]
    ledger: acc.PrivacyLedger
    delta: float
    group_sizes: tuple[int, ...]

    @property
    def epsilons(self) -> dict[int, tuple[float, int]]:
        return self.ledger.to_dp(self.delta)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "params": {
                "arch": self.params.arch,
                "d": self.params.d,
                "c": self.params.c,
                "h": self.params.h,
                "theta": self.params.theta.tolist(),
            },
            "history": self.history,
            "privacy": {
                "delta": self.delta,
                "orders": list(self.ledger.orders),
                "steps": self.ledger.step_count,
                "reweights": self.ledger.reweight_count,
                "per_group": [
                    {
                        "group": g,
                        "size": self.group_sizes[g],
                        "rdp": list(self.ledger.curve(g).eps),
                        "epsilon": eps,
                        "order": alpha,
                    }
                    for g, (eps, alpha) in self.epsilons.items()
                ],
                "epsilon_uniform": acc.rdp_to_dp(self.ledger.uniform(), self.delta)[0],
            },
        }


# --------------------------------------------------------------------------
# clipping and loss release


def clip_vector(v: np.ndarray, xi: float) -> np.ndarray:
    """Scale ``v`` to norm at most ``xi``; the zero vector is returned unchanged."""
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm <= xi:
        return v.copy()
    return v * (xi / norm)


def clip_rows(G: np.ndarray, xi: float) -> np.ndarray:
    norms = np.linalg.norm(G, axis=1)
    scale = np.ones_like(norms)
    big = norms > xi
    scale[big] = xi / norms[big]
    return G * scale[:, None]


def clip_scalar_loss(loss: float, zeta: float) -> float:
    return min(loss, zeta)


def loss_batch_size(gamma_loss: float, n_g: int) -> int:
    # tolerance guards products such as 0.29 * 100 landing just below an integer
    return int(math.floor(gamma_loss * n_g + 1e-9))


def noisy_group_losses(
    data: GroupDataset,
    params: ModelParams,
    gamma_loss: float,
    zeta: float,
    tau: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Privately released per-group mean losses (clipped sum plus one Gaussian draw)."""
    out = np.empty(data.G)
    for g in range(data.G):
        b = loss_batch_size(gamma_loss, data.sizes[g])
        if b < 1:
            raise DataError(f"loss batch for group {g} is empty at rate {gamma_loss}")
        idx = sample_without_replacement(data.sizes[g], b, rng)
        losses = np.minimum(per_example_losses(params, data.X[g][idx], data.y[g][idx]), zeta)
        out[g] = (losses.sum() + rng.normal(0.0, tau)) / b
    return out


# --------------------------------------------------------------------------
# accounting helpers


def _cost(gamma: float, kappa: float, orders) -> acc.RdpCurve:
    if gamma == 0:
        return acc.RdpCurve.zeros(orders)
    if kappa == 0 or math.isnan(kappa):
        return acc.RdpCurve(orders, (math.inf,) * len(orders))
    if math.isinf(kappa):
        return acc.RdpCurve.zeros(orders)
    return acc.rdp_curve(acc.MechanismSpec(gamma, kappa), orders)


def loss_release_cost(config: TrainConfig, orders) -> acc.RdpCurve:
    return _cost(config.gamma_loss, config.tau / config.zeta, orders)


def expected_ledger(config: TrainConfig, group_sizes: Sequence[int]) -> dict[int, float]:
    """Closed-form per-group RDP at the working order for a finished run."""
    a = config.working_alpha
    T, R = config.T, (acc.n_reweights(config.T, config.k) if config.reweights else 0)
    loss = loss_release_cost(config, (a,)).eps[0] if R else 0.0
    n = sum(group_sizes)
    if config.algorithm == "asc":
        return {g: T * config.eps_step + R * loss for g in range(len(group_sizes))}
    if config.algorithm == "dpsgd":
        step = _cost(config.M / n, config.sigma / config.xi, (a,)).eps[0]
        return {g: T * step for g in range(len(group_sizes))}
    if config.algorithm == "azb-prop":
        rates = [config.M / n] * len(group_sizes)
    else:
        rates = [config.M / n_g for n_g in group_sizes]
    return {
        g: T * _cost(r, config.sigma / config.xi, (a,)).eps[0] + R * loss for g, r in enumerate(rates)
    }


# --------------------------------------------------------------------------
# optimiser


class _SGD:
    def __init__(self, params: ModelParams, lr: float, momentum: float):
        self.theta = params.theta.copy()
        self.template = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros_like(self.theta)

    @property
    def params(self) -> ModelParams:
        return self.template.with_theta(self.theta.copy())

    def step(self, update: np.ndarray) -> None:
        if self.momentum:
            self.velocity = self.momentum * self.velocity + update
            update = self.velocity
        self.theta = self.theta - self.lr * update


def _noise(config: TrainConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    draw = rng.normal(0.0, config.sigma, size=size)
    return draw if config.add_noise else np.zeros(size)


def _evaluate(step: int, params: ModelParams, eval_data: GroupDataset, extra: dict) -> dict:
    accs = group_accuracies(params, eval_data)
    rec = {"step": step, "group_acc": accs.tolist(), "wga": float(accs.min()), "avg": float(accs.mean())}
    rec.update(extra)
    return rec


def _setup(config: TrainConfig, data: GroupDataset, rng):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = init_params(config.arch, data.d, data.c, rng, h=config.hidden)
    delta = config.delta if config.delta is not None else data.default_delta()
    ledger = acc.PrivacyLedger.empty(range(data.G), (config.working_alpha,))
    return rng, params, delta, ledger


def _eval_due(config: TrainConfig, t: int) -> bool:
    every = config.eval_every or config.k or config.T
    return t % every == 0 or t == config.T


# --------------------------------------------------------------------------
# trainers


def train_dpsgd(
    config: TrainConfig,
    data: GroupDataset,
    rng: np.random.Generator | None = None,
    eval_data: GroupDataset | None = None,
    on_step: Callable[[StepInfo], None] | None = None,
) -> TrainReport:
    """Uniform batches from the pooled dataset, fixed clip, isotropic noise."""
    n = data.n
    if config.M > n:
        raise DataError(f"batch size {config.M} exceeds dataset size {n}")
    rng, params, delta, ledger = _setup(config, data, rng)
    eval_data = eval_data or data
    X, y, groups = data.pooled()
    orders = ledger.orders
    step_cost = _cost(config.M / n, config.sigma / config.xi, orders)
    opt = _SGD(params, config.lr, config.momentum)
    history = []
    for t in range(1, config.T + 1):
        idx = sample_without_replacement(n, config.M, rng)
        G = clip_rows(per_example_grads(opt.params, X[idx], y[idx]), config.xi)
        if on_step is not None:
            norms = np.linalg.norm(G, axis=1)
            max_norms = np.array([norms[groups[idx] == g].max(initial=0.0) for g in range(data.G)])
            on_step(StepInfo(t, None, np.bincount(groups[idx], minlength=data.G),
                             np.full(data.G, config.xi), max_norms))
        opt.step((G.sum(axis=0) + _noise(config, G.shape[1], rng)) / config.M)
        ledger = acc.compose_ledger(ledger, {g: step_cost for g in range(data.G)}, "step")
        if _eval_due(config, t):
            history.append(_evaluate(t, opt.params, eval_data, {}))
    return TrainReport(config, opt.params, history, ledger, delta, data.sizes)


def asc_thresholds(
    sigma: float, allocation: Sequence[int], sizes: Sequence[int], alpha: int, eps_step: float,
    cache: dict | None = None,
) -> np.ndarray:
    """Per-group clip thresholds ``sigma / kappa_alpha(m_g / n_g, eps_step)``.

    Each threshold is nudged down by ulps if float rounding would otherwise
    push the group's per-step cost above ``eps_step``. Unsampled groups get 0.
    """
    cache = {} if cache is None else cache
    out = np.zeros(len(sizes))
    for g, (m_g, n_g) in enumerate(zip(allocation, sizes)):
        if m_g == 0:
            continue
        key = (int(m_g), int(n_g))
        if key not in cache:
            gamma = m_g / n_g
            xi = sigma / acc.invert_noise_multiplier(gamma, alpha, eps_step)
            while acc.subsampled_gaussian_rdp(alpha, acc.MechanismSpec(gamma, sigma / xi)) > eps_step:
                xi = np.nextafter(xi, 0.0)
            cache[key] = xi
        out[g] = cache[key]
    return out


def train_asc(
    config: TrainConfig,
    data: GroupDataset,
    rng: np.random.Generator | None = None,
    eval_data: GroupDataset | None = None,
    on_step: Callable[[StepInfo], None] | None = None,
) -> TrainReport:
    """Stratified batches with adaptive per-group sizes and balanced clipping."""
    if config.M > data.n:
        raise DataError(f"batch size {config.M} exceeds dataset size {data.n}")
    if not config.sigma > 0:
        raise ConfigError("ASC needs positive model noise sigma")
    rng, params, delta, ledger = _setup(config, data, rng)
    eval_data = eval_data or data
    sizes = np.asarray(data.sizes)
    alpha = config.working_alpha
    orders = ledger.orders
    step_cost = acc.RdpCurve(orders, (config.eps_step,))
    loss_cost = loss_release_cost(config, orders)
    alloc = round_to_total(np.full(data.G, config.M / data.G), config.M, rng)
    alloc = clamp_allocation(alloc, sizes, rng)
    cache: dict = {}
    xis = asc_thresholds(config.sigma, alloc, sizes, alpha, config.eps_step, cache)
    opt = _SGD(params, config.lr, config.momentum)
    history = []
    for t in range(1, config.T + 1):
        theta_t = opt.params
        total = np.zeros(theta_t.size)
        max_norms = np.zeros(data.G)
        for g in range(data.G):
            if alloc[g] == 0:
                continue
            idx = sample_without_replacement(sizes[g], int(alloc[g]), rng)
            G = clip_rows(per_example_grads(theta_t, data.X[g][idx], data.y[g][idx]), xis[g])
            max_norms[g] = np.linalg.norm(G, axis=1).max()
            total += G.sum(axis=0)
        if on_step is not None:
            on_step(StepInfo(t, None, alloc.copy(), xis.copy(), max_norms))
        opt.step((total + _noise(config, total.size, rng)) / config.M)
        ledger = acc.compose_ledger(ledger, {g: step_cost for g in range(data.G)}, "step")
        if config.reweights and t % config.k == 0:
            losses = noisy_group_losses(data, theta_t, config.gamma_loss, config.zeta, config.tau, rng)
            alloc = reweight_allocation(alloc, losses, config.temperature, rng)
            alloc = clamp_allocation(alloc, sizes, rng)
            xis = asc_thresholds(config.sigma, alloc, sizes, alpha, config.eps_step, cache)
            ledger = acc.compose_ledger(ledger, {g: loss_cost for g in range(data.G)}, "reweight")
        if _eval_due(config, t):
            history.append(_evaluate(t, opt.params, eval_data, {"allocation": alloc.tolist()}))
    return TrainReport(config, opt.params, history, ledger, delta, data.sizes)


def train_azb(
    config: TrainConfig,
    data: GroupDataset,
    variant: str | None = None,
    rng: np.random.Generator | None = None,
    eval_data: GroupDataset | None = None,
    on_step: Callable[[StepInfo], None] | None = None,
) -> TrainReport:
    """One group per step drawn from Categorical(lambda), fixed clip threshold.

    ``variant`` is ``base``, ``weak`` or ``prop``; by default it is read off
    ``config.algorithm``. ``weak`` trains exactly like ``base``: it differs
    only in how its noise was calibrated, which the ledger exposes.
    """
    variant = variant or {"azb": "base", "azb-weak": "weak", "azb-prop": "prop"}.get(config.algorithm)
    if variant not in ("base", "weak", "prop"):
        raise ConfigError(f"unknown aZB variant {variant!r}")
    sizes = np.asarray(data.sizes)
    if variant != "prop" and config.M > sizes.min():
        g = int(sizes.argmin())
        raise DataError(f"batch size {config.M} exceeds size {sizes[g]} of group {g}")
    if variant == "prop" and config.M > data.n:
        raise DataError(f"batch size {config.M} exceeds dataset size {data.n}")
    rng, params, delta, ledger = _setup(config, data, rng)
    eval_data = eval_data or data
    orders = ledger.orders
    kappa = config.sigma / config.xi
    if variant == "prop":
        batch = clamp_allocation(round_to_total(sizes / sizes.sum(), config.M, rng), sizes, rng)
        costs = {g: _cost(config.M / data.n, kappa, orders) for g in range(data.G)}
    else:
        batch = np.full(data.G, config.M)
        costs = {g: _cost(config.M / sizes[g], kappa, orders) for g in range(data.G)}
    loss_cost = loss_release_cost(config, orders)
    lam = np.full(data.G, 1.0 / data.G)
    opt = _SGD(params, config.lr, config.momentum)
    history = []
    for t in range(1, config.T + 1):
        theta_t = opt.params
        g = int(rng.choice(data.G, p=lam))
        b = int(batch[g])
        max_norms = np.zeros(data.G)
        if b > 0:
            idx = sample_without_replacement(sizes[g], b, rng)
            G = clip_rows(per_example_grads(theta_t, data.X[g][idx], data.y[g][idx]), config.xi)
            max_norms[g] = np.linalg.norm(G, axis=1).max()
            opt.step((G.sum(axis=0) + _noise(config, G.shape[1], rng)) / b)
        if on_step is not None:
            used = np.zeros(data.G, dtype=np.int64)
            used[g] = b
            on_step(StepInfo(t, g, used, np.full(data.G, config.xi), max_norms))
        ledger = acc.compose_ledger(ledger, costs, "step")
        if config.reweights and t % config.k == 0:
            losses = noisy_group_losses(data, theta_t, config.gamma_loss, config.zeta, config.tau, rng)
            lam = reweight_lambda(lam, losses, config.temperature)
            ledger = acc.compose_ledger(ledger, {h: loss_cost for h in range(data.G)}, "reweight")
        if _eval_due(config, t):
            history.append(_evaluate(t, opt.params, eval_data, {"lambda": lam.tolist()}))
    return TrainReport(config, opt.params, history, ledger, delta, data.sizes)


def train(
    config: TrainConfig,
    data: GroupDataset,
    rng: np.random.Generator | None = None,
    eval_data: GroupDataset | None = None,
    on_step: Callable[[StepInfo], None] | None = None,
) -> TrainReport:
    if config.algorithm == "dpsgd":
        return train_dpsgd(config, data, rng, eval_data, on_step)
    if config.algorithm == "asc":
        return train_asc(config, data, rng, eval_data, on_step)
    return train_azb(config, data, None, rng, eval_data, on_step)
