"""Rényi-DP accounting for subsampled Gaussian mechanisms.

Conventions: neighbouring datasets differ by replacing one record, so a sum
of vectors clipped to norm C has sensitivity 2C. A noise multiplier ``kappa``
is always the ratio ``sigma / C``. Batches are drawn without replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (80, 96, 128, 192, 256)

MAX_BRACKET_STEPS = 200


class PrivacyDomainError(ValueError):
    """Raised when an accountant input lies outside its mathematical domain."""


class CalibrationError(RuntimeError):
    """Raised when a numeric search (bracketing, calibration) fails."""


def check_orders(orders: Iterable[int]) -> tuple[int, ...]:
    orders = tuple(orders)
    if not orders:
        raise PrivacyDomainError("order grid is empty")
    for a in orders:
        if int(a) != a or a < 2:
            raise PrivacyDomainError(f"Rényi orders must be integers >= 2, got {a!r}")
    if any(b <= a for a, b in zip(orders, orders[1:])):
        raise PrivacyDomainError("Rényi orders must be strictly increasing")
    return tuple(int(a) for a in orders)


@dataclass(frozen=True)
class MechanismSpec:
    """Subsampled Gaussian mechanism: sampling rate and noise multiplier."""

    gamma: float
    kappa: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise PrivacyDomainError(f"sampling rate must lie in [0, 1], got {self.gamma}")
        if not self.kappa > 0:
            raise PrivacyDomainError(f"noise multiplier must be positive, got {self.kappa}")


@dataclass(frozen=True)
class RdpCurve:
    """RDP bound ``eps[i]`` at order ``orders[i]``; ``inf`` means no guarantee."""

    orders: tuple[int, ...]
    eps: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "orders", check_orders(self.orders))
        eps = tuple(float(e) for e in self.eps)
        if len(eps) != len(self.orders):
            raise PrivacyDomainError("curve length does not match its order grid")
        if any(math.isnan(e) or e < 0 for e in eps):
            raise PrivacyDomainError("RDP values must be nonnegative")
        object.__setattr__(self, "eps", eps)

    @classmethod
    def zeros(cls, orders: Sequence[int] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), (0.0,) * len(orders))

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, float]) -> "RdpCurve":
        orders = tuple(sorted(mapping))
        return cls(orders, tuple(mapping[a] for a in orders))

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.orders, self.eps))

    def at(self, alpha: int) -> float:
        try:
            return self.eps[self.orders.index(alpha)]
        except ValueError:
            raise PrivacyDomainError(f"order {alpha} not in grid") from None

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise PrivacyDomainError("cannot compose curves on different order grids")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.eps, other.eps)))

    def scale(self, factor: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(factor * e for e in self.eps))


# --------------------------------------------------------------------------
# per-mechanism bounds


def gaussian_rdp(alpha: float, kappa: float) -> float:
    """RDP of the Gaussian sum mechanism at order ``alpha``: ``alpha / (2 (kappa/2)^2)``."""
    if not kappa > 0:
        raise PrivacyDomainError(f"noise multiplier must be positive, got {kappa}")
    if alpha <= 1:
        raise PrivacyDomainError(f"order must exceed 1, got {alpha}")
    return 2.0 * alpha / (kappa * kappa)


@lru_cache(maxsize=512)
def _log_binomials(alpha: int) -> np.ndarray:
    j = np.arange(alpha + 1)
    return gammaln(alpha + 1) - gammaln(j + 1) - gammaln(alpha - j + 1)


def _log_second_term(eps2: float) -> float:
    # log min{4 (e^eps2 - 1), 2 e^eps2}
    if eps2 <= 0.0:
        log_a = -math.inf
    elif eps2 < 1.0:
        log_a = math.log(4.0) + math.log(math.expm1(eps2))
    else:
        log_a = math.log(4.0) + eps2 + math.log1p(-math.exp(-eps2))
    log_b = math.log(2.0) + eps2
    return min(log_a, log_b)


def wor_subsampled_bound(alpha: int, gamma: float, kappa: float) -> float:
    """Without-replacement amplification bound for the Gaussian mechanism.

    This is the raw series only; :func:`subsampled_gaussian_rdp` additionally
    caps it by the unsubsampled Gaussian cost.
    """
    if gamma == 0.0:
        return 0.0
    log_gamma = math.log(gamma)
    log_binom = _log_binomials(alpha)
    terms = [0.0, 2 * log_gamma + log_binom[2] + _log_second_term(gaussian_rdp(2, kappa))]
    if alpha >= 3:
        j = np.arange(3, alpha + 1)
        eps_j = 2.0 * j / (kappa * kappa)
        rest = j * log_gamma + log_binom[3:] + math.log(2.0) + (j - 1) * eps_j
        return float(logsumexp(np.concatenate([terms, rest]))) / (alpha - 1)
    return float(logsumexp(terms)) / (alpha - 1)


def subsampled_gaussian_rdp(alpha: int, spec: MechanismSpec) -> float:
    """RDP at integer order ``alpha`` of the subsampled Gaussian mechanism.

    The amplification series is capped by the plain Gaussian bound, which is
    always valid because subsampling never increases the divergence.
    """
    if int(alpha) != alpha or alpha < 2:
        raise PrivacyDomainError(f"order must be an integer >= 2, got {alpha}")
    alpha = int(alpha)
    if spec.gamma == 0.0:
        return 0.0
    return min(wor_subsampled_bound(alpha, spec.gamma, spec.kappa), gaussian_rdp(alpha, spec.kappa))


def rdp_curve(spec: MechanismSpec, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    orders = check_orders(orders)
    return RdpCurve(orders, tuple(subsampled_gaussian_rdp(a, spec) for a in orders))


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, int]:
    """Convert an RDP curve to ``(epsilon, best_order)`` at the given delta."""
    if not 0.0 < delta < 1.0:
        raise PrivacyDomainError(f"delta must lie in (0, 1), got {delta}")
    if not any(curve.eps):
        # nothing was released: (0, 0)-DP, which the order-wise bound below only approaches
        return 0.0, curve.orders[-1]
    log_inv_delta = math.log(1.0 / delta)
    best = (math.inf, curve.orders[0])
    for a, e in zip(curve.orders, curve.eps):
        eps = e + log_inv_delta / (a - 1)
        if eps < best[0]:
            best = (eps, a)
    return best


# --------------------------------------------------------------------------
# inversion


def _brent_bracketed(f, lo: float, hi: float, rtol: float, max_iter: int = 500) -> float:
    """Shrink ``[lo, hi]`` with ``f(lo) > 0 >= f(hi)`` and return the safe end ``hi``.

    Brent-style: inverse quadratic / secant proposals, bisection whenever a
    proposal falls outside the bracket or the bracket fails to halve.
    """
    f_lo, f_hi = f(lo), f(hi)
    prev = None  # (x, fx) of the previously evaluated point, for IQI
    width = hi - lo
    for _ in range(max_iter):
        if hi - lo <= rtol * hi:
            return hi
        x = None
        if prev is not None and len({f_lo, f_hi, prev[1]}) == 3:
            xa, fa, xb, fb, xc, fc = lo, f_lo, hi, f_hi, prev[0], prev[1]
            x = (xa * fb * fc / ((fa - fb) * (fa - fc))
                 + xb * fa * fc / ((fb - fa) * (fb - fc))
                 + xc * fa * fb / ((fc - fa) * (fc - fb)))
        elif f_lo != f_hi:
            x = hi - f_hi * (hi - lo) / (f_hi - f_lo)
        mid = 0.5 * (lo + hi)
        if x is None or not lo < x < hi or (hi - lo) > 0.5 * width:
            x = mid
        # keep proposals off the endpoints so the bracket keeps shrinking
        guard = 0.25 * rtol * hi
        x = min(max(x, lo + guard), hi - guard)
        width = hi - lo
        fx = f(x)
        if fx > 0:
            prev = (lo, f_lo)
            lo, f_lo = x, fx
        else:
            prev = (hi, f_hi)
            hi, f_hi = x, fx
    return hi


def invert_noise_multiplier(gamma: float, alpha: int, eps_target: float, rtol: float = 1e-6) -> float:
    """Smallest noise multiplier (to ``rtol``) whose per-step RDP at ``alpha`` is ``<= eps_target``.

    The returned value always satisfies the target.
    """
    if not eps_target > 0:
        raise PrivacyDomainError(f"target must be positive, got {eps_target}")
    if not 0.0 < gamma <= 1.0:
        raise PrivacyDomainError(f"sampling rate must lie in (0, 1], got {gamma}")

    def excess(kappa: float) -> float:
        return subsampled_gaussian_rdp(alpha, MechanismSpec(gamma, kappa)) - eps_target

    kappa = 1.0
    if excess(kappa) > 0:
        lo = kappa
        for _ in range(MAX_BRACKET_STEPS):
            kappa *= 2.0
            if excess(kappa) <= 0:
                break
            lo = kappa
        else:
            raise CalibrationError("could not bracket the noise multiplier from above")
        hi = kappa
    else:
        hi = kappa
        for _ in range(MAX_BRACKET_STEPS):
            kappa *= 0.5
            if excess(kappa) > 0:
                break
            hi = kappa
        else:
            raise CalibrationError("could not bracket the noise multiplier from below")
        lo = kappa
    return _brent_bracketed(excess, lo, hi, rtol)


# --------------------------------------------------------------------------
# ledger


def _exact_sum(terms: Sequence[tuple[int, float]]) -> float:
    return math.fsum(count * value for count, value in terms)


@dataclass(frozen=True)
class PrivacyLedger:
    """Accumulated per-group RDP.

    Costs are stored per group as ``(kind, curve values) -> multiplicity`` so
    that composing the same curve ``T`` times yields exactly ``T * curve``.
    """

    orders: tuple[int, ...] = DEFAULT_ORDERS
    terms: Mapping[int, tuple] = field(default_factory=dict)
    step_count: int = 0
    reweight_count: int = 0

    @classmethod
    def empty(cls, groups: Iterable[int], orders: Sequence[int] = DEFAULT_ORDERS) -> "PrivacyLedger":
        return cls(check_orders(orders), {g: () for g in groups})

    @property
    def groups(self) -> tuple[int, ...]:
        return tuple(self.terms)

    def curve(self, group: int) -> RdpCurve:
        terms = self.terms[group]
        eps = tuple(
            _exact_sum([(count, values[i]) for (_, values), count in terms]) for i in range(len(self.orders))
        )
        return RdpCurve(self.orders, eps)

    @property
    def per_group(self) -> dict[int, RdpCurve]:
        return {g: self.curve(g) for g in self.terms}

    def uniform(self) -> RdpCurve:
        curves = list(self.per_group.values())
        eps = tuple(max(c.eps[i] for c in curves) for i in range(len(self.orders)))
        return RdpCurve(self.orders, eps)

    def to_dp(self, delta: float) -> dict[int, tuple[float, int]]:
        return {g: rdp_to_dp(c, delta) for g, c in self.per_group.items()}


def compose_ledger(
    ledger: PrivacyLedger,
    group_costs: Mapping[int, RdpCurve],
    kind: str | None = None,
    times: int = 1,
) -> PrivacyLedger:
    """Add ``times`` copies of each group's cost; ``kind`` advances a counter.

    ``kind`` is ``"step"`` (model update), ``"reweight"`` (loss release) or
    ``None``.
    """
    if kind not in (None, "step", "reweight"):
        raise ValueError(f"unknown step kind {kind!r}")
    if times < 0:
        raise ValueError("times must be nonnegative")
    terms = dict(ledger.terms)
    for g, curve in group_costs.items():
        if curve.orders != ledger.orders:
            raise PrivacyDomainError("cost curve grid does not match ledger grid")
        if g not in terms:
            raise PrivacyDomainError(f"group {g} not tracked by ledger")
        merged = dict(terms[g])
        key = (kind, curve.eps)
        merged[key] = merged.get(key, 0) + times
        terms[g] = tuple(merged.items())
    return PrivacyLedger(
        ledger.orders,
        terms,
        ledger.step_count + (times if kind == "step" else 0),
        ledger.reweight_count + (times if kind == "reweight" else 0),
    )


# --------------------------------------------------------------------------
# closed forms and calibration


def n_reweights(T: int, k: int | None) -> int:
    return 0 if not k else T // k


def total_epsilon_zhou(
    variant: str,
    T: int,
    k: int | None,
    M: int,
    group_sizes: Sequence[int],
    kappa_model: float,
    gamma_loss: float = 1.0,
    kappa_loss: float | None = None,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> dict[int, RdpCurve]:
    """Per-group RDP of the aZB family after ``T`` steps.

    ``base``/``weak`` sample ``M`` points from whichever group is drawn, so
    group ``g`` pays rate ``M / n_g`` every step; ``prop`` pays ``M / n``.
    """
    if variant not in ("base", "weak", "prop"):
        raise ValueError(f"unknown variant {variant!r}")
    if T < 1 or (k is not None and k < 1):
        raise PrivacyDomainError("T and k must be >= 1")
    orders = check_orders(orders)
    n = sum(group_sizes)
    if variant == "prop":
        if M > n:
            raise PrivacyDomainError(f"batch size {M} exceeds dataset size {n}")
        rates = [M / n] * len(group_sizes)
    else:
        for g, n_g in enumerate(group_sizes):
            if M > n_g:
                raise PrivacyDomainError(f"batch size {M} exceeds size {n_g} of group {g}")
        rates = [M / n_g for n_g in group_sizes]
    R = n_reweights(T, k)
    loss_curve = RdpCurve.zeros(orders)
    if R:
        if kappa_loss is None:
            raise PrivacyDomainError("loss noise multiplier required when reweighting")
        loss_curve = rdp_curve(MechanismSpec(gamma_loss, kappa_loss), orders)
    cache: dict[float, RdpCurve] = {}
    out = {}
    for g, rate in enumerate(rates):
        if rate not in cache:
            cache[rate] = rdp_curve(MechanismSpec(rate, kappa_model), orders)
        step = cache[rate]
        out[g] = RdpCurve(orders, tuple(T * s + R * l for s, l in zip(step.eps, loss_curve.eps)))
    return out


@dataclass(frozen=True)
class Calibration:
    kappa_model: float
    kappa_loss: float
    alpha: int
    epsilon: float


def composed_epsilon(
    kappa: float,
    delta: float,
    T: int,
    gamma_model: float,
    k: int | None = None,
    gamma_loss: float = 1.0,
    dro_scale: float = 25.0,
    orders: Sequence[int] = DEFAULT_ORDERS,
) -> tuple[float, int]:
    """(epsilon, best order) of ``T`` model steps plus ``floor(T/k)`` loss releases."""
    orders = check_orders(orders)
    R = n_reweights(T, k)
    model = rdp_curve(MechanismSpec(gamma_model, kappa), orders)
    total = model.scale(T)
    if R:
        total = total + rdp_curve(MechanismSpec(gamma_loss, dro_scale * kappa), orders).scale(R)
    return rdp_to_dp(total, delta)


def calibrate_base_noise(
    epsilon: float,
    delta: float,
    T: int,
    gamma_model: float,
    k: int | None = None,
    gamma_loss: float = 1.0,
    dro_scale: float = 25.0,
    orders: Sequence[int] = DEFAULT_ORDERS,
    kappa_range: tuple[float, float] = (0.1, 1e6),
) -> Calibration:
    """Find the model noise multiplier meeting ``(epsilon, delta)`` within +0/-1%.

    The loss noise multiplier is slaved to it as ``dro_scale * kappa_model``.
    """
    if not epsilon > 0:
        raise PrivacyDomainError("target epsilon must be positive")
    if not 0 < delta < 1:
        raise PrivacyDomainError("delta must lie in (0, 1)")
    if not dro_scale > 0:
        raise PrivacyDomainError("dro_scale must be positive")
    if not 0 < gamma_model <= 1:
        raise PrivacyDomainError(f"model sampling rate must lie in (0, 1], got {gamma_model}")

    def spent(kappa):
        return composed_epsilon(kappa, delta, T, gamma_model, k, gamma_loss, dro_scale, orders)

    lo, hi = kappa_range
    eps_hi, alpha_hi = spent(hi)
    if eps_hi > epsilon:
        raise CalibrationError(
            f"target epsilon={epsilon} unreachable: needs noise multiplier above {hi:g}"
        )
    eps_lo, _ = spent(lo)
    if eps_lo <= epsilon:
        raise CalibrationError(
            f"target epsilon={epsilon} is met even at noise multiplier {lo:g}; nothing to calibrate"
        )
    # bisection in log space; invariant: spent(lo) > epsilon >= spent(hi)
    best = (hi, eps_hi, alpha_hi)
    for _ in range(200):
        if best[1] >= 0.99 * epsilon:
            break
        mid = math.sqrt(lo * hi)
        eps_mid, alpha_mid = spent(mid)
        if eps_mid > epsilon:
            lo = mid
        else:
            hi = mid
            best = (mid, eps_mid, alpha_mid)
    kappa, eps, alpha = best
    return Calibration(kappa, dro_scale * kappa, alpha, eps)
