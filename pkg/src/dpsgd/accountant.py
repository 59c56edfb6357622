"""Renyi-DP accountant for the Poisson-subsampled Gaussian mechanism.

Per-step RDP is evaluated at integer orders with the binomial expansion,
composed linearly over steps and converted to (epsilon, delta)-DP. All sums
run in log space so large orders do not overflow.

The analysis assumes every example joins a batch independently with
probability q. Training batches are drawn by shuffling instead; the gap is
the usual one between the accountant and shuffled mini-batching.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import special

from dpsgd.errors import CalibrationError, ConfigurationError, DomainError, InvalidOrderError

DEFAULT_ORDERS: Tuple[int, ...] = tuple(range(2, 513))

CONVERSIONS = ("improved", "classic")

SAMPLING_NOTE = (
    "accounting assumes Poisson subsampling with rate q = B/N; "
    "training uses shuffled mini-batches"
)

_SIGMA_MAX = 1e6


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class SamplingSpec:
    q: float
    sigma: float
    steps: int

    def __post_init__(self):
        _check_q_sigma(self.q, self.sigma)
        if int(self.steps) != self.steps or self.steps < 0:
            raise DomainError(f"steps must be a non-negative integer, got {self.steps}")


@dataclass(frozen=True)
class RdpCurve:
    """Per-step RDP of one mechanism invocation over a grid of orders."""

    orders: Tuple[int, ...]
    values: np.ndarray

    def composed(self, steps: int) -> np.ndarray:
        return steps * self.values

    def to_csv(self, steps: int = 1) -> str:
        lines = ["order,rdp_per_step,rdp_total"]
        for order, value in zip(self.orders, self.values):
            lines.append(f"{order},{float(value)!r},{float(steps * value)!r}")
        return "\n".join(lines) + "\n"


def _check_q_sigma(q: float, sigma: float) -> None:
    if not 0 < q <= 1:
        raise DomainError(f"sampling ratio q must lie in (0, 1], got {q}")
    if not sigma > 0 or not math.isfinite(sigma):
        raise DomainError(f"noise multiplier must be a positive finite number, got {sigma}")


def _check_order(order) -> int:
    if isinstance(order, bool) or int(order) != order or order < 2:
        raise InvalidOrderError(f"Renyi order must be an integer >= 2, got {order}")
    return int(order)


def rdp_subsampled_gaussian(q: float, sigma: float, order: int) -> float:
    """RDP of one step of the subsampled Gaussian mechanism at an integer order.

    Args:
      q: sampling ratio in (0, 1].
      sigma: noise multiplier (noise std over the l2 sensitivity).
      order: Renyi order, an integer >= 2.

    Returns:
      The per-step RDP value in nats.
    """
    _check_q_sigma(q, sigma)
    alpha = _check_order(order)
    if q == 1.0:
        return alpha / (2 * sigma**2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(k + 1)
        - special.gammaln(alpha - k + 1)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + k * (k - 1) / (2 * sigma**2)
    )
    # The exact value is >= 0; clamp rounding noise around q -> 0.
    return max(float(special.logsumexp(log_terms)) / (alpha - 1), 0.0)


@functools.lru_cache(maxsize=256)
def _cached_curve(q: float, sigma: float, orders: Tuple[int, ...]) -> np.ndarray:
    values = np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])
    values.setflags(write=False)
    return values


def rdp_curve(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    orders = tuple(_check_order(a) for a in orders)
    if not orders:
        raise ConfigurationError("empty Renyi order grid")
    _check_q_sigma(q, sigma)
    return RdpCurve(orders, _cached_curve(float(q), float(sigma), orders))


def epsilon_from_rdp(
    orders: Sequence[int], rdp_total: np.ndarray, delta: float, conversion: str = "improved"
) -> Tuple[float, int]:
    """Converts composed RDP values to epsilon at ``delta``; returns (eps, order)."""
    if len(orders) == 0:
        raise ConfigurationError("empty Renyi order grid")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    a = np.asarray(orders, dtype=np.float64)
    rdp_total = np.asarray(rdp_total, dtype=np.float64)
    if conversion == "classic":
        eps = rdp_total + math.log(1 / delta) / (a - 1)
    elif conversion == "improved":
        eps = rdp_total + np.log1p(-1 / a) - (math.log(delta) + np.log(a)) / (a - 1)
    else:
        raise ConfigurationError(f"unknown conversion {conversion!r}; expected one of {CONVERSIONS}")
    best = int(np.argmin(eps))
    return max(float(eps[best]), 0.0), int(orders[best])


def epsilon_from_curve(
    curve: RdpCurve, steps: int, delta: float, conversion: str = "improved"
) -> Tuple[float, Optional[int]]:
    if steps == 0:
        return 0.0, None
    return epsilon_from_rdp(curve.orders, curve.composed(steps), delta, conversion)


def epsilon_of(
    spec: SamplingSpec,
    delta: float,
    orders: Sequence[int] = DEFAULT_ORDERS,
    conversion: str = "improved",
) -> Tuple[float, Optional[int]]:
    """Epsilon spent after ``spec.steps`` steps, and the order achieving it.

    ``conversion`` selects the RDP to (epsilon, delta) bound: "improved"
    (default) or "classic", eps = T * rdp + log(1/delta) / (order - 1).
    With zero steps nothing has been released and (0.0, None) is returned.
    """
    if len(orders) == 0:
        raise ConfigurationError("empty Renyi order grid")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if spec.steps == 0:
        return 0.0, None
    return epsilon_from_curve(rdp_curve(spec.q, spec.sigma, orders), spec.steps, delta, conversion)


def calibrate_steps(
    budget: PrivacyBudget,
    q: float,
    sigma: float,
    orders: Sequence[int] = DEFAULT_ORDERS,
    conversion: str = "improved",
) -> int:
    """Largest number of steps whose epsilon stays within ``budget``.

    Returns 0 when even a single step overspends.
    """
    curve = rdp_curve(q, sigma, orders)

    def fits(steps: int) -> bool:
        return epsilon_from_curve(curve, steps, budget.delta, conversion)[0] <= budget.epsilon

    if not fits(1):
        return 0
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
        if hi > 2**62:
            # Epsilon stays bounded: the per-step RDP underflowed to zero.
            return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def calibrate_sigma(
    budget: PrivacyBudget,
    q: float,
    steps: int,
    orders: Sequence[int] = DEFAULT_ORDERS,
    conversion: str = "improved",
    rtol: float = 1e-6,
) -> float:
    """Smallest noise multiplier meeting ``budget`` after ``steps`` steps.

    Bisection on sigma, whose result is feasible and within ``rtol`` (relative)
    of the infeasible side of the bracket.

    Raises:
      CalibrationError: no sigma below 1e6 meets the budget.
    """
    if int(steps) != steps or steps < 1:
        raise DomainError(f"steps must be an integer >= 1, got {steps}")

    def eps(sigma: float) -> float:
        return epsilon_from_curve(rdp_curve(q, sigma, orders), steps, budget.delta, conversion)[0]

    hi = 1.0
    while eps(hi) > budget.epsilon:
        hi *= 2
        if hi > _SIGMA_MAX:
            raise CalibrationError(
                f"no sigma <= {_SIGMA_MAX:g} achieves epsilon {budget.epsilon} "
                f"(delta={budget.delta}, q={q}, steps={steps})"
            )
    lo = hi / 2
    while eps(lo) <= budget.epsilon:
        hi, lo = lo, lo / 2
        if lo < 1e-8:
            return hi
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= budget.epsilon:
            hi = mid
        else:
            lo = mid
    return hi
