"""Update clipping, masked Gaussian noise and Renyi-DP accounting.

The accountant tracks the Poisson-subsampled Gaussian mechanism at a fixed
grid of Renyi orders, composes rounds additively and converts to (eps, delta)
with ``eps = min_a rdp(a) + log(1/delta) / (a - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sparsify import MaskMatrix, SparseDelta
from .tensor import Rng, gaussian_sample

DEFAULT_ORDERS: tuple = (1.25, 1.5) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)


class PrivacyError(RuntimeError):
    pass


class CalibrationError(PrivacyError):
    pass


@dataclass(frozen=True)
class PrivacyParams:
    clip: float
    sigma: float
    sample_prob: float
    num_clients: int
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.sample_prob <= 1:
            raise ValueError(f"sample_prob must be in (0, 1], got {self.sample_prob}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")

    @property
    def noise_std(self) -> float:
        """Per-coordinate, per-client noise std: sigma * C / sqrt(q * N)."""
        return self.sigma * self.clip / math.sqrt(self.sample_prob * self.num_clients)


def clip_update(delta: SparseDelta, clip: float) -> SparseDelta:
    """Scale ``delta`` by min(1, C / ||delta||). Returns the same object when no scaling applies."""
    if not clip > 0:
        raise ValueError(f"clip must be > 0, got {clip}")
    if delta.norm <= clip:
        return delta
    factor = clip / delta.norm
    return SparseDelta.from_layers([v * factor for v in delta.layers], delta.mask)


def add_masked_noise(delta: SparseDelta, privacy: PrivacyParams, mask: MaskMatrix | None,
                     rng: Rng | np.random.Generator) -> SparseDelta:
    """Add N(0, (sigma C)^2 / (qN)) noise on the support of ``mask``.

    Mask-zero coordinates of masked layers stay exactly zero; dense layers
    (mask slot ``None``, or ``mask=None`` altogether) are noised everywhere.
    Extra layers beyond the mask (e.g. a transmitted head) are treated as dense.
    """
    std = privacy.noise_std
    if std == 0:
        return delta
    gen = rng.generator() if isinstance(rng, Rng) else rng
    out = []
    for j, v in enumerate(delta.layers):
        noise = gaussian_sample(gen, v.shape, std)
        m = None if mask is None or j >= len(mask.layers) else mask.layers[j]
        out.append(v + noise if m is None else np.where(m, v + noise, 0.0))
    return SparseDelta.from_layers(out, delta.mask)


# --- accountant -----------------------------------------------------------

def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(mu_mix / mu_0)^alpha] for integer alpha via the binomial expansion."""
    log_q, log_1q = math.log(q), math.log1p(-q)
    total = -math.inf
    for j in range(alpha + 1):
        term = (_log_binom(alpha, j) + j * log_q + (alpha - j) * log_1q
                + (j * j - j) / (2.0 * sigma * sigma))
        total = _log_add(total, term)
    return total


def rdp_of_subsampled_gaussian(q: float, sigma: float, order: float) -> float:
    """Per-round RDP at ``order`` of the Poisson-subsampled Gaussian mechanism.

    Integer orders are exact. A fractional order is bounded by linear
    interpolation of ``(a - 1) * rdp(a)`` between neighbouring integers, which
    is valid because that quantity is convex in ``a``. Returns ``inf`` when
    ``sigma == 0``.
    """
    if not order > 1:
        raise ValueError(f"order must be > 1, got {order}")
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return order / (2.0 * sigma * sigma)
    if float(order).is_integer():
        return max(_log_a_int(q, sigma, int(order)), 0.0) / (order - 1)
    lo, hi = math.floor(order), math.ceil(order)
    log_lo = 0.0 if lo == 1 else max(_log_a_int(q, sigma, lo), 0.0)
    log_hi = max(_log_a_int(q, sigma, hi), 0.0)
    w = order - lo
    return ((1 - w) * log_lo + w * log_hi) / (order - 1)


def rdp_vector(q: float, sigma: float, orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    return np.array([rdp_of_subsampled_gaussian(q, sigma, a) for a in orders])


@dataclass(frozen=True)
class RdpLedger:
    """Composed RDP per order.

    Increments are kept and summed with ``math.fsum``, so the total is the
    correctly rounded exact sum: T identical rounds give exactly ``T * rdp``.
    """

    orders: tuple = DEFAULT_ORDERS
    terms: tuple = ()
    rounds: int = 0

    def __post_init__(self):
        if list(self.orders) != sorted(self.orders) or min(self.orders) <= 1:
            raise ValueError("orders must be ascending and > 1")

    @property
    def rdp(self) -> np.ndarray:
        if not self.terms:
            return np.zeros(len(self.orders))
        return np.array([math.fsum(col) for col in zip(*self.terms)])


def compose(ledger: RdpLedger, increment: Sequence[float], rounds: int = 1) -> RdpLedger:
    """Add ``rounds`` copies of a per-round RDP vector to the ledger."""
    inc = np.asarray(increment, dtype=np.float64)
    if inc.shape != (len(ledger.orders),):
        raise ValueError(f"increment has {inc.size} orders, ledger has {len(ledger.orders)}")
    if np.any(inc < 0):
        raise ValueError("RDP increments must be non-negative")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    term = inc if rounds == 1 else inc * rounds
    return RdpLedger(ledger.orders, ledger.terms + (term,), ledger.rounds + rounds)


def epsilon_at_delta(ledger: RdpLedger, delta: float) -> tuple[float, float]:
    """(epsilon, minimizing order) for the composed ledger at target ``delta``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if ledger.rounds == 0:
        raise PrivacyError("no rounds composed yet")
    orders = np.asarray(ledger.orders)
    eps = ledger.rdp + math.log(1.0 / delta) / (orders - 1.0)
    if not np.any(np.isfinite(eps)):
        return math.inf, float(orders[0])
    i = int(np.nanargmin(eps))
    return float(eps[i]), float(orders[i])


def epsilon_after(q: float, sigma: float, rounds: int, delta: float,
                  orders: Sequence[float] = DEFAULT_ORDERS) -> tuple[float, float]:
    ledger = compose(RdpLedger(tuple(orders)), rdp_vector(q, sigma, orders), rounds)
    return epsilon_at_delta(ledger, delta)


SIGMA_GRID_FACTOR = 1.01
_GRID_LO, _GRID_HI = -700, 1389  # 1.01**-700 ~ 1e-3, 1.01**1389 ~ 1e6


def sigma_grid_point(i: int) -> float:
    return SIGMA_GRID_FACTOR ** i


def calibrate_sigma(epsilon: float, delta: float, q: float, rounds: int,
                    orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """Smallest sigma on the grid 1.01**i with epsilon after ``rounds`` <= target."""
    if not (epsilon > 0 and 0 < delta < 1 and 0 < q <= 1 and rounds >= 1):
        raise ValueError(f"bad calibration arguments eps={epsilon} delta={delta} q={q} T={rounds}")

    def ok(i: int) -> bool:
        return epsilon_after(q, sigma_grid_point(i), rounds, delta, orders)[0] <= epsilon

    lo, hi = _GRID_LO, _GRID_HI
    if not ok(hi):
        eps_hi = epsilon_after(q, sigma_grid_point(hi), rounds, delta, orders)[0]
        raise CalibrationError(
            f"epsilon={epsilon} unattainable with sigma <= {sigma_grid_point(hi):.3g}: "
            f"best epsilon {eps_hi:.4g} (delta={delta}, q={q}, rounds={rounds})")
    if ok(lo):
        return sigma_grid_point(lo)
    while hi - lo > 1:  # invariant: not ok(lo), ok(hi)
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return sigma_grid_point(hi)


def privacy_report(ledger: RdpLedger, round_index: int, privacy: PrivacyParams) -> dict:
    """Per-round JSON-ready privacy summary."""
    if ledger.rounds:
        eps, best = epsilon_at_delta(ledger, privacy.delta)
    else:
        eps, best = 0.0, None
    return {
        "round": round_index,
        "sigma": privacy.sigma,
        "C": privacy.clip,
        "q": privacy.sample_prob,
        "orders": [float(a) for a in ledger.orders],
        "rdp": [float(r) for r in ledger.rdp],
        "epsilon": eps,
        "delta": privacy.delta,
        "best_order": best,
    }
