"""Privacy mechanisms and accounting.

Randomized response for labels, the debiasing coefficients for losses trained
on randomized labels, per-example clipping with Gaussian noise, Poisson
sampling, an RDP accountant for the Poisson-subsampled Gaussian mechanism,
noise calibration, and the group-privacy conversion used for user-level DP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .errors import CalibrationError, ConfigurationError, DomainError, ShapeError
from .model import GradVector

DEFAULT_ORDERS = tuple(range(2, 257))
DEFAULT_DELTA = 1e-6


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair.

    ``delta`` is allowed to reach or exceed 1 so that group-privacy results with
    large caps can still be represented; such a budget is vacuous, and
    :meth:`check` rejects it where a usable target is needed.
    """

    epsilon: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise DomainError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not self.delta >= 0:
            raise DomainError(f"delta must be >= 0, got {self.delta}")

    def check(self) -> PrivacyBudget:
        if not self.delta < 1:
            raise ConfigurationError(f"delta must be < 1, got {self.delta}")
        return self


@dataclass(frozen=True)
class BudgetSplit:
    eps1: float
    eps2: float
    delta: float


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    eps_rdp: np.ndarray

    @property
    def infinite(self) -> np.ndarray:
        return ~np.isfinite(self.eps_rdp)


class Conversion(NamedTuple):
    epsilon: float
    order: int | None


def counter_rng(*keys: int) -> np.random.Generator:
    """Generator keyed by a tuple of integers, e.g. (run seed, step index)."""
    return np.random.default_rng([int(k) for k in keys])


# --------------------------------------------------------------------------
# label DP

def keep_probability(eps1: float) -> float:
    """e^eps / (1 + e^eps)."""
    return float(expit(eps1))


def randomized_response(labels, eps1: float, seed: int | np.random.Generator) -> np.ndarray:
    """Flip each bit independently with probability 1 / (1 + e^eps1)."""
    if not eps1 > 0:
        raise DomainError(f"randomized response needs eps1 > 0, got {eps1}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip = rng.random(labels.shape) < expit(-eps1)
    return np.where(flip, 1 - labels, labels)


def debias_coefficients(eps1: float, noisy_label):
    """Weights ``(c0, c1)`` so that ``c0*l(z, 0) + c1*l(z, 1)`` is unbiased for ``l(z, y)``.

    With keep probability p the weight on the opposite label is
    (1-p)/(1-2p) = -1/(e^eps - 1) and on the observed label -p/(1-2p) =
    1 + 1/(e^eps - 1). Vectorised over ``noisy_label``.
    """
    if not eps1 > 0:
        raise DomainError(f"debiasing needs eps1 > 0, got {eps1}")
    u = 1.0 / math.expm1(eps1)
    y = np.asarray(noisy_label)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("noisy labels must be 0 or 1")
    c_opposite, c_observed = -u, 1.0 + u
    c1 = np.where(y == 1, c_observed, c_opposite)
    c0 = np.where(y == 1, c_opposite, c_observed)
    if c0.ndim == 0:
        return float(c0), float(c1)
    return c0, c1


# --------------------------------------------------------------------------
# DP-SGD pieces

def add_noise(grad_sum: np.ndarray, clip_norm: float, sigma: float, expected_batch: float,
              rng: np.random.Generator) -> np.ndarray:
    """(grad_sum + N(0, C^2 sigma^2 I)) / B."""
    noise = rng.normal(0.0, clip_norm * sigma, size=grad_sum.shape) if sigma > 0 else 0.0
    return (grad_sum + noise) / expected_batch


def clip_and_noise(per_example_grads: Sequence[GradVector] | np.ndarray, clip_norm: float,
                   sigma: float, expected_batch: float, rng: np.random.Generator,
                   dim: int | None = None) -> GradVector:
    """Clip each gradient to L2 norm ``clip_norm``, sum, add noise, divide by ``expected_batch``.

    Accepts GradVectors sharing one scope or a 2-D array with one row per
    example. ``dim`` is only needed for an empty sequence.
    """
    if not clip_norm > 0:
        raise DomainError(f"clip norm must be > 0, got {clip_norm}")
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    scope = "full"
    if isinstance(per_example_grads, np.ndarray):
        if per_example_grads.ndim != 2:
            raise ShapeError("gradient array must be 2-D (examples x parameters)")
        g = per_example_grads
    else:
        grads = list(per_example_grads)
        scopes = {x.scope for x in grads}
        lengths = {len(x.values) for x in grads}
        if len(scopes) > 1 or len(lengths) > 1:
            raise ShapeError(f"gradients disagree in scope/length: {scopes}, {lengths}")
        if grads:
            scope = grads[0].scope
            g = np.stack([x.values for x in grads])
        elif dim is None:
            raise ShapeError("empty gradient list needs an explicit dim")
        else:
            g = np.zeros((0, dim))
    norms = np.sqrt(np.einsum("ij,ij->i", g, g))
    with np.errstate(divide="ignore"):
        factors = np.where(norms > clip_norm, clip_norm / norms, 1.0)
    total = np.zeros(g.shape[1])
    for row, f in zip(g, factors):  # fixed sequential reduction order
        total += row * f if f != 1.0 else row
    return GradVector(add_noise(total, clip_norm, sigma, expected_batch, rng), scope)


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices in ``range(n)``, each kept independently with probability ``q``."""
    if not 0 < q <= 1:
        raise DomainError(f"sampling rate must lie in (0, 1], got {q}")
    return np.flatnonzero(rng.random(n) < q)


# --------------------------------------------------------------------------
# accountant

def _log_expm1(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    big = x > 30
    out[big] = x[big] + np.log1p(-np.exp(-x[big]))
    with np.errstate(divide="ignore"):
        out[~big] = np.log(np.expm1(x[~big]))
    return out


def rdp_subsampled_gaussian(q: float, sigma: float, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """RDP of one step of the Poisson-subsampled Gaussian at integer orders.

    For q < 1 evaluates
    ``(1/(a-1)) * ln sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1) / (2 sigma^2))``
    in log space, rewritten as ``ln(1 + sum_{j>=2} C(a,j)(1-q)^(a-j) q^j expm1(...))``
    so tiny values keep full relative precision.
    """
    if not 0 < q <= 1:
        raise DomainError(f"q must lie in (0, 1], got {q}")
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    a = np.asarray(orders)
    if a.ndim != 1 or not np.all(a == np.round(a)) or np.any(a < 2):
        raise DomainError("orders must be integers >= 2")
    a = a.astype(np.int64)
    order_tuple = tuple(int(x) for x in a)
    if q == 1.0:
        return RdpCurve(order_tuple, a / (2.0 * sigma ** 2))

    j = np.arange(2, int(a.max()) + 1, dtype=np.float64)
    af = a[:, None].astype(np.float64)
    with np.errstate(invalid="ignore"):
        log_terms = (
            gammaln(af + 1) - gammaln(j + 1) - gammaln(af - j + 1)
            + (af - j) * math.log1p(-q) + j * math.log(q)
            + _log_expm1(j * (j - 1) / (2.0 * sigma ** 2))[None, :]
        )
    log_terms = np.where(j[None, :] <= af, log_terms, -np.inf)
    with np.errstate(over="ignore"):
        eps = np.logaddexp(0.0, logsumexp(log_terms, axis=1)) / (af[:, 0] - 1.0)
    eps[~np.isfinite(eps)] = np.inf
    return RdpCurve(order_tuple, eps)


def compose_and_convert(curve: RdpCurve, steps: int, delta: float) -> Conversion:
    """Compose ``steps`` identical mechanisms and convert to (eps, delta)-DP.

    Uses ``min_a steps * eps_rdp(a) + ln(1/delta) / (a - 1)``. Returns
    ``Conversion(inf, None)`` when every order is infinite.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    a = np.asarray(curve.orders, dtype=np.float64)
    eps = steps * np.asarray(curve.eps_rdp) + math.log(1.0 / delta) / (a - 1.0)
    if not np.any(np.isfinite(eps)):
        return Conversion(math.inf, None)
    i = int(np.nanargmin(np.where(np.isfinite(eps), eps, np.inf)))
    return Conversion(float(eps[i]), curve.orders[i])


def dpsgd_epsilon(q: float, sigma: float, steps: int, delta: float,
                  orders: Sequence[int] = DEFAULT_ORDERS) -> Conversion:
    return compose_and_convert(rdp_subsampled_gaussian(q, sigma, orders), steps, delta)


def calibrate_sigma(eps2: float, delta: float, q: float, steps: int,
                    orders: Sequence[int] = DEFAULT_ORDERS, sigma_lo: float = 0.3,
                    sigma_hi: float = 1000.0, tol: float = 1e-3) -> float:
    """Smallest noise multiplier found whose accounted epsilon lies in ``[eps2 - tol, eps2]``.

    Bisects (geometrically) on ``[sigma_lo, sigma_hi]``; raises
    :class:`CalibrationError` when the window cannot be reached in that bracket.
    """
    if not eps2 > 0:
        raise DomainError(f"eps2 must be > 0, got {eps2}")

    def eps_at(s):
        return dpsgd_epsilon(q, s, steps, delta, orders).epsilon

    lo, hi = sigma_lo, sigma_hi
    e_lo, e_hi = eps_at(lo), eps_at(hi)
    if e_hi > eps2:
        raise CalibrationError(f"eps={eps2} unreachable even at sigma={hi}", e_lo, e_hi)
    if e_lo <= eps2:
        if e_lo >= eps2 - tol:
            return lo
        raise CalibrationError(f"sigma={lo} already spends less than eps={eps2} - {tol}", e_lo, e_hi)
    for _ in range(200):
        if e_hi >= eps2 - tol:
            break
        mid = math.sqrt(lo * hi)
        if not lo < mid < hi:
            break
        e_mid = eps_at(mid)
        if e_mid <= eps2:
            hi, e_hi = mid, e_mid
        else:
            lo = mid
    # re-verify the returned sigma with a fresh accountant call
    if not eps_at(hi) <= eps2:
        raise CalibrationError("calibrated sigma failed re-verification", e_lo, e_hi)
    return hi


# --------------------------------------------------------------------------
# budget handling

def split_budget(epsilon: float, delta: float = DEFAULT_DELTA) -> BudgetSplit:
    """eps1 = min(0.6 eps, 3) for randomized response, the rest (and all of delta) for DP-SGD."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be > 0, got {epsilon}")
    # 3 * eps / 5 rounds once, so integer budgets give e.g. exactly 1.8 for eps = 3
    eps1 = min(3.0 * epsilon / 5.0, 3.0)
    return BudgetSplit(eps1, epsilon - eps1, delta)


def _group_delta_factor(eps: float, k: int) -> float:
    """sum_{j<k} e^{j eps} = (e^{k eps} - 1) / (e^eps - 1)."""
    if eps == 0:
        return float(k)
    num = math.expm1(k * eps) if k * eps < 700 else math.inf
    if math.isfinite(num):
        return num / math.expm1(eps)
    log_f = (k - 1) * eps + math.log(-math.expm1(-k * eps)) - math.log(-math.expm1(-eps))
    return math.exp(log_f) if log_f < 709 else math.inf


def group_privacy(eps: float, delta: float, k: int) -> PrivacyBudget:
    """Example-level (eps, delta) -> user-level guarantee with at most ``k`` examples per user."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return PrivacyBudget(k * eps, delta * _group_delta_factor(eps, k))


def _ulp_neighbours(x: float, n: int = 8):
    """x, then alternately one more ulp down / up, out to n ulps."""
    yield x
    down = up = x
    for _ in range(n):
        down = math.nextafter(down, -math.inf)
        up = math.nextafter(up, math.inf)
        yield down
        yield up


def user_level_calibrate(target: PrivacyBudget, k: int) -> PrivacyBudget:
    """Example-level budget whose :func:`group_privacy` image is ``target``.

    The closed-form inverse is nudged by a few ulps where needed so that the
    round trip reproduces ``target`` bit for bit; when no neighbour does, the
    largest value whose image stays within ``target`` is used.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if not target.epsilon > 0:
        raise DomainError("user-level calibration needs epsilon > 0")
    eps_u, delta_u = target.epsilon, target.delta

    eps, fallback = None, None
    for c in _ulp_neighbours(eps_u / k):
        if k * c == eps_u:
            eps = c
            break
        if k * c < eps_u and (fallback is None or c > fallback):
            fallback = c
    eps = eps if eps is not None else fallback

    factor = _group_delta_factor(eps, k)
    delta, fallback = None, None
    for d in _ulp_neighbours(delta_u / factor):
        if d < 0:
            continue
        if d * factor == delta_u:
            delta = d
            break
        if d * factor < delta_u and (fallback is None or d > fallback):
            fallback = d
    delta = delta if delta is not None else (fallback or 0.0)
    return PrivacyBudget(eps, delta)
