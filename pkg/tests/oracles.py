"""Independent reference implementations used as test oracles.

None of these call into the package's numerical code paths; they re-derive
each quantity from its definition, trading speed for obviousness.
"""

import math

import mpmath
import numpy as np

from hybriddp.data import Example
from hybriddp.model import ModelParams


def _relu(x):
    return np.maximum(x, 0.0)


def forward_oracle(params: ModelParams, example: Example, truncated: bool = False) -> float:
    """Plain matrix arithmetic over explicitly named blocks; truncation by zero padding."""
    cfg = params.config
    sides = {False: [], True: []}
    for j, (v, s) in enumerate(zip(example.cat_values, cfg.cat_sensitive)):
        sides[s].append(params[f"emb{j}"][v])
    for x, s in zip(example.num_values, cfg.num_sensitive):
        sides[s].append(np.array([x]))

    def tower(prefix, x, n_layers):
        for i in range(n_layers):
            x = _relu(x @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"])
        return x

    g = tower("ns", np.concatenate(sides[False]), len(cfg.ns_hidden))
    if cfg.d_s == 0:
        h = np.zeros(0)
    elif truncated:
        h = np.zeros(cfg.d_s)
    else:
        h = tower("s", np.concatenate(sides[True]), len(cfg.s_hidden))
    x = np.concatenate([g, h])
    n_c = len(cfg.common_hidden) + 1
    for i in range(n_c):
        x = x @ params[f"c.W{i}"] + params[f"c.b{i}"]
        if i < n_c - 1:
            x = _relu(x)
    return float(x[0])


def bce_oracle(z: float, y: float) -> float:
    p = 1.0 / (1.0 + math.exp(-z))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def finite_difference_grad(loss, values: np.ndarray, coords, step: float = 1e-5) -> np.ndarray:
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        up, down = values.copy(), values.copy()
        up[i] += step
        down[i] -= step
        out[k] = (loss(up) - loss(down)) / (2 * step)
    return out


def pairwise_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def rdp_oracle(q: float, sigma: float, alpha: int, dps: int = 60) -> float:
    """(1/(a-1)) ln sum_{j=0..a} C(a,j) (1-q)^(a-j) q^j exp(j(j-1)/(2 sigma^2)) at high precision."""
    with mpmath.workdps(dps):
        q_, s_ = mpmath.mpf(q), mpmath.mpf(sigma)
        total = mpmath.fsum(
            mpmath.binomial(alpha, j) * (1 - q_) ** (alpha - j) * q_ ** j
            * mpmath.exp(mpmath.mpf(j * (j - 1)) / (2 * s_ ** 2))
            for j in range(alpha + 1)
        )
        return float(mpmath.log(total) / (alpha - 1))


def epsilon_oracle(q: float, sigma: float, steps: int, delta: float, orders=range(2, 257)) -> float:
    best = math.inf
    for a in orders:
        if q == 1:
            r = a / (2 * sigma ** 2)
        else:
            r = rdp_oracle(q, sigma, a, dps=30)
        best = min(best, steps * r + math.log(1 / delta) / (a - 1))
    return best


def bisect_sigma_oracle(eps2, delta, q, steps, lo=0.3, hi=50.0, iters=40, orders=range(2, 257)):
    """Plain arithmetic bisection for the smallest sigma with epsilon(sigma) <= eps2."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if epsilon_oracle(q, mid, steps, delta, orders) <= eps2:
            hi = mid
        else:
            lo = mid
    return hi


def geometric_series(eps: float, k: int) -> float:
    return math.fsum(math.exp(j * eps) for j in range(k))
