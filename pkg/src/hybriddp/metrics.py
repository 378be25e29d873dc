"""AUC, relative AUC loss and seed aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, UndefinedMetricError


@dataclass(frozen=True)
class EvalResult:
    auc: float
    n_pos: int
    n_neg: int
    relative_auc_loss_pct: float | None = None


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties (a tie counts 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(scores, labels, auc_np: float | None = None) -> EvalResult:
    labels = np.asarray(labels)
    a = auc(scores, labels)
    n_pos = int((labels == 1).sum())
    rel = relative_auc_loss(a, auc_np) if auc_np is not None else None
    return EvalResult(a, n_pos, len(labels) - n_pos, rel)


def relative_auc_loss(auc_value: float, auc_np: float) -> float:
    """100 * ((1 - AUC) - (1 - AUC_np)) / (1 - AUC_np), in percent."""
    if auc_np >= 1:
        raise DomainError("relative AUC loss is undefined for a baseline AUC of 1")
    return 100.0 * ((1.0 - auc_value) - (1.0 - auc_np)) / (1.0 - auc_np)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for a single value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("aggregate needs at least one value")
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return float(x.mean()), std


def format_mean_std(values: Sequence[float], digits: int = 3) -> str:
    m, s = aggregate(values)
    if not (math.isfinite(m) and math.isfinite(s)):
        return "nan"
    return f"{m:.{digits}f} ± {s:.{digits}f}"
