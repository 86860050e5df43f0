"""Agreement statistics between predicted and reference scores."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateDistributionError, ShapeError


def _pairs(predicted, truth):
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.size} predictions vs {t.size} references")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ValueError("scores must be finite")
    return p, t


def lcc(predicted, truth) -> float:
    """Pearson correlation, two-pass (centre first, then reduce)."""
    p, t = _pairs(predicted, truth)
    if p.size < 2:
        raise DegenerateDistributionError("need at least two pairs for a correlation")
    pc = p - p.mean()
    tc = t - t.mean()
    sp = np.sqrt(np.dot(pc, pc))
    st = np.sqrt(np.dot(tc, tc))
    if sp == 0.0 or st == 0.0:
        raise DegenerateDistributionError("degenerate distribution: zero variance")
    return float(np.clip(np.dot(pc, tc) / (sp * st), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], x.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    return ranks


def srcc(predicted, truth) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    p, t = _pairs(predicted, truth)
    return lcc(average_ranks(p), average_ranks(t))


def mse(predicted, truth) -> float:
    p, t = _pairs(predicted, truth)
    d = p - t
    return float(np.mean(d * d))
