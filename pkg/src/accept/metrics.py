"""Evaluation metrics with pinned edge-case conventions.

All metrics are computed from scratch so the zero-denominator behavior is
exactly what the tests pin down: binary F1 returns 0 when precision and
recall are both 0, Matthews correlation returns 0 when any confusion
marginal is 0, and Pearson refuses constant inputs outright.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = ["MetricError", "METRIC_NAMES", "metric", "fewshot_report"]

METRIC_NAMES = ("accuracy", "f1_binary", "matthews", "pearson")


class MetricError(ValueError):
    """Unknown metric name or undefined metric value."""


def _as_arrays(preds, golds):
    p = np.asarray(preds)
    g = np.asarray(golds)
    if p.shape != g.shape or p.ndim != 1:
        raise MetricError(f"preds and golds must be equal-length vectors, got {p.shape} vs {g.shape}")
    if p.size == 0:
        raise MetricError("empty inputs")
    return p, g


def _confusion_binary(p, g):
    p = p.astype(np.int64)
    g = g.astype(np.int64)
    for name, arr in (("preds", p), ("golds", g)):
        bad = np.setdiff1d(np.unique(arr), [0, 1])
        if bad.size:
            raise MetricError(f"binary metric: {name} contain non-binary value {bad[0]}")
    tp = int(((p == 1) & (g == 1)).sum())
    tn = int(((p == 0) & (g == 0)).sum())
    fp = int(((p == 1) & (g == 0)).sum())
    fn = int(((p == 0) & (g == 1)).sum())
    return tp, tn, fp, fn


def metric(name: str, preds, golds) -> float:
    """Evaluate one named metric.

    Args:
        name: one of METRIC_NAMES.
        preds: predictions (class ids, or real values for pearson).
        golds: references, same length.
    """
    if name not in METRIC_NAMES:
        raise MetricError(f"unknown metric {name!r}, expected one of {METRIC_NAMES}")
    p, g = _as_arrays(preds, golds)

    if name == "accuracy":
        return float((p == g).mean())

    if name == "f1_binary":
        tp, tn, fp, fn = _confusion_binary(p, g)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall == 0.0:
            return 0.0
        return 2.0 * precision * recall / (precision + recall)

    if name == "matthews":
        tp, tn, fp, fn = _confusion_binary(p, g)
        denom_sq = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if denom_sq == 0:
            return 0.0
        return (tp * tn - fp * fn) / math.sqrt(denom_sq)

    # pearson
    x = p.astype(np.float64)
    y = g.astype(np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise MetricError("pearson is undefined for constant input")
    return float((xc * yc).sum() / (sx * sy))


def fewshot_report(values) -> tuple[float, float]:
    """Mean and population standard deviation of per-seed scores.

    Population (ddof=0) rather than sample std: the seeds enumerate the
    protocol, they are not a sample from a larger pool.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise MetricError(f"fewshot_report needs a non-empty vector, got shape {v.shape}")
    return float(v.mean()), float(v.std(ddof=0))
