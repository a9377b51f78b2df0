"""Evaluation metrics: success rate, mean accuracy, mean IoU, error profile.

Success rate counts exact sequence matches; mean accuracy scores each
timestep; mean IoU compares the two sequences as action sets, order
agnostic. The error profile is the per-timestep wrong-prediction rate
against the relative node position (t-1)/(T-1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import make_batch, predict


class MetricsError(Exception):
    pass


@dataclass
class MetricsReport:
    success_rate: float
    mean_accuracy: float
    mean_iou: float
    n_samples: int
    horizon: int


@dataclass
class ErrorProfile:
    rates: list[float]       # per evaluated timestep
    positions: list[float]   # relative node positions, (t-1)/(T-1)
    n_samples: int


def _as_matrix(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    if len(preds) != len(gts):
        raise MetricsError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) == 0:
        raise MetricsError("empty evaluation set")
    try:
        p = np.asarray(preds, dtype=np.int64)
        g = np.asarray(gts, dtype=np.int64)
    except ValueError as exc:
        raise MetricsError("sequences must share one horizon") from exc
    if p.ndim != 2 or p.shape != g.shape:
        raise MetricsError(
            f"sequences must share one horizon: preds {p.shape}, gts {g.shape}")
    return p, g


def success_rate(preds, gts) -> float:
    """Fraction of samples matching the ground truth at every position."""
    p, g = _as_matrix(preds, gts)
    return int((p == g).all(axis=1).sum()) / p.shape[0]


def mean_accuracy(preds, gts) -> float:
    """Mean over samples of the per-position match fraction."""
    p, g = _as_matrix(preds, gts)
    return int((p == g).sum()) / (p.shape[0] * p.shape[1])


def mean_iou(preds, gts, multiset: bool = False) -> float:
    """Order-agnostic set overlap; duplicates collapse unless ``multiset``."""
    p, g = _as_matrix(preds, gts)
    scores = []
    for row_p, row_g in zip(p, g):
        if multiset:
            inter = union = 0
            for a in set(row_p) | set(row_g):
                cp = int((row_p == a).sum())
                cg = int((row_g == a).sum())
                inter += min(cp, cg)
                union += max(cp, cg)
        else:
            sp, sg = set(row_p.tolist()), set(row_g.tolist())
            inter, union = len(sp & sg), len(sp | sg)
        scores.append(inter / union)
    return math.fsum(scores) / len(scores)


def error_rate_distribution(preds, gts) -> ErrorProfile:
    """Per-timestep error rate; all sequences must share one horizon."""
    p, g = _as_matrix(preds, gts)
    n, t = p.shape
    rates = [int(c) / n for c in (p != g).sum(axis=0)]
    if t == 1:
        positions = [0.0]
    else:
        positions = [i / (t - 1) for i in range(t)]
    return ErrorProfile(rates=rates, positions=positions, n_samples=n)


def report(preds, gts, horizon: int | None = None) -> MetricsReport:
    p, g = _as_matrix(preds, gts)
    return MetricsReport(
        success_rate=success_rate(p, g),
        mean_accuracy=mean_accuracy(p, g),
        mean_iou=mean_iou(p, g),
        n_samples=p.shape[0],
        horizon=horizon if horizon is not None else p.shape[1],
    )


def evaluate(model, instances, restriction=None,
             batch_size: int = 512) -> tuple[MetricsReport, ErrorProfile]:
    """Deterministic metrics over a test split.

    ``restriction`` is an optional 1-based position subset, e.g. (1, 3, 5);
    metrics are then computed over those positions only, renormalized by
    the restricted length. Profile positions stay relative to the full
    horizon so restricted profiles remain comparable.
    """
    if not instances:
        raise MetricsError("empty evaluation split")
    horizon = instances[0].horizon
    preds = []
    gts = []
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo:lo + batch_size]
        batch = make_batch(chunk)
        preds.append(predict(model, batch))
        gts.append(batch.actions)
    p = np.concatenate(preds)
    g = np.concatenate(gts)
    if restriction is not None:
        cols = [r - 1 for r in restriction]
        if not cols or min(cols) < 0 or max(cols) >= horizon:
            raise MetricsError(f"restriction {restriction} out of range "
                               f"for horizon {horizon}")
        rel = [(c) / (horizon - 1) for c in cols]
        p, g = p[:, cols], g[:, cols]
        profile = ErrorProfile(
            rates=[float(r) for r in (p != g).mean(axis=0)],
            positions=rel, n_samples=p.shape[0])
        return report(p, g, horizon=horizon), profile
    return report(p, g, horizon=horizon), error_rate_distribution(p, g)
