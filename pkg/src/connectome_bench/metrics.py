"""Evaluation metrics and the between-model significance test."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import stats

from .connectome import ConnectomeWarning
from .data_io import CLASSIFICATION


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: targets contain a single class")
    ranks = stats.rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pearson_r(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"predictions {pred.shape} and targets {target.shape} differ in shape")
    pc = pred - pred.mean()
    tc = target - target.mean()
    denom = math.sqrt(float(pc @ pc) * float(tc @ tc))
    if denom == 0.0:
        warnings.warn("Pearson r undefined for zero-variance input; returning 0",
                      ConnectomeWarning, stacklevel=2)
        return 0.0
    return float(np.clip((pc @ tc) / denom, -1.0, 1.0))


def evaluate(predictions, targets, task: str) -> float:
    if task == CLASSIFICATION:
        p = np.asarray(predictions, dtype=np.float64)
        if p.size and (p.min() < 0 or p.max() > 1):
            raise ValueError("classification scores must lie in [0, 1]")
        return auroc(p, targets)
    return pearson_r(predictions, targets)


def metric_name(task: str) -> str:
    return "auroc" if task == CLASSIFICATION else "pearson_r"


def welch_test(runs_a, runs_b) -> float:
    """Two-sided Welch t-test p-value between two run lists."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each run list needs at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        # near-identical samples trip scipy's cancellation check; the value is still exact enough
        warnings.filterwarnings("ignore", "Precision loss", RuntimeWarning)
        p = stats.ttest_ind(a, b, equal_var=False).pvalue
    return float(min(max(p, 0.0), 1.0))


significance_test = welch_test
