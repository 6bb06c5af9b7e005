"""Convergence and selection-quality diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "psrf",
    "inclusion_probabilities",
    "auroc",
    "classify",
    "confusion_metrics",
    "MetricReport",
]


def psrf(traces, use_second_half: bool = True) -> float:
    """Potential scale reduction factor of one scalar across chains.

    sqrt((n-1)/n + B/(nW)) from the between-chain variance of means B and
    the mean within-chain variance W, computed on the second half of each
    trace.  Values below 1 are floored to 1.  Identical constant chains
    give 1; constant chains at different levels give +inf.
    """
    arr = np.asarray(traces, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("psrf needs >= 2 chains of equal length")
    if use_second_half:
        arr = arr[:, arr.shape[1] // 2 :]
    n = arr.shape[1]
    if n < 2:
        raise ValueError("psrf needs >= 2 retained samples per chain")
    within = float(np.mean(np.var(arr, axis=1, ddof=1)))
    means = arr.mean(axis=1)
    b_over_n = float(np.var(means, ddof=1))
    if within == 0.0:
        return 1.0 if b_over_n == 0.0 else float("inf")
    value = np.sqrt((n - 1) / n + b_over_n / within)
    return float(max(1.0, value))


def inclusion_probabilities(chains) -> np.ndarray:
    """Marginal inclusion probability per variable, pooled over chains."""
    gammas = [c.stacked()["gamma"] for c in chains]
    pooled = np.concatenate([g for g in gammas if g.size], axis=0)
    if pooled.size == 0:
        raise ValueError("no post-burn-in samples")
    return pooled.mean(axis=0)


def auroc(scores, truth) -> float:
    """Probability a random positive outranks a random negative.

    Mann-Whitney form with half credit for ties.
    """
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth) != 0
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = float(ranks[truth].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def classify(incl_probs, rule: str, threshold: float | None = None, pi_hat: float | None = None):
    """Select variables either above a fixed threshold or as the top block.

    ``rule="fixed_threshold"`` selects strictly above ``threshold``.
    ``rule="top_pi_hat"`` selects the round(pi_hat * J) highest
    probabilities (round-half-to-even), ties broken toward lower index.
    """
    probs = np.asarray(incl_probs, dtype=float)
    if rule == "fixed_threshold":
        if threshold is None:
            raise ValueError("fixed_threshold needs a threshold")
        return (probs > threshold).astype(np.int8)
    if rule == "top_pi_hat":
        if pi_hat is None:
            raise ValueError("top_pi_hat needs pi_hat")
        m = int(round(pi_hat * probs.size))
        selected = np.zeros(probs.size, dtype=np.int8)
        if m > 0:
            order = np.lexsort((np.arange(probs.size), -probs))
            selected[order[:m]] = 1
        return selected
    raise ValueError(f"unknown rule {rule!r}")


@dataclass
class MetricReport:
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    selected: np.ndarray
    auroc: float = float("nan")
    thresholds: dict = field(default_factory=dict)


def confusion_metrics(selected, truth) -> MetricReport:
    """Confusion-matrix rates of a selection against ground truth."""
    selected = np.asarray(selected) != 0
    truth = np.asarray(truth) != 0
    if selected.shape != truth.shape:
        raise ValueError("selected and truth must have equal length")
    tp = int(np.sum(selected & truth))
    fp = int(np.sum(selected & ~truth))
    fn = int(np.sum(~selected & truth))
    tn = int(np.sum(~selected & ~truth))
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2.0 * prec * sens / (prec + sens) if prec + sens > 0 else 0.0
    return MetricReport(
        sensitivity=sens,
        specificity=spec,
        precision=prec,
        f1=f1,
        selected=selected.astype(np.int8),
    )
