"""Ranking metrics: AUC, precision@N over request groups, per-user log rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def auc(scores, labels):
    """Probability that a random positive outranks a random negative.

    Rank-based computation; tied scores are credited half a win, which makes
    the result equal to exhaustive pair counting. Returns None when only one
    class is present (the metric is undefined there).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError(f"scores/labels must be equal-length vectors, got {scores.shape} vs {labels.shape}")
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average rank within each tie group (1-based)
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def precision_at_n(request_ids, scores, labels, item_ids, n=2):
    """Mean fraction of relevant items among each request's top-n.

    Groups are keyed by request id; groups with fewer than ``n`` candidates
    are skipped. Ranking within a group is by score descending with ties
    broken by item id ascending, so the result does not depend on input
    order. Returns None when no group is eligible.
    """
    request_ids = np.asarray(request_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    item_ids = np.asarray(item_ids)
    if not (request_ids.shape == scores.shape == labels.shape == item_ids.shape):
        raise ConfigError("request_ids/scores/labels/item_ids must share one shape")
    if request_ids.size == 0:
        return None

    # one lexsort puts every group together, best candidates first
    order = np.lexsort((item_ids, -scores, request_ids))
    rid = request_ids[order]
    lab = labels[order] > 0
    group_starts = np.concatenate(([0], np.flatnonzero(np.diff(rid) != 0) + 1))
    group_ends = np.concatenate((group_starts[1:], [rid.size]))
    fractions = []
    for s, e in zip(group_starts, group_ends):
        if e - s < n:
            continue
        fractions.append(lab[s : s + n].sum() / n)
    if not fractions:
        return None
    return float(np.mean(fractions))


def uctr_ucvr(user_ids, days, clicks, orders):
    """Clicks and orders per distinct user, computed per day then averaged."""
    user_ids = np.asarray(user_ids)
    days = np.asarray(days)
    clicks = np.asarray(clicks)
    orders = np.asarray(orders)
    if user_ids.size == 0:
        raise ConfigError("uctr_ucvr on an empty log")
    uctr_days = []
    ucvr_days = []
    for day in np.unique(days):
        sel = days == day
        n_users = np.unique(user_ids[sel]).size
        uctr_days.append(clicks[sel].sum() / n_users)
        ucvr_days.append(orders[sel].sum() / n_users)
    return float(np.mean(uctr_days)), float(np.mean(ucvr_days))


@dataclass
class MetricsReport:
    """Evaluation summary for one model on one split."""

    split: str
    task_auc: dict = field(default_factory=dict)
    task_p_at_n: dict = field(default_factory=dict)
    avg_auc: float | None = None
    avg_p_at_n: float | None = None
    bucket_auc: dict = field(default_factory=dict)  # label -> {task: auc, "avg": .., "n": count}
    uctr: float | None = None
    ucvr: float | None = None
    n_samples: int = 0
    step_count: int = 0
    runtime_seconds: float | None = None  # excluded from deterministic records

    def records(self):
        """Flat metric rows (metric, split, bucket, value); runtime excluded."""
        rows = []

        def row(metric, value, bucket=""):
            if value is None:
                rows.append({"metric": metric, "split": self.split, "bucket": bucket, "value": None})
            else:
                rows.append(
                    {"metric": metric, "split": self.split, "bucket": bucket, "value": float(value)}
                )

        for task, value in self.task_auc.items():
            row(f"auc/{task}", value)
        for task, value in self.task_p_at_n.items():
            row(f"p_at_2/{task}", value)
        row("auc/average", self.avg_auc)
        row("p_at_2/average", self.avg_p_at_n)
        for bucket, metrics in self.bucket_auc.items():
            for name, value in metrics.items():
                if name == "n":
                    row("bucket_size", value, bucket=bucket)
                else:
                    row(f"auc/{name}", value, bucket=bucket)
        row("uctr", self.uctr)
        row("ucvr", self.ucvr)
        row("n_samples", self.n_samples)
        row("step_count", self.step_count)
        return rows
