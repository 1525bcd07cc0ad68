"""Dataset transformations: frequency bucketing and training subsamples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .types import Dataset


@dataclass
class FrequencyBuckets:
    """Test rows grouped by how often their target item appears in training."""

    edges: list
    labels: list
    assignment: np.ndarray  # bucket index per test row
    train_counts: np.ndarray  # per item id

    def indices(self, bucket):
        return np.flatnonzero(self.assignment == bucket)

    @property
    def sizes(self):
        return np.bincount(self.assignment, minlength=len(self.labels))


def bucket_labels(edges):
    bounds = [0] + list(edges)
    labels = [f"[{a},{b})" for a, b in zip(bounds[:-1], bounds[1:])]
    labels.append(f"[{bounds[-1]},inf)")
    return labels


def split_by_frequency(dataset: Dataset, bucket_edges) -> FrequencyBuckets:
    """Assign every test sample to the frequency bucket of its target item."""
    edges = [int(e) for e in bucket_edges]
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] <= 0:
        raise ConfigError("bucket_edges must be positive and strictly increasing")
    if len(dataset.test) == 0:
        raise ConfigError("empty test set")
    counts = np.bincount(dataset.train.target_item, minlength=len(dataset.catalog))
    target_counts = counts[dataset.test.target_item]
    assignment = np.searchsorted(np.asarray(edges), target_counts, side="right")
    return FrequencyBuckets(
        edges=edges,
        labels=bucket_labels(edges),
        assignment=assignment.astype(np.int16),
        train_counts=counts,
    )


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform without-replacement subsample of the training split.

    Chronological order is preserved and the test split is untouched.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset.train)
    keep = int(round(n * fraction))
    if fraction == 1.0:
        train = dataset.train
    else:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(n, size=keep, replace=False))
        train = dataset.train.select(chosen)
    stats = dict(dataset.stats)
    stats["n_train"] = len(train)
    stats["subsample_fraction"] = float(fraction)
    return Dataset(
        config=dataset.config,
        seed=dataset.seed,
        catalog=dataset.catalog,
        train=train,
        test=dataset.test,
        query_tokens=dataset.query_tokens,
        query_len=dataset.query_len,
        query_item=dataset.query_item,
        stats=stats,
    )
