"""Synthetic dataset generation, transformation, and persistence."""

from .types import (
    BehaviorEvent,
    BehaviorSequence,
    Catalog,
    Dataset,
    GenConfig,
    ItemRecord,
    QueryItemPair,
    Sample,
    SampleTable,
    SECONDS_PER_DAY,
)
from .generator import generate
from .ops import FrequencyBuckets, bucket_labels, split_by_frequency, subsample
from .io import load_dataset, save_dataset

__all__ = [
    "BehaviorEvent",
    "BehaviorSequence",
    "Catalog",
    "Dataset",
    "FrequencyBuckets",
    "GenConfig",
    "ItemRecord",
    "QueryItemPair",
    "SECONDS_PER_DAY",
    "Sample",
    "SampleTable",
    "bucket_labels",
    "generate",
    "load_dataset",
    "save_dataset",
    "split_by_frequency",
    "subsample",
]
