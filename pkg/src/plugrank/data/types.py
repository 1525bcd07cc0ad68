"""Synthetic e-commerce world: configuration and record types.

The dataset is held columnar (one numpy array per field) because training
consumes whole batches; the record dataclasses are row views used for
persistence and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict

import numpy as np

from ..errors import ConfigError

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the generative process. Defaults are the desk-scale setup."""

    n_items: int = 10000
    n_users: int = 2000
    n_train: int = 200000
    n_test: int = 20000
    latent_dim: int = 16
    image_dim: int = 32
    vocab_size: int = 1000
    n_entities: int = 200
    max_seq_len: int = 50
    context_dim: int = 8
    n_shops: int = 500
    n_brands: int = 300
    n_categories: int = 100
    n_days: int = 14
    request_size: int = 5
    title_len_min: int = 4
    title_len_max: int = 16
    query_len_min: int = 3
    query_len_max: int = 8
    topic_sharpness: float = 4.0
    query_sharpness: float = 4.0
    query_title_frac: float = 0.85
    title_idio_std: float = 2.5
    entity_within: float = 0.4
    image_noise: float = 0.1
    zipf_exponent: float = 1.4
    zipf_shift: float = 2.0
    cold_fraction: float = 0.10
    test_cold_boost: float = 0.15
    head_mass_min: float = 0.4
    pref_retention: float = 0.97
    click_scale: float = 8.0
    click_bias: float = -1.1
    item_bias_std: float = 0.5
    context_scale: float = 0.3
    order_scale: float = 4.0
    order_bias: float = -1.9
    order_item_std: float = 0.3
    cart_scale: float = 3.0
    cart_bias: float = -1.5
    cart_item_std: float = 0.3
    n_query_pairs: int = 30000

    def validate(self):
        positive = (
            "n_items", "n_users", "n_train", "n_test", "latent_dim", "image_dim",
            "vocab_size", "n_entities", "max_seq_len", "context_dim", "n_shops",
            "n_brands", "n_categories", "n_days", "request_size", "n_query_pairs",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"GenConfig.{name} must be positive")
        if self.n_days < 3:
            raise ConfigError("need at least 3 days for the train/update/eval windows")
        if not (0.0 <= self.cold_fraction < 1.0):
            raise ConfigError("cold_fraction must be in [0, 1)")
        if not (0.0 <= self.test_cold_boost <= 1.0):
            raise ConfigError("test_cold_boost must be in [0, 1]")
        if not (0.0 < self.pref_retention <= 1.0):
            raise ConfigError("pref_retention must be in (0, 1]")
        if self.title_len_min < 1 or self.title_len_max < self.title_len_min:
            raise ConfigError("invalid title length range")
        if self.query_len_min < 1 or self.query_len_max < self.query_len_min:
            raise ConfigError("invalid query length range")
        if self.title_len_max > 16:
            raise ConfigError("title length capped at 16 tokens")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ItemRecord:
    """One catalog item with id-type side information and content."""

    item_id: int
    shop_id: int
    brand_id: int
    category_id: int
    title_tokens: list
    image_feature: np.ndarray
    entity_id: int
    latent_content: np.ndarray  # generator ground truth, never a model input


@dataclass
class BehaviorEvent:
    item_id: int
    timestamp: int
    display_position: int


@dataclass
class BehaviorSequence:
    """Time-ordered clicked items of one user (most recent events kept)."""

    user_id: int
    events: list

    def validate(self, max_len):
        if len(self.events) > max_len:
            raise ConfigError(f"sequence longer than {max_len}")
        ts = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ConfigError("event timestamps must be nondecreasing")
        return self


@dataclass
class Sample:
    """One impression with its funnel labels and the user's history snapshot."""

    user_id: int
    behavior: BehaviorSequence
    target_item_id: int
    request_id: int
    context_features: np.ndarray
    click: int
    order: int
    cart: int
    timestamp: int
    display_position: int


@dataclass
class QueryItemPair:
    """Search query tokens paired with the clicked item."""

    query_tokens: list
    item_id: int


class Catalog:
    """Columnar item store."""

    def __init__(self, shop_id, brand_id, category_id, entity_id, title_tokens,
                 title_len, image_feature, latent_content):
        self.shop_id = shop_id
        self.brand_id = brand_id
        self.category_id = category_id
        self.entity_id = entity_id
        self.title_tokens = title_tokens  # [n_items, 16] padded with -1
        self.title_len = title_len
        self.image_feature = image_feature
        self.latent_content = latent_content

    def __len__(self):
        return self.shop_id.shape[0]

    def item(self, i) -> ItemRecord:
        n = int(self.title_len[i])
        return ItemRecord(
            item_id=int(i),
            shop_id=int(self.shop_id[i]),
            brand_id=int(self.brand_id[i]),
            category_id=int(self.category_id[i]),
            title_tokens=[int(t) for t in self.title_tokens[i, :n]],
            image_feature=self.image_feature[i],
            entity_id=int(self.entity_id[i]),
            latent_content=self.latent_content[i],
        )


class SampleTable:
    """Columnar sample store; rows share index across all arrays."""

    COLUMNS = (
        "user_id", "request_id", "target_item", "timestamp", "display_position",
        "click", "order", "cart", "context", "seq_len", "seq_items", "seq_ts", "seq_pos",
    )

    def __init__(self, **arrays):
        missing = set(self.COLUMNS) - set(arrays)
        if missing:
            raise ConfigError(f"SampleTable missing columns: {sorted(missing)}")
        for name in self.COLUMNS:
            setattr(self, name, arrays[name])
        n = self.user_id.shape[0]
        for name in self.COLUMNS:
            if getattr(self, name).shape[0] != n:
                raise ConfigError(f"column {name} length mismatch")

    def __len__(self):
        return self.user_id.shape[0]

    @property
    def day(self):
        return self.timestamp // SECONDS_PER_DAY

    def select(self, indices) -> "SampleTable":
        return SampleTable(**{name: getattr(self, name)[indices] for name in self.COLUMNS})

    def row(self, i) -> Sample:
        n = int(self.seq_len[i])
        events = [
            BehaviorEvent(int(self.seq_items[i, j]), int(self.seq_ts[i, j]), int(self.seq_pos[i, j]))
            for j in range(n)
        ]
        return Sample(
            user_id=int(self.user_id[i]),
            behavior=BehaviorSequence(user_id=int(self.user_id[i]), events=events),
            target_item_id=int(self.target_item[i]),
            request_id=int(self.request_id[i]),
            context_features=self.context[i],
            click=int(self.click[i]),
            order=int(self.order[i]),
            cart=int(self.cart[i]),
            timestamp=int(self.timestamp[i]),
            display_position=int(self.display_position[i]),
        )


@dataclass
class Dataset:
    """Generated world: catalog, chronologically split samples, query pairs."""

    config: GenConfig
    seed: int
    catalog: Catalog
    train: SampleTable
    test: SampleTable
    query_tokens: np.ndarray  # [n_pairs, query_len_max] padded with -1
    query_len: np.ndarray
    query_item: np.ndarray
    stats: dict = field(default_factory=dict)

    def query_pair(self, i) -> QueryItemPair:
        n = int(self.query_len[i])
        return QueryItemPair(
            query_tokens=[int(t) for t in self.query_tokens[i, :n]],
            item_id=int(self.query_item[i]),
        )

    @property
    def n_query_pairs(self):
        return self.query_item.shape[0]

    def train_day_indices(self, day_lo, day_hi):
        """Row indices of train samples with day in [day_lo, day_hi]."""
        day = self.train.day
        return np.flatnonzero((day >= day_lo) & (day <= day_hi))
