"""Dataset persistence: line-delimited JSON records plus a manifest.

Files written into a dataset directory:

* ``items.jsonl``        one object per catalog item
* ``train.jsonl``        one object per training sample
* ``test.jsonl``         one object per test sample
* ``query_pairs.jsonl``  one object per query/clicked-item pair
* ``manifest.json``      config, seed, counts, split boundaries, stats

Field names are fixed; see the writers below. Serialization is deterministic
for a fixed dataset, so regenerating with the same (config, seed) reproduces
the files byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .types import Catalog, Dataset, GenConfig, SampleTable

FORMAT_VERSION = 1


def _dump(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def _float_list(arr):
    return [float(v) for v in arr]


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cat = dataset.catalog

    with open(out / "items.jsonl", "w", encoding="utf-8") as f:
        for i in range(len(cat)):
            n = int(cat.title_len[i])
            f.write(_dump({
                "item_id": i,
                "shop_id": int(cat.shop_id[i]),
                "brand_id": int(cat.brand_id[i]),
                "category_id": int(cat.category_id[i]),
                "entity_id": int(cat.entity_id[i]),
                "title_tokens": [int(t) for t in cat.title_tokens[i, :n]],
                "image_feature": _float_list(cat.image_feature[i]),
                "latent_content": _float_list(cat.latent_content[i]),
            }) + "\n")

    for name, table in (("train.jsonl", dataset.train), ("test.jsonl", dataset.test)):
        with open(out / name, "w", encoding="utf-8") as f:
            for i in range(len(table)):
                n = int(table.seq_len[i])
                f.write(_dump({
                    "request_id": int(table.request_id[i]),
                    "user_id": int(table.user_id[i]),
                    "target_item_id": int(table.target_item[i]),
                    "timestamp": int(table.timestamp[i]),
                    "display_position": int(table.display_position[i]),
                    "click": int(table.click[i]),
                    "order": int(table.order[i]),
                    "cart": int(table.cart[i]),
                    "context_features": _float_list(table.context[i]),
                    "events": [
                        [int(table.seq_items[i, j]), int(table.seq_ts[i, j]), int(table.seq_pos[i, j])]
                        for j in range(n)
                    ],
                }) + "\n")

    with open(out / "query_pairs.jsonl", "w", encoding="utf-8") as f:
        for i in range(dataset.n_query_pairs):
            n = int(dataset.query_len[i])
            f.write(_dump({
                "query_tokens": [int(t) for t in dataset.query_tokens[i, :n]],
                "item_id": int(dataset.query_item[i]),
            }) + "\n")

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dataset.config.to_dict(),
        "seed": dataset.seed,
        "counts": {
            "items": len(cat),
            "train": len(dataset.train),
            "test": len(dataset.test),
            "query_pairs": dataset.n_query_pairs,
        },
        "split": {
            "train_end_timestamp": dataset.stats.get("train_end_timestamp"),
            "test_start_timestamp": dataset.stats.get("test_start_timestamp"),
            "test_day": dataset.stats.get("test_day"),
        },
        "stats": dataset.stats,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    if not (src / "manifest.json").exists():
        raise ConfigError(f"no manifest.json under {src}")
    with open(src / "manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format version {manifest.get('format_version')}")
    config = GenConfig.from_dict(manifest["config"])

    items = [json.loads(line) for line in open(src / "items.jsonl", encoding="utf-8")]
    n_items = len(items)
    title_tokens = np.full((n_items, config.title_len_max), -1, dtype=np.int32)
    title_len = np.zeros(n_items, dtype=np.int16)
    shop = np.zeros(n_items, dtype=np.int32)
    brand = np.zeros(n_items, dtype=np.int32)
    cat_id = np.zeros(n_items, dtype=np.int32)
    ent = np.zeros(n_items, dtype=np.int32)
    image = np.zeros((n_items, config.image_dim), dtype=np.float32)
    latent = np.zeros((n_items, config.latent_dim), dtype=np.float32)
    for rec in items:
        i = rec["item_id"]
        shop[i] = rec["shop_id"]
        brand[i] = rec["brand_id"]
        cat_id[i] = rec["category_id"]
        ent[i] = rec["entity_id"]
        toks = rec["title_tokens"]
        title_len[i] = len(toks)
        title_tokens[i, : len(toks)] = toks
        image[i] = rec["image_feature"]
        latent[i] = rec["latent_content"]
    catalog = Catalog(
        shop_id=shop, brand_id=brand, category_id=cat_id, entity_id=ent,
        title_tokens=title_tokens, title_len=title_len,
        image_feature=image, latent_content=latent,
    )

    def _load_table(path):
        rows = [json.loads(line) for line in open(path, encoding="utf-8")]
        n = len(rows)
        L = config.max_seq_len
        arrays = {
            "user_id": np.zeros(n, dtype=np.int32),
            "request_id": np.zeros(n, dtype=np.int32),
            "target_item": np.zeros(n, dtype=np.int32),
            "timestamp": np.zeros(n, dtype=np.int64),
            "display_position": np.zeros(n, dtype=np.int8),
            "click": np.zeros(n, dtype=np.int8),
            "order": np.zeros(n, dtype=np.int8),
            "cart": np.zeros(n, dtype=np.int8),
            "context": np.zeros((n, config.context_dim), dtype=np.float32),
            "seq_len": np.zeros(n, dtype=np.int16),
            "seq_items": np.zeros((n, L), dtype=np.int32),
            "seq_ts": np.zeros((n, L), dtype=np.int32),
            "seq_pos": np.zeros((n, L), dtype=np.int8),
        }
        for i, rec in enumerate(rows):
            arrays["user_id"][i] = rec["user_id"]
            arrays["request_id"][i] = rec["request_id"]
            arrays["target_item"][i] = rec["target_item_id"]
            arrays["timestamp"][i] = rec["timestamp"]
            arrays["display_position"][i] = rec["display_position"]
            arrays["click"][i] = rec["click"]
            arrays["order"][i] = rec["order"]
            arrays["cart"][i] = rec["cart"]
            arrays["context"][i] = rec["context_features"]
            events = rec["events"]
            arrays["seq_len"][i] = len(events)
            for j, (item, ts, pos) in enumerate(events):
                arrays["seq_items"][i, j] = item
                arrays["seq_ts"][i, j] = ts
                arrays["seq_pos"][i, j] = pos
        return SampleTable(**arrays)

    train = _load_table(src / "train.jsonl")
    test = _load_table(src / "test.jsonl")

    pairs = [json.loads(line) for line in open(src / "query_pairs.jsonl", encoding="utf-8")]
    n_pairs = len(pairs)
    query_tokens = np.full((n_pairs, config.query_len_max), -1, dtype=np.int32)
    query_len = np.zeros(n_pairs, dtype=np.int16)
    query_item = np.zeros(n_pairs, dtype=np.int32)
    for i, rec in enumerate(pairs):
        toks = rec["query_tokens"]
        query_len[i] = len(toks)
        query_tokens[i, : len(toks)] = toks
        query_item[i] = rec["item_id"]

    return Dataset(
        config=config,
        seed=manifest["seed"],
        catalog=catalog,
        train=train,
        test=test,
        query_tokens=query_tokens,
        query_len=query_len,
        query_item=query_item,
        stats=manifest["stats"],
    )
