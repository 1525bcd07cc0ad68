"""Columnar sample tables -> padded model-ready arrays.

Sequences are kept left-aligned and chronological; rows longer than the crop
keep their most recent events. A row with no history gets one synthetic
"null" event (item -1, position 0, oldest recency bucket) so that pooling
always sees at least one valid position; the null item resolves to the
all-zero modal feature row and to the out-of-vocabulary id row.
"""

from __future__ import annotations

import numpy as np

NULL_ITEM = -1


def recency_bucket(delta_seconds, n_buckets):
    """Log2 bucket of the gap between an event and the prediction moment.

    bucket = min(n_buckets - 1, floor(log2(max(delta, 1)))); gaps from one
    second to weeks land in distinct buckets.
    """
    delta = np.maximum(np.asarray(delta_seconds, dtype=np.int64), 1)
    return np.minimum(np.log2(delta).astype(np.int64), n_buckets - 1)


def pack_sequences(table, crop_len, n_recency_buckets, max_position):
    """Extract padded sequence arrays from a sample table.

    Returns dict with items/pos/rec [n, k], mask [n, k], plus per-sample
    target, labels, context, request/user/day columns.
    """
    n = len(table)
    lengths = table.seq_len.astype(np.int64)
    k = int(min(max(lengths.max(initial=1), 1), crop_len))
    start = np.maximum(lengths - k, 0)
    cols = start[:, None] + np.arange(k)[None, :]
    valid = cols < lengths[:, None]
    cols_safe = np.clip(cols, 0, table.seq_items.shape[1] - 1)
    rows = np.arange(n)[:, None]

    items = np.where(valid, table.seq_items[rows, cols_safe], NULL_ITEM).astype(np.int32)
    pos = np.where(valid, table.seq_pos[rows, cols_safe], 0).astype(np.int64)
    np.clip(pos, 0, max_position - 1, out=pos)
    ev_ts = np.where(valid, table.seq_ts[rows, cols_safe], 0).astype(np.int64)
    delta = table.timestamp[:, None].astype(np.int64) - ev_ts
    rec = np.where(valid, recency_bucket(delta, n_recency_buckets), n_recency_buckets - 1)

    mask = valid.copy()
    empty = lengths == 0
    if empty.any():
        mask[empty, 0] = True
        rec[empty, 0] = n_recency_buckets - 1
        pos[empty, 0] = 0

    return {
        "items": items,
        "pos": pos,
        "rec": rec.astype(np.int64),
        "mask": mask,
        "target": table.target_item.astype(np.int64),
        "click": table.click.astype(np.float32),
        "order": table.order.astype(np.float32),
        "cart": table.cart.astype(np.float32),
        "context": table.context.astype(np.float32),
        "request_id": table.request_id,
        "user_id": table.user_id,
        "day": table.day,
    }


def slice_batch(packed, idx):
    """Select rows and trim sequence padding to the batch's longest row."""
    mask = packed["mask"][idx]
    k = int(mask.any(axis=0).nonzero()[0].max() + 1)
    return {
        "items": packed["items"][idx, :k],
        "pos": packed["pos"][idx, :k],
        "rec": packed["rec"][idx, :k],
        "mask": mask[:, :k],
        "target": packed["target"][idx],
        "click": packed["click"][idx],
        "order": packed["order"][idx],
        "cart": packed["cart"][idx],
        "context": packed["context"][idx],
    }


def epoch_batches(n, batch_size, rng=None, lengths=None, block_batches=50):
    """Yield row-index arrays for one epoch.

    With ``rng`` the order is shuffled; with ``lengths`` rows are
    stable-sorted by length inside blocks of ``block_batches`` batches, which
    trims padding waste without fixing batch composition across epochs.
    """
    order = np.arange(n) if rng is None else rng.permutation(n)
    if lengths is not None and rng is not None:
        block = batch_size * block_batches
        chunks = []
        for lo in range(0, n, block):
            chunk = order[lo : lo + block]
            chunks.append(chunk[np.argsort(lengths[chunk], kind="stable")])
        order = np.concatenate(chunks) if chunks else order
    for lo in range(0, n, batch_size):
        batch = order[lo : lo + batch_size]
        if batch.size:
            yield batch
