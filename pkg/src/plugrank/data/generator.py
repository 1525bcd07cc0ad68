"""Deterministic synthetic e-commerce world.

The generative process ties every label to latent item content so that
content-driven models have real signal to find, while item ids predict
clicks only through their learned popularity:

* each item has a latent content vector ``z``; titles are sampled from a
  token distribution conditioned on ``z`` and the image feature is a noisy
  linear map of ``z``
* each user has a preference vector drifting day to day as a damped random
  walk; the click probability is a logistic function of preference-content
  alignment plus a per-item bias
* order and cart events occur only on clicked impressions (funnel
  consistency holds by construction)
* warm-item exposure follows a shifted power law; a configured cold slice
  of the catalog never appears in training and surfaces only as test-time
  targets
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .types import Catalog, Dataset, GenConfig, SampleTable, SECONDS_PER_DAY


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sample_distinct_tokens(logits, lengths, rng):
    """Sample, per row, ``lengths[i]`` distinct tokens by softmax weight.

    Gumbel-top-k: the k largest of (logits + Gumbel noise) are a
    without-replacement sample from softmax(logits). Returns a
    [n, max_len] int32 array padded with -1.
    """
    n, vocab = logits.shape
    gumbel = -np.log(-np.log(rng.random(size=logits.shape)))
    keys = logits + gumbel
    max_len = int(lengths.max())
    top = np.argpartition(-keys, max_len - 1, axis=1)[:, :max_len].astype(np.int32)
    # order each row's winners by key so shorter prefixes are the top draws
    row_keys = np.take_along_axis(keys, top, axis=1)
    order = np.argsort(-row_keys, axis=1)
    top = np.take_along_axis(top, order, axis=1)
    out = np.full((n, max_len), -1, dtype=np.int32)
    cols = np.arange(max_len)[None, :]
    valid = cols < lengths[:, None]
    out[valid] = top[valid]
    return out


def _zipf_weights(n, exponent, shift):
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = (ranks + shift) ** (-exponent)
    return w / w.sum()


def generate(config: GenConfig, seed: int) -> Dataset:
    """Build the full synthetic dataset for (config, seed), bit-reproducibly."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(seed)
    dz = cfg.latent_dim

    # --- catalog ---------------------------------------------------------
    # latent content is cluster-structured: each item sits near its key
    # entity's anchor with within-cluster spread, so entities are genuinely
    # recoverable from content
    anchors = rng.normal(size=(cfg.n_entities, dz))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    entity_id = rng.integers(0, cfg.n_entities, size=cfg.n_items).astype(np.int32)
    w = cfg.entity_within
    within = rng.normal(0.0, 1.0 / np.sqrt(dz), size=(cfg.n_items, dz))
    latent = np.sqrt(max(1.0 - w * w, 0.0)) * anchors[entity_id] + w * within

    shop_id = rng.integers(0, cfg.n_shops, size=cfg.n_items, dtype=np.int32)
    brand_id = rng.integers(0, cfg.n_brands, size=cfg.n_items, dtype=np.int32)
    category_id = rng.integers(0, cfg.n_categories, size=cfg.n_items, dtype=np.int32)

    image_map = rng.normal(size=(cfg.image_dim, dz))
    image_feature = (
        latent @ image_map.T + cfg.image_noise * rng.normal(size=(cfg.n_items, cfg.image_dim))
    ).astype(np.float32)

    topic = rng.normal(size=(cfg.vocab_size, dz))
    # topical tokens plus per-item idiosyncratic token preferences (the
    # listing's own model names etc.), which make titles item-identifying
    title_logits = cfg.topic_sharpness * (latent @ topic.T)
    title_logits += rng.normal(0.0, cfg.title_idio_std, size=title_logits.shape)

    title_len = rng.integers(cfg.title_len_min, cfg.title_len_max + 1, size=cfg.n_items)
    title_tokens = np.full((cfg.n_items, cfg.title_len_max), -1, dtype=np.int32)
    sampled = _sample_distinct_tokens(title_logits, title_len, rng)
    title_tokens[:, : sampled.shape[1]] = sampled

    catalog = Catalog(
        shop_id=shop_id,
        brand_id=brand_id,
        category_id=category_id,
        entity_id=entity_id,
        title_tokens=title_tokens,
        title_len=title_len.astype(np.int16),
        image_feature=image_feature,
        latent_content=latent.astype(np.float32),
    )

    # --- exposure distribution -------------------------------------------
    n_cold = int(cfg.cold_fraction * cfg.n_items)
    item_perm = rng.permutation(cfg.n_items)
    cold_items = np.sort(item_perm[:n_cold])
    warm_items = item_perm[n_cold:]
    warm_weights = _zipf_weights(warm_items.size, cfg.zipf_exponent, cfg.zipf_shift)
    warm_cum = np.cumsum(warm_weights)

    # --- users -------------------------------------------------------------
    pref = np.empty((cfg.n_days, cfg.n_users, dz))
    pref[0] = rng.normal(0.0, 1.0 / np.sqrt(dz), size=(cfg.n_users, dz))
    rho = cfg.pref_retention
    for d in range(1, cfg.n_days):
        step = rng.normal(0.0, 1.0 / np.sqrt(dz), size=(cfg.n_users, dz))
        pref[d] = rho * pref[d - 1] + np.sqrt(1.0 - rho * rho) * step

    # per-item label biases (the only id->label pathway)
    bias_click = rng.normal(0.0, cfg.item_bias_std, size=cfg.n_items)
    bias_order = rng.normal(0.0, cfg.order_item_std, size=cfg.n_items)
    bias_cart = rng.normal(0.0, cfg.cart_item_std, size=cfg.n_items)
    ctx_weights = rng.normal(0.0, 1.0 / np.sqrt(cfg.context_dim), size=cfg.context_dim)

    # --- impressions -------------------------------------------------------
    def _make_requests(n_samples, day_lo, day_hi, cold_boost):
        n_req = -(-n_samples // cfg.request_size)  # ceil
        ts = rng.integers(
            day_lo * SECONDS_PER_DAY, day_hi * SECONDS_PER_DAY, size=n_req, dtype=np.int64
        )
        ts.sort(kind="stable")
        users = rng.integers(0, cfg.n_users, size=n_req, dtype=np.int32)
        # draw request_size distinct candidates per request
        cand = np.empty((n_req, cfg.request_size), dtype=np.int32)
        for j in range(cfg.request_size):
            u = rng.random(n_req)
            cand[:, j] = warm_items[np.searchsorted(warm_cum, u)]
        if cold_boost > 0.0 and cold_items.size:
            boost = rng.random((n_req, cfg.request_size)) < cold_boost
            cold_draw = cold_items[rng.integers(0, cold_items.size, size=(n_req, cfg.request_size))]
            cand[boost] = cold_draw[boost]
        # resolve duplicate candidates inside a request deterministically
        for _ in range(8):
            dup = np.zeros(n_req, dtype=bool)
            srt = np.sort(cand, axis=1)
            dup |= (np.diff(srt, axis=1) == 0).any(axis=1)
            if not dup.any():
                break
            redraw = rng.random((int(dup.sum()), cfg.request_size))
            cand[dup] = warm_items[np.searchsorted(warm_cum, redraw)]
        return ts, users, cand

    train_ts, train_users, train_cand = _make_requests(
        cfg.n_train, 0, cfg.n_days - 1, cold_boost=0.0
    )
    test_ts, test_users, test_cand = _make_requests(
        cfg.n_test, cfg.n_days - 1, cfg.n_days, cold_boost=cfg.test_cold_boost
    )

    def _expand(ts, users, cand, n_samples):
        n_req = ts.size
        rep_ts = np.repeat(ts, cfg.request_size)[:n_samples]
        rep_users = np.repeat(users, cfg.request_size)[:n_samples]
        targets = cand.reshape(-1)[:n_samples]
        positions = np.tile(np.arange(cfg.request_size, dtype=np.int8), n_req)[:n_samples]
        return rep_ts, rep_users, targets, positions

    tr_ts, tr_users, tr_targets, tr_pos = _expand(train_ts, train_users, train_cand, cfg.n_train)
    te_ts, te_users, te_targets, te_pos = _expand(test_ts, test_users, test_cand, cfg.n_test)

    all_ts = np.concatenate([tr_ts, te_ts])
    all_users = np.concatenate([tr_users, te_users])
    all_targets = np.concatenate([tr_targets, te_targets])
    all_pos = np.concatenate([tr_pos, te_pos])
    n_all = all_ts.size

    all_day = (all_ts // SECONDS_PER_DAY).astype(np.int64)
    dots = np.einsum("ij,ij->i", pref[all_day, all_users], latent[all_targets])
    context = rng.normal(size=(n_all, cfg.context_dim)).astype(np.float32)
    ctx_effect = context.astype(np.float64) @ ctx_weights

    p_click = _sigmoid(
        cfg.click_scale * dots + bias_click[all_targets] + cfg.context_scale * ctx_effect + cfg.click_bias
    )
    p_order = _sigmoid(cfg.order_scale * dots + bias_order[all_targets] + cfg.order_bias)
    p_cart = _sigmoid(cfg.cart_scale * dots + bias_cart[all_targets] + cfg.cart_bias)

    clicks = (rng.random(n_all) < p_click).astype(np.int8)
    orders = (clicks == 1) & (rng.random(n_all) < p_order)
    carts = (clicks == 1) & (rng.random(n_all) < p_cart)
    orders = orders.astype(np.int8)
    carts = carts.astype(np.int8)

    # --- behavior sequences (history of clicked items) ---------------------
    L = cfg.max_seq_len
    seq_items = np.zeros((n_all, L), dtype=np.int32)
    seq_ts = np.zeros((n_all, L), dtype=np.int32)
    seq_pos = np.zeros((n_all, L), dtype=np.int8)
    seq_len = np.zeros(n_all, dtype=np.int16)

    hist_item = np.zeros((cfg.n_users, L), dtype=np.int32)
    hist_ts = np.zeros((cfg.n_users, L), dtype=np.int32)
    hist_pos = np.zeros((cfg.n_users, L), dtype=np.int8)
    hist_count = np.zeros(cfg.n_users, dtype=np.int32)
    hist_head = np.zeros(cfg.n_users, dtype=np.int32)

    k = cfg.request_size
    n_req_total = -(-n_all // k)
    arange_l = np.arange(L)
    for r in range(n_req_total):
        lo = r * k
        hi = min(lo + k, n_all)
        u = int(all_users[lo])
        n = int(min(hist_count[u], L))
        if n:
            idx = (hist_head[u] - n + arange_l[:n]) % L
            seq_items[lo:hi, :n] = hist_item[u, idx]
            seq_ts[lo:hi, :n] = hist_ts[u, idx]
            seq_pos[lo:hi, :n] = hist_pos[u, idx]
            seq_len[lo:hi] = n
        for i in range(lo, hi):
            if clicks[i]:
                h = hist_head[u]
                hist_item[u, h] = all_targets[i]
                hist_ts[u, h] = all_ts[i]
                hist_pos[u, h] = all_pos[i]
                hist_head[u] = (h + 1) % L
                hist_count[u] += 1

    request_ids = np.repeat(np.arange(n_req_total, dtype=np.int32), k)[:n_all]

    def _table(sl):
        return SampleTable(
            user_id=all_users[sl].copy(),
            request_id=request_ids[sl].copy(),
            target_item=all_targets[sl].astype(np.int32),
            timestamp=all_ts[sl].copy(),
            display_position=all_pos[sl].copy(),
            click=clicks[sl].copy(),
            order=orders[sl].copy(),
            cart=carts[sl].copy(),
            context=context[sl].copy(),
            seq_len=seq_len[sl].copy(),
            seq_items=seq_items[sl].copy(),
            seq_ts=seq_ts[sl].copy(),
            seq_pos=seq_pos[sl].copy(),
        )

    train_table = _table(slice(0, cfg.n_train))
    test_table = _table(slice(cfg.n_train, n_all))

    # --- query/click pairs for encoder pretraining -------------------------
    clicked_train = np.flatnonzero(clicks[: cfg.n_train] == 1)
    n_pairs = min(cfg.n_query_pairs, clicked_train.size)
    if n_pairs == 0:
        raise ConfigError("no clicked training samples to form query pairs")
    pair_rows = rng.choice(clicked_train, size=n_pairs, replace=False)
    pair_items = all_targets[pair_rows].astype(np.int32)
    # most query words are a distinct subset of the clicked item's own title
    # (users type words that appear in listings); the rest are topical draws
    query_len = rng.integers(cfg.query_len_min, cfg.query_len_max + 1, size=n_pairs)
    query_len = np.minimum(query_len, title_len[pair_items])
    query_tokens = np.full((n_pairs, cfg.query_len_max), -1, dtype=np.int32)
    subset_keys = rng.random((n_pairs, cfg.title_len_max))
    subset_keys[title_tokens[pair_items] < 0] = np.inf
    picked = np.argsort(subset_keys, axis=1)
    topical = _sample_distinct_tokens(
        cfg.query_sharpness * (latent[pair_items] @ topic.T), query_len, rng
    )
    use_title = rng.random((n_pairs, cfg.query_len_max)) < cfg.query_title_frac
    for j in range(cfg.query_len_max):
        sel = query_len > j
        from_title = title_tokens[pair_items[sel], picked[sel, j]]
        query_tokens[sel, j] = np.where(use_title[sel, j], from_title, topical[sel, j])

    # --- summary statistics -------------------------------------------------
    train_counts = np.bincount(tr_targets, minlength=cfg.n_items)
    order_counts = np.sort(train_counts)[::-1]
    top_decile = order_counts[: max(1, cfg.n_items // 10)].sum()
    stats = {
        "n_items": cfg.n_items,
        "n_users": cfg.n_users,
        "n_train": int(len(train_table)),
        "n_test": int(len(test_table)),
        "n_query_pairs": int(n_pairs),
        "n_cold_items": int(cold_items.size),
        "mean_p_click": float(p_click.mean()),
        "train_click_rate": float(clicks[: cfg.n_train].mean()),
        "test_click_rate": float(clicks[cfg.n_train :].mean()),
        "train_order_rate": float(orders[: cfg.n_train].mean()),
        "train_cart_rate": float(carts[: cfg.n_train].mean()),
        "head_mass_top_decile": float(top_decile / max(1, train_counts.sum())),
        "train_end_timestamp": int(tr_ts.max()),
        "test_start_timestamp": int(te_ts.min()),
        "test_day": int(cfg.n_days - 1),
    }

    return Dataset(
        config=cfg,
        seed=int(seed),
        catalog=catalog,
        train=train_table,
        test=test_table,
        query_tokens=query_tokens,
        query_len=query_len.astype(np.int16),
        query_item=pair_items,
        stats=stats,
    )
