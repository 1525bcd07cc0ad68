"""Surrogate text and vision encoders for item content.

The text encoder embeds token sequences (search queries and item titles) and
is trained contrastively: a query must match its clicked item's title against
the other items in the batch. The vision encoder maps image features to a
compact representation trained to predict the item's key entity. Once
trained, both encoders are frozen and their outputs concatenated per item
into a fixed-length modal feature.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .errors import ConfigError, TrainingDivergedError
from .nn import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QMConfig:
    """Contrastive query-matching setup; similarity is cosine."""

    temperature: float = 0.05
    batch_size: int = 64

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")


@dataclass(frozen=True)
class EncoderTrainConfig:
    text_dim: int = 32
    vision_dim: int = 32
    qm: QMConfig = field(default_factory=QMConfig)
    qm_epochs: int = 4
    qm_lr: float = 1e-3
    ep_epochs: int = 15
    ep_lr: float = 1e-3
    ep_batch_size: int = 256
    holdout_fraction: float = 0.1


class TextEncoder:
    """Token embedding, mask-aware mean pooling, two-layer projection."""

    def __init__(self, vocab_size, dim, seed, hidden=None):
        self.vocab_size = vocab_size
        self.dim = dim
        self.pset = nn.ParamSet()
        hidden = hidden or 2 * dim
        # norm-free surrogate nets need fan-in-scaled init to train in few steps
        self.embedding = nn.Embedding(self.pset, "text/token_embedding", vocab_size, dim, seed, std=0.1)
        self.pool = nn.MLP(self.pset, "text/pool", [dim, hidden, dim], seed, std="fan_in")
        self.frozen = False

    def encode(self, tokens) -> Tensor:
        """Encode padded token rows ([B, n], -1 = padding) to [B, dim]."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        mask = tokens >= 0
        if not mask.any(axis=1).all():
            raise ConfigError("cannot encode an empty token sequence")
        emb = self.embedding(np.where(mask, tokens, 0))
        pooled = nn.masked_mean(emb, mask)
        return self.pool(pooled)

    def freeze(self):
        self.pset.set_trainable(False)
        self.frozen = True


class VisionEncoder:
    """Two-layer projection of image features plus a linear entity head."""

    def __init__(self, image_dim, dim, n_entities, seed, hidden=None):
        self.image_dim = image_dim
        self.dim = dim
        self.n_entities = n_entities
        self.pset = nn.ParamSet()
        hidden = hidden or 2 * dim
        self.trunk = nn.MLP(self.pset, "vision/trunk", [image_dim, hidden, dim], seed, std="fan_in")
        self.entity_head = nn.Linear(self.pset, "vision/entity_head", dim, n_entities, seed, std="fan_in")
        self.frozen = False

    def features(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        return self.trunk(images)

    def entity_logits(self, images) -> Tensor:
        return self.entity_head(self.features(images))

    def freeze(self):
        self.pset.set_trainable(False)
        self.frozen = True


def qm_loss(query_emb: Tensor, item_emb: Tensor, temperature: float) -> Tensor:
    """In-batch contrastive loss: each query against every item in the batch.

    Mean over queries of -log softmax(cos(q_i, y_j)/tau)[j=i].
    """
    if query_emb.shape != item_emb.shape or query_emb.ndim != 2:
        raise ConfigError(
            f"query/item embeddings must be equal [B, d], got {query_emb.shape} vs {item_emb.shape}"
        )
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    for name, t in (("query", query_emb), ("item", item_emb)):
        norms = np.linalg.norm(t.data, axis=1)
        if (norms == 0).any():
            raise ConfigError(f"zero-norm {name} embedding: cosine similarity undefined")

    def normalize(t):
        sq = (t * t).sum(axis=1, keepdims=True)
        return t / nn.sqrt(sq)

    q = normalize(query_emb)
    y = normalize(item_emb)
    sims = nn.matmul(q, nn.transpose(y, (1, 0))) * (1.0 / temperature)
    b = sims.shape[0]
    eye = Tensor(np.eye(b, dtype=sims.dtype))
    positives = (sims * eye).sum(axis=1)
    return (nn.logsumexp(sims, axis=1) - positives).mean()


def ep_loss(image_logits: Tensor, entity_ids) -> Tensor:
    """Mean negative log-likelihood of the true entity under softmax logits."""
    entity_ids = np.asarray(entity_ids)
    k = image_logits.shape[-1]
    if entity_ids.size and (entity_ids.min() < 0 or entity_ids.max() >= k):
        bad = entity_ids[(entity_ids < 0) | (entity_ids >= k)][0]
        raise ConfigError(f"entity id {int(bad)} outside [0, {k})")
    return nn.cross_entropy_logits(image_logits, entity_ids)


def _check_finite(loss, step, last):
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"loss diverged at step {step}; last finite loss {last}", step=step, last_finite_loss=last
        )
    return value


def distinct_item_order(item_ids, rng):
    """Shuffled row order where same-item rows are spread round-robin apart.

    Contrastive batches treat other rows as negatives, so two pairs of the
    same item in one batch would be false negatives; this ordering keeps
    consecutive windows (almost) duplicate-free.
    """
    order = rng.permutation(item_ids.size)
    by_item = {}
    for r in order:
        by_item.setdefault(int(item_ids[r]), []).append(int(r))
    out = []
    keys = list(by_item)
    while keys:
        out.extend(by_item[k].pop() for k in keys)
        keys = [k for k in keys if by_item[k]]
    return np.asarray(out, dtype=np.int64)


def retrieval_accuracy(text_enc, query_tokens, item_ids, item_tokens_table, batch=64, rng=None):
    """Top-1 in-batch retrieval over batches of pairs with distinct items."""
    rng = rng or np.random.default_rng(0)
    # one pair per distinct item, shuffled
    _, first_rows = np.unique(np.asarray(item_ids), return_index=True)
    rows = rng.permutation(first_rows)
    hits = 0
    total = 0
    with nn.no_grad():
        for lo in range(0, rows.size - batch + 1, batch):
            idx = rows[lo : lo + batch]
            q = text_enc.encode(query_tokens[idx]).data
            y = text_enc.encode(item_tokens_table[np.asarray(item_ids)[idx]]).data
            qn = q / np.linalg.norm(q, axis=1, keepdims=True)
            yn = y / np.linalg.norm(y, axis=1, keepdims=True)
            sims = qn @ yn.T
            hits += (sims.argmax(axis=1) == np.arange(batch)).sum()
            total += batch
    return hits / max(total, 1)


def train_encoders(dataset, cfg: EncoderTrainConfig, seed: int):
    """Train text (query matching) and vision (entity prediction) encoders.

    Returns (text_encoder, vision_encoder, history); both encoders come back
    frozen. With zero configured epochs the encoders equal their
    initialization (still frozen).
    """
    gen = dataset.config
    if dataset.n_query_pairs == 0 or len(dataset.catalog) == 0:
        raise ConfigError("need query pairs and a catalog to train encoders")
    text_enc = TextEncoder(gen.vocab_size, cfg.text_dim, seed)
    vision_enc = VisionEncoder(gen.image_dim, cfg.vision_dim, gen.n_entities, seed)
    history = {"qm_loss": [], "qm_retrieval": [], "ep_loss": [], "ep_accuracy": []}
    rng = np.random.default_rng(seed)

    # --- query matching over (query, clicked item title) pairs -------------
    n_pairs = dataset.n_query_pairs
    n_hold = int(n_pairs * cfg.holdout_fraction)
    perm = rng.permutation(n_pairs)
    hold, fit = perm[:n_hold], perm[n_hold:]
    titles = dataset.catalog.title_tokens
    b = cfg.qm.batch_size
    opt = nn.Adam(text_enc.pset)
    step = 0
    last = None
    total_steps = max(1, cfg.qm_epochs * (fit.size // b))
    for epoch in range(cfg.qm_epochs):
        order = fit[distinct_item_order(dataset.query_item[fit], rng)]
        losses = []
        for lo in range(0, fit.size - b + 1, b):
            idx = order[lo : lo + b]
            q_emb = text_enc.encode(dataset.query_tokens[idx])
            i_emb = text_enc.encode(titles[dataset.query_item[idx]])
            loss = qm_loss(q_emb, i_emb, cfg.qm.temperature)
            last = _check_finite(loss, step, last)
            losses.append(last)
            opt.zero_grad()
            loss.backward()
            opt.step(nn.linear_lr(step, total_steps, cfg.qm_lr, cfg.qm_lr * 0.25))
            step += 1
        acc = retrieval_accuracy(
            text_enc, dataset.query_tokens[hold], dataset.query_item[hold], titles,
            rng=np.random.default_rng(12345),
        ) if n_hold >= b else float("nan")
        history["qm_loss"].append(float(np.mean(losses)) if losses else None)
        history["qm_retrieval"].append(acc)
        log.info("qm epoch %d: loss=%.4f retrieval@1=%.3f", epoch, history["qm_loss"][-1] or 0.0, acc)

    # --- entity prediction over catalog images ------------------------------
    n_items = len(dataset.catalog)
    perm = rng.permutation(n_items)
    n_hold = int(n_items * cfg.holdout_fraction)
    hold_items, fit_items = perm[:n_hold], perm[n_hold:]
    images = dataset.catalog.image_feature
    entities = dataset.catalog.entity_id
    opt = nn.Adam(vision_enc.pset)
    step = 0
    last = None
    eb = cfg.ep_batch_size
    total_steps = max(1, cfg.ep_epochs * max(1, fit_items.size // eb))
    for epoch in range(cfg.ep_epochs):
        order = rng.permutation(fit_items)
        losses = []
        for lo in range(0, fit_items.size, eb):
            idx = order[lo : lo + eb]
            logits = vision_enc.entity_logits(images[idx])
            loss = ep_loss(logits, entities[idx])
            last = _check_finite(loss, step, last)
            losses.append(last)
            opt.zero_grad()
            loss.backward()
            opt.step(nn.linear_lr(step, total_steps, cfg.ep_lr, cfg.ep_lr * 0.25))
            step += 1
        with nn.no_grad():
            pred = vision_enc.entity_logits(images[hold_items]).data.argmax(axis=1)
        acc = float((pred == entities[hold_items]).mean()) if hold_items.size else float("nan")
        history["ep_loss"].append(float(np.mean(losses)) if losses else None)
        history["ep_accuracy"].append(acc)
        log.info("ep epoch %d: loss=%.4f held-out acc=%.3f", epoch, history["ep_loss"][-1] or 0.0, acc)

    text_enc.freeze()
    vision_enc.freeze()
    return text_enc, vision_enc, history


def encoder_version(text_enc, vision_enc) -> bytes:
    """32-byte digest of both encoders' parameter names, shapes, and values."""
    h = hashlib.sha256()
    for enc in (text_enc, vision_enc):
        for p in enc.pset:
            h.update(p.name.encode("utf-8"))
            h.update(np.asarray(p.tensor.data.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(p.tensor.data, dtype=np.float32).tobytes())
    return h.digest()


def export_feature_matrix(catalog, text_enc, vision_enc, batch_size=1024):
    """Frozen-encoder modal features for every catalog item.

    Returns ([n_items, text_dim + vision_dim] float32, version digest). Row i
    is the item i feature: title embedding concatenated with image embedding.
    """
    if not (text_enc.frozen and vision_enc.frozen):
        raise ConfigError("encoders must be frozen before export")
    n = len(catalog)
    empties = np.flatnonzero(catalog.title_len == 0)
    if empties.size:
        raise ConfigError(f"item {int(empties[0])} has no title tokens")
    if not np.isfinite(catalog.image_feature).all():
        raise ConfigError("non-finite image feature in catalog")
    out = np.empty((n, text_enc.dim + vision_enc.dim), dtype=np.float32)
    with nn.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            text = text_enc.encode(catalog.title_tokens[lo:hi]).data
            vis = vision_enc.features(catalog.image_feature[lo:hi]).data
            out[lo:hi, : text_enc.dim] = text
            out[lo:hi, text_enc.dim :] = vis
    return out, encoder_version(text_enc, vision_enc)


class EncoderFeatureSource:
    """Feature lookup that runs the frozen encoders on the fly (no cache)."""

    def __init__(self, catalog, text_enc, vision_enc, batch_size=1024):
        if not (text_enc.frozen and vision_enc.frozen):
            raise ConfigError("encoders must be frozen")
        self.catalog = catalog
        self.text_enc = text_enc
        self.vision_enc = vision_enc
        self.batch_size = batch_size

    @property
    def dim(self):
        return self.text_enc.dim + self.vision_enc.dim

    def get_many(self, item_ids):
        item_ids = np.asarray(item_ids)
        flat = item_ids.reshape(-1)
        bad = (flat < 0) | (flat >= len(self.catalog))
        if bad.any():
            raise ConfigError(f"item {int(flat[bad][0])} not in catalog")
        out = np.empty((flat.size, self.dim), dtype=np.float32)
        from . import nn as _nn

        with _nn.no_grad():
            for lo in range(0, flat.size, self.batch_size):
                idx = flat[lo : lo + self.batch_size]
                out[lo : lo + idx.size, : self.text_enc.dim] = self.text_enc.encode(
                    self.catalog.title_tokens[idx]
                ).data
                out[lo : lo + idx.size, self.text_enc.dim :] = self.vision_enc.features(
                    self.catalog.image_feature[idx]
                ).data
        return out.reshape(item_ids.shape + (self.dim,))


def save_encoders(path, text_enc, vision_enc):
    from .checkpoint import Checkpoint

    tensors = {}
    for enc in (text_enc, vision_enc):
        for p in enc.pset:
            tensors[p.name] = p.tensor.data
    ck = Checkpoint(kind="ENC", tensors=tensors, metadata={"frozen": True})
    ck.save(path)
    return path


def load_encoders(path, gen_config, cfg: EncoderTrainConfig):
    from .checkpoint import Checkpoint

    ck = Checkpoint.load(path, kind="ENC")
    text_enc = TextEncoder(gen_config.vocab_size, cfg.text_dim, seed=0)
    vision_enc = VisionEncoder(gen_config.image_dim, cfg.vision_dim, gen_config.n_entities, seed=0)
    for enc in (text_enc, vision_enc):
        for p in enc.pset:
            ck.load_into_parameter(p)
        enc.freeze()
    return text_enc, vision_enc
