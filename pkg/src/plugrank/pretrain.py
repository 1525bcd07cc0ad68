"""Content-only CTR model pretrained on click supervision.

The model never sees an item id: every sequence position is the item's
cached modal feature projected into model space, plus learned display
position and recency embeddings. A bidirectional transformer encodes the
clicked-item history; the masked mean of its last layer is the user
representation, which is concatenated with the projected target feature and
scored by a three-layer head. The whole thing exports as a checkpoint and
later plugs into the unified ranker.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .batching import epoch_batches, pack_sequences, recency_bucket, slice_batch
from .checkpoint import Checkpoint
from .errors import ConfigError, TrainingDivergedError
from .metrics import auc
from .nn import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class PPMConfig:
    """Desk-scale content model setup."""

    feature_dim: int = 64  # text_dim + vision_dim
    model_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    max_seq_len: int = 50
    recency_buckets: int = 24
    head_hidden: tuple = (64, 32)
    batch_size: int = 256
    lr_start: float = 4e-4
    lr_end: float = 1e-4
    epochs: int = 2
    val_fraction: float = 0.05
    seq_crop: int = 50

    def encoder_config(self):
        return nn.EncoderConfig(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            model_dim=self.model_dim,
            ffn_dim=self.ffn_dim,
            max_seq_len=self.max_seq_len,
        )

    def hash(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class ModalSequenceTower:
    """Sequence encoder over cached modal features; the pluggable branch.

    Parameter names are unprefixed (``modal_projection``, ``position_table``,
    ``recency_table``, ``encoder/...``) so a pretraining checkpoint loads
    into the same tower embedded in another model, name for name.
    """

    def __init__(self, pset, cfg: PPMConfig, seed):
        self.cfg = cfg
        self.projection = nn.gaussian_param(
            pset, "modal_projection", (cfg.feature_dim, cfg.model_dim), seed
        )
        self.position = nn.Embedding(pset, "position_table", cfg.max_seq_len, cfg.model_dim, seed)
        self.recency = nn.Embedding(pset, "recency_table", cfg.recency_buckets, cfg.model_dim, seed)
        self.encoder = nn.TransformerEncoder(pset, "encoder", cfg.encoder_config(), seed)
        self.param_names = [
            "modal_projection",
            self.position.param.name,
            self.recency.param.name,
        ] + [p.name for p in pset if p.name.startswith("encoder/")]

    def compose(self, feats, pos, rec):
        """Per-position input: projected modal feature + position + recency."""
        projected = nn.matmul(feats if isinstance(feats, Tensor) else Tensor(feats), self.projection.tensor)
        return (projected + self.position(pos)) + self.recency(rec)

    def user_repr(self, feats, pos, rec, mask):
        h = self.encoder(self.compose(feats, pos, rec), mask)
        return nn.masked_mean(h, mask)

    def item_repr(self, feats):
        return nn.matmul(feats if isinstance(feats, Tensor) else Tensor(feats), self.projection.tensor)

    def compose_sequence(self, behavior, feature_source, now):
        """Single-sequence composition from raw events; returns ([n, d], mask).

        Every event's modal feature must resolve in the feature source
        (strict sources raise, naming the item).
        """
        events = behavior.events
        if len(events) > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {len(events)} exceeds {self.cfg.max_seq_len}")
        if not events:
            raise ConfigError("cannot compose an empty behavior sequence")
        items = np.array([e.item_id for e in events], dtype=np.int64)
        feats = feature_source.get_many(items).astype(np.float32)
        pos = np.clip([e.display_position for e in events], 0, self.cfg.max_seq_len - 1)
        delta = now - np.array([e.timestamp for e in events], dtype=np.int64)
        rec = recency_bucket(delta, self.cfg.recency_buckets)
        mask = np.ones(len(events), dtype=bool)
        composed = self.compose(feats[None, :, :], pos[None, :], rec[None, :])
        return nn.reshape(composed, (len(events), self.cfg.model_dim)), mask


def user_representation(last_hidden, mask):
    """Mask-aware mean of the final encoder layer; needs >=1 valid position."""
    return nn.masked_mean(last_hidden, mask)


class PretrainedCTRModel:
    """Modal sequence tower plus a three-layer click head."""

    def __init__(self, cfg: PPMConfig, seed):
        self.cfg = cfg
        self.seed = seed
        self.pset = nn.ParamSet()
        self.tower = ModalSequenceTower(self.pset, cfg, seed)
        dims = [2 * cfg.model_dim, *cfg.head_hidden, 1]
        self.head = nn.MLP(self.pset, "ctr_head", dims, seed)

    def ctr_forward(self, user_repr, target_repr):
        """Click probability from user and target representations."""
        single = user_repr.ndim == 1
        if single:
            user_repr = nn.reshape(user_repr, (1, -1))
            target_repr = nn.reshape(target_repr, (1, -1))
        logit = self.head(nn.concat([user_repr, target_repr], axis=-1))
        prob = nn.sigmoid(nn.reshape(logit, (logit.shape[0],)))
        return nn.reshape(prob, ()) if single else prob

    def forward_batch(self, feats, pos, rec, mask, target_feats):
        u = self.tower.user_repr(feats, pos, rec, mask)
        i = self.tower.item_repr(target_feats)
        return self.ctr_forward(u, i)


def ctr_loss(probs, labels):
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    labels = np.asarray(labels, dtype=np.float32)
    if labels.size == 0:
        raise ConfigError("ctr_loss on an empty batch")
    probs = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float32))
    p = nn.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = Tensor(labels)
    return -(y * nn.log(p) + (1.0 - y) * nn.log(1.0 - p)).mean()


def feature_table(feature_source, n_items):
    """Materialize [n_items + 1, dim] features; the extra row is the null item."""
    matrix = feature_source.get_many(np.arange(n_items))
    out = np.zeros((n_items + 1, matrix.shape[1]), dtype=np.float32)
    out[:n_items] = matrix
    return out


def _feat_rows(items, n_items):
    # null item (-1) and any out-of-range id resolve to the zero row
    rows = np.where((items >= 0) & (items < n_items), items, n_items)
    return rows.astype(np.int64)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    steps: int = 0
    runtime_seconds: float = 0.0


def pretrain(dataset, feature_source, cfg: PPMConfig, seed, day_range=None,
             init_from: Checkpoint | None = None, window_id=None) -> tuple:
    """Train the content CTR model on click labels; returns (model, checkpoint, history).

    ``day_range`` restricts training to train-split days [lo, hi]. With
    ``init_from`` the tower and head resume from that checkpoint (incremental
    update); metadata records the parent for provenance.
    """
    t0 = time.time()
    n_items = len(dataset.catalog)
    features = feature_table(feature_source, n_items)
    if features.shape[1] != cfg.feature_dim:
        raise ConfigError(f"feature dim {features.shape[1]} != configured {cfg.feature_dim}")

    rows = (
        np.arange(len(dataset.train))
        if day_range is None
        else dataset.train_day_indices(day_range[0], day_range[1])
    )
    if rows.size == 0:
        raise ConfigError("no training rows in the requested day range")
    table = dataset.train.select(rows)
    packed = pack_sequences(table, cfg.seq_crop, cfg.recency_buckets, cfg.max_seq_len)

    n_val = int(len(table) * cfg.val_fraction)
    n_fit = len(table) - n_val
    fit_idx = np.arange(n_fit)
    val_idx = np.arange(n_fit, len(table))

    model = PretrainedCTRModel(cfg, seed)
    if init_from is not None:
        init_from.load_into(model.pset)
    opt = nn.Adam(model.pset)
    rng = np.random.default_rng(seed)
    lengths = packed["mask"].sum(axis=1)

    history = TrainHistory()
    total_steps = max(1, cfg.epochs * (n_fit // cfg.batch_size + (n_fit % cfg.batch_size > 0)))
    step = 0
    last_finite = None
    for epoch in range(cfg.epochs):
        losses = []
        for idx in epoch_batches(n_fit, cfg.batch_size, rng, lengths=lengths[fit_idx]):
            b = slice_batch(packed, idx)
            feats = features[_feat_rows(b["items"], n_items)]
            tfeats = features[_feat_rows(b["target"], n_items)]
            probs = model.forward_batch(Tensor(feats), b["pos"], b["rec"], b["mask"], Tensor(tfeats))
            loss = ctr_loss(probs, b["click"])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"pretrain loss non-finite at step {step}", step=step, last_finite_loss=last_finite
                )
            last_finite = value
            losses.append(value)
            opt.zero_grad()
            loss.backward()
            opt.step(nn.linear_lr(step, total_steps, cfg.lr_start, cfg.lr_end))
            step += 1
        val = evaluate_ppm_auc(model, packed, features, n_items, val_idx) if n_val else None
        history.epoch_loss.append(float(np.mean(losses)))
        history.val_auc.append(val)
        log.info("ppm epoch %d: loss=%.4f val_auc=%s", epoch, history.epoch_loss[-1],
                 f"{val:.4f}" if val is not None else "n/a")
    history.steps = step
    history.runtime_seconds = time.time() - t0

    metadata = {
        "config_hash": cfg.hash(),
        "window_id": window_id or (f"days{day_range[0]}-{day_range[1]}" if day_range else "all"),
        "step_count": step,
        "dataset_seed": dataset.seed,
        "train_seed": int(seed),
    }
    if init_from is not None:
        metadata["parent_window_id"] = init_from.metadata.get("window_id")
        metadata["parent_step_count"] = init_from.metadata.get("step_count")
    ckpt = Checkpoint.from_paramset("PPM", model.pset, metadata)
    return model, ckpt, history


def evaluate_ppm_auc(model, packed, features, n_items, indices, batch_size=1024):
    scores = np.empty(indices.size, dtype=np.float32)
    with nn.no_grad():
        for lo in range(0, indices.size, batch_size):
            idx = indices[lo : lo + batch_size]
            b = slice_batch(packed, idx)
            feats = features[_feat_rows(b["items"], n_items)]
            tfeats = features[_feat_rows(b["target"], n_items)]
            probs = model.forward_batch(Tensor(feats), b["pos"], b["rec"], b["mask"], Tensor(tfeats))
            scores[lo : lo + idx.size] = probs.data
    labels = packed["click"][indices]
    return auc(scores, labels)
