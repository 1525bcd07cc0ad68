"""Unified multi-task ranker: ID sequence tower, pluggable content tower, MMoE.

Three wirings share the mixture-of-experts head:

* ``urm``     two separate sequence towers (id-based and modal) whose user and
              item representations are fused with the context vector,
              x = [U_ID | I_ID | U_MO | I_MO | D]; the modal tower can be
              loaded from a pretraining checkpoint (random / frozen / finetune)
* ``shared``  one transformer over per-position [id concat | projected modal
              feature] (the ablation baseline wiring), x = [U | I | D]
* ``id_only`` pure id ranker, x = [U_ID | I_ID | D]

Cached modal features enter as constants: no gradient ever reaches them.
Unknown ids (including the synthetic null item) hit a reserved
out-of-vocabulary row 0 in every id table, so cold items flow through
without errors.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import nn
from .batching import epoch_batches, pack_sequences, recency_bucket, slice_batch
from .checkpoint import Checkpoint
from .errors import ConfigError, TrainingDivergedError
from .metrics import auc
from .nn import Tensor
from .pretrain import ModalSequenceTower, PPMConfig, ctr_loss, feature_table, _feat_rows

log = logging.getLogger(__name__)

TASKS = ("click", "order", "cart")


class PluginMode(Enum):
    RANDOM_INIT = "random_init"
    FROZEN = "frozen"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class URMConfig:
    id_dim: int = 16  # per id field; four fields concatenate
    id_layers: int = 2
    id_heads: int = 2
    id_ffn: int = 128
    max_seq_len: int = 50
    recency_buckets: int = 24
    context_dim: int = 8
    plugin: PPMConfig = field(default_factory=PPMConfig)
    n_experts: int = 4
    expert_hidden: int = 64
    expert_dim: int = 32
    plugin_lr_scale: float = 0.1  # gentler adaptation of pretrained weights
    tower_hidden: int = 16
    task_weights: tuple = (1.0, 1.0, 1.0)
    batch_size: int = 256
    lr_start: float = 4e-4
    lr_end: float = 1e-4
    epochs: int = 3
    val_fraction: float = 0.05
    seq_crop: int = 50

    @property
    def id_model_dim(self):
        return 4 * self.id_dim

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class IDVocab:
    """Id spaces of the four item fields; row 0 of each table is OOV."""

    def __init__(self, n_items, n_shops, n_brands, n_categories):
        self.n_items = n_items
        self.n_shops = n_shops
        self.n_brands = n_brands
        self.n_categories = n_categories

    @classmethod
    def from_config(cls, gen_config):
        return cls(gen_config.n_items, gen_config.n_shops, gen_config.n_brands, gen_config.n_categories)


def _oov_rows(ids, vocab):
    ids = np.asarray(ids)
    return np.where((ids >= 0) & (ids < vocab), ids + 1, 0).astype(np.int64)


class IDEmbeddingBank:
    """The four id tables; row 0 of each is the shared OOV/null row."""

    def __init__(self, pset, name, id_dim, vocab: IDVocab, seed):
        self.vocab = vocab
        self.sku = nn.Embedding(pset, f"{name}/sku_table", vocab.n_items + 1, id_dim, seed)
        self.shop = nn.Embedding(pset, f"{name}/shop_table", vocab.n_shops + 1, id_dim, seed)
        self.brand = nn.Embedding(pset, f"{name}/brand_table", vocab.n_brands + 1, id_dim, seed)
        self.category = nn.Embedding(pset, f"{name}/category_table", vocab.n_categories + 1, id_dim, seed)

    def id_concat(self, items, catalog_arrays):
        """[..., 4 * id_dim] concatenation of the four id embeddings."""
        shop_of, brand_of, cat_of = catalog_arrays
        items = np.asarray(items)
        v = self.vocab
        in_range = (items >= 0) & (items < v.n_items)
        safe = np.where(in_range, items, 0)
        sku_rows = _oov_rows(items, v.n_items)
        shop_rows = np.where(in_range, _oov_rows(shop_of[safe], v.n_shops), 0)
        brand_rows = np.where(in_range, _oov_rows(brand_of[safe], v.n_brands), 0)
        cat_rows = np.where(in_range, _oov_rows(cat_of[safe], v.n_categories), 0)
        return nn.concat(
            [self.sku(sku_rows), self.shop(shop_rows), self.brand(brand_rows), self.category(cat_rows)],
            axis=-1,
        )


class IDSequenceTower:
    """Sequence encoder over concatenated sku/shop/brand/category embeddings."""

    def __init__(self, pset, name, cfg: URMConfig, vocab: IDVocab, seed):
        self.cfg = cfg
        self.vocab = vocab
        dm = cfg.id_model_dim
        self.bank = IDEmbeddingBank(pset, name, cfg.id_dim, vocab, seed)
        self.position = nn.Embedding(pset, f"{name}/position_table", cfg.max_seq_len, dm, seed)
        self.recency = nn.Embedding(pset, f"{name}/recency_table", cfg.recency_buckets, dm, seed)
        self.encoder = nn.TransformerEncoder(
            pset,
            f"{name}/encoder",
            nn.EncoderConfig(cfg.id_layers, cfg.id_heads, dm, cfg.id_ffn, cfg.max_seq_len),
            seed,
        )

    def id_concat(self, items, catalog_arrays):
        return self.bank.id_concat(items, catalog_arrays)

    def compose(self, items, pos, rec, catalog_arrays):
        e = self.bank.id_concat(items, catalog_arrays)
        return (e + self.position(pos)) + self.recency(rec)

    def user_repr(self, items, pos, rec, mask, catalog_arrays):
        h = self.encoder(self.compose(items, pos, rec, catalog_arrays), mask)
        return nn.masked_mean(h, mask)

    def item_repr(self, items, catalog_arrays):
        return self.bank.id_concat(items, catalog_arrays)

    def compose_sequence(self, behavior, catalog, now):
        """Single-sequence id composition; unknown ids hit OOV row 0."""
        events = behavior.events
        if not events:
            raise ConfigError("cannot compose an empty behavior sequence")
        items = np.array([e.item_id for e in events], dtype=np.int64)
        pos = np.clip([e.display_position for e in events], 0, self.cfg.max_seq_len - 1)
        delta = now - np.array([e.timestamp for e in events], dtype=np.int64)
        rec = recency_bucket(delta, self.cfg.recency_buckets)
        arrays = (catalog.shop_id, catalog.brand_id, catalog.category_id)
        composed = self.compose(items[None, :], pos[None, :], rec[None, :], arrays)
        mask = np.ones(len(events), dtype=bool)
        return nn.reshape(composed, (len(events), self.cfg.id_model_dim)), mask


class MMoEHead:
    """Per-task softmax-gated mixture of shared experts, one tower per task."""

    def __init__(self, pset, name, in_dim, cfg: URMConfig, seed, tasks=TASKS):
        self.tasks = tuple(tasks)
        self.n_experts = cfg.n_experts
        self.experts = [
            nn.MLP(pset, f"{name}/expert{i}", [in_dim, cfg.expert_hidden, cfg.expert_dim], seed)
            for i in range(cfg.n_experts)
        ]
        self.gates = {
            t: nn.Linear(pset, f"{name}/gate_{t}", in_dim, cfg.n_experts, seed) for t in self.tasks
        }
        self.towers = {
            t: nn.MLP(pset, f"{name}/tower_{t}", [cfg.expert_dim, cfg.tower_hidden, 1], seed)
            for t in self.tasks
        }

    def __call__(self, x, return_internals=False):
        b = x.shape[0]
        stacked = nn.concat([nn.reshape(e(x), (b, 1, -1)) for e in self.experts], axis=1)
        probs = {}
        internals = {"experts": stacked, "gates": {}, "mixtures": {}}
        for t in self.tasks:
            gate = nn.softmax(self.gates[t](x), axis=-1)
            mixture = (stacked * nn.reshape(gate, (b, self.n_experts, 1))).sum(axis=1)
            logit = self.towers[t](mixture)
            probs[t] = nn.sigmoid(nn.reshape(logit, (b,)))
            if return_internals:
                internals["gates"][t] = gate
                internals["mixtures"][t] = mixture
        return (probs, internals) if return_internals else probs


class UnifiedRankingModel:
    """MMoE ranker over id and/or modal towers, per the chosen variant."""

    VARIANTS = ("urm", "shared", "id_only")

    def __init__(self, cfg: URMConfig, vocab: IDVocab, seed, variant="urm", tasks=TASKS):
        if variant not in self.VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        self.cfg = cfg
        self.vocab = vocab
        self.variant = variant
        self.seed = seed
        self.pset = nn.ParamSet()
        self.ablate_plugin = False
        md = cfg.plugin.model_dim

        if variant == "urm":
            self.id_tower = IDSequenceTower(self.pset, "idsm", cfg, vocab, seed)
            self.plugin_tower = ModalSequenceTower(self.pset, cfg.plugin, seed)
            fusion_dim = 2 * cfg.id_model_dim + 2 * md + cfg.context_dim
        elif variant == "shared":
            self.shared_projection = nn.gaussian_param(
                self.pset, "shared/modal_projection", (cfg.plugin.feature_dim, md), seed
            )
            dm = cfg.id_model_dim + md
            self.id_bank = IDEmbeddingBank(self.pset, "shared", cfg.id_dim, vocab, seed)
            # position/recency tables sized for the concatenated width
            self.shared_position = nn.Embedding(self.pset, "shared/position_table", cfg.max_seq_len, dm, seed)
            self.shared_recency = nn.Embedding(self.pset, "shared/recency_table", cfg.recency_buckets, dm, seed)
            self.shared_encoder = nn.TransformerEncoder(
                self.pset,
                "shared/encoder",
                nn.EncoderConfig(cfg.id_layers, cfg.id_heads, dm, cfg.id_ffn, cfg.max_seq_len),
                seed,
            )
            fusion_dim = 2 * dm + cfg.context_dim
        else:  # id_only
            self.id_tower = IDSequenceTower(self.pset, "idsm", cfg, vocab, seed)
            fusion_dim = 2 * cfg.id_model_dim + cfg.context_dim
        self.fusion_dim = fusion_dim
        self.mmoe = MMoEHead(self.pset, "mmoe", fusion_dim, cfg, seed, tasks=tasks)

    # --- forward -----------------------------------------------------------
    def fusion_input(self, batch, features, catalog_arrays):
        """Concatenated gate/expert input x for one packed batch."""
        items, pos, rec, mask = batch["items"], batch["pos"], batch["rec"], batch["mask"]
        target = batch["target"]
        ctx = Tensor(batch["context"])
        n_items = self.vocab.n_items

        if self.variant == "shared":
            feats = Tensor(features[_feat_rows(items, n_items)])
            tfeats = Tensor(features[_feat_rows(target, n_items)])
            e_id = self.id_bank.id_concat(items, catalog_arrays)
            e_mo = nn.matmul(feats, self.shared_projection.tensor)
            e = nn.concat([e_id, e_mo], axis=-1)
            e = (e + self.shared_position(pos)) + self.shared_recency(rec)
            h = self.shared_encoder(e, mask)
            u = nn.masked_mean(h, mask)
            i_id = self.id_bank.id_concat(target, catalog_arrays)
            i_mo = nn.matmul(tfeats, self.shared_projection.tensor)
            i = nn.concat([i_id, i_mo], axis=-1)
            return nn.concat([u, i, ctx], axis=-1)

        u_id = self.id_tower.user_repr(items, pos, rec, mask, catalog_arrays)
        i_id = self.id_tower.item_repr(target, catalog_arrays)
        if self.variant == "id_only":
            return nn.concat([u_id, i_id, ctx], axis=-1)

        if self.ablate_plugin:
            b = items.shape[0]
            md = self.cfg.plugin.model_dim
            u_mo = Tensor(np.zeros((b, md), dtype=np.float32))
            i_mo = Tensor(np.zeros((b, md), dtype=np.float32))
        else:
            feats = Tensor(features[_feat_rows(items, n_items)])
            tfeats = Tensor(features[_feat_rows(target, n_items)])
            u_mo = self.plugin_tower.user_repr(feats, batch["pos"], batch["rec"], mask)
            i_mo = self.plugin_tower.item_repr(tfeats)
            if self.plugin_frozen():
                u_mo = u_mo.detach()
                i_mo = i_mo.detach()
        return nn.concat([u_id, i_id, u_mo, i_mo, ctx], axis=-1)

    def forward_batch(self, batch, features, catalog_arrays, return_internals=False):
        x = self.fusion_input(batch, features, catalog_arrays)
        return self.mmoe(x, return_internals=return_internals)

    # --- plug-in management --------------------------------------------------
    def plugin_params(self):
        if self.variant != "urm":
            raise ConfigError(f"variant {self.variant!r} has no plug-in tower")
        return [self.pset[name] for name in self.plugin_tower.param_names]

    def plugin_frozen(self):
        if self.variant != "urm" or self.ablate_plugin:
            return True
        return all(not p.trainable for p in self.plugin_params())


def plugin_load(model: UnifiedRankingModel, checkpoint, mode: PluginMode):
    """Install pretraining weights into the plug-in tower per the mode.

    frozen/finetune load name-for-name (missing or mis-shaped names abort);
    random_init keeps the fresh Gaussian initialization. frozen marks every
    plug-in parameter untrainable; finetune keeps them trainable at a reduced
    learning rate so the fresh fusion head cannot wreck the pretrained
    representations before it stabilizes.
    """
    mode = PluginMode(mode)
    params = model.plugin_params()
    if mode is PluginMode.RANDOM_INIT:
        for p in params:
            p.trainable = True
        return model
    if checkpoint is None:
        raise ConfigError(f"mode {mode.value} requires a pretraining checkpoint")
    checkpoint.load_into(params)
    trainable = mode is PluginMode.FINETUNE
    for p in params:
        p.trainable = trainable
        if trainable:
            p.lr_scale = model.cfg.plugin_lr_scale
    return model


def multitask_loss(probs: dict, labels: dict, weights=None):
    """Weighted sum of per-task cross-entropies; labels must be funnel-consistent."""
    tasks = list(probs)
    weights = dict(zip(tasks, weights)) if weights is not None else {t: 1.0 for t in tasks}
    click = np.asarray(labels.get("click"))
    for t in ("order", "cart"):
        if t in labels and (np.asarray(labels[t]) > click).any():
            raise ConfigError(f"funnel violation: {t}=1 with click=0")
    total = None
    for t in tasks:
        term = ctr_loss(probs[t], labels[t]) * float(weights[t])
        total = term if total is None else total + term
    return total


@dataclass
class URMTrainHistory:
    epoch_loss: list = field(default_factory=list)
    val_click_auc: list = field(default_factory=list)
    steps: int = 0
    runtime_seconds: float = 0.0


def catalog_arrays(catalog):
    return (catalog.shop_id, catalog.brand_id, catalog.category_id)


def train_urm(dataset, feature_source, cfg: URMConfig, seed, variant="urm",
              plugin_mode=None, ppm_checkpoint=None, ppm_hash=None,
              day_range=None, window_id=None, tasks=TASKS):
    """Train a ranker variant; returns (model, checkpoint, history).

    Modal features are read once from the source and used as constants
    throughout training. For the ``urm`` variant ``plugin_mode`` picks how
    pretraining weights enter the modal tower.
    """
    t0 = time.time()
    gen = dataset.config
    if cfg.context_dim != gen.context_dim:
        raise ConfigError(f"context dim {cfg.context_dim} != dataset {gen.context_dim}")
    vocab = IDVocab.from_config(gen)
    model = UnifiedRankingModel(cfg, vocab, seed, variant=variant, tasks=tasks)
    if variant == "urm":
        if plugin_mode is None:
            raise ConfigError("urm variant requires plugin_mode")
        plugin_load(model, ppm_checkpoint, PluginMode(plugin_mode))

    n_items = len(dataset.catalog)
    features = feature_table(feature_source, n_items) if variant != "id_only" else np.zeros(
        (n_items + 1, cfg.plugin.feature_dim), dtype=np.float32
    )
    arrays = catalog_arrays(dataset.catalog)

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
    val_idx = np.arange(n_fit, len(table))
    lengths = packed["mask"].sum(axis=1)

    opt = nn.Adam(model.pset)
    rng = np.random.default_rng(seed)
    weights = cfg.task_weights
    history = URMTrainHistory()
    total_steps = max(1, cfg.epochs * (n_fit // cfg.batch_size + (n_fit % cfg.batch_size > 0)))
    step = 0
    last_finite = None
    for epoch in range(cfg.epochs):
        losses = []
        for idx in epoch_batches(n_fit, cfg.batch_size, rng, lengths=lengths[:n_fit]):
            b = slice_batch(packed, idx)
            probs = model.forward_batch(b, features, arrays)
            loss = multitask_loss(probs, {t: b[t] for t in tasks}, weights=weights[: len(tasks)])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"urm loss non-finite at step {step}", step=step, last_finite_loss=last_finite
                )
            last_finite = value
            losses.append(value)
            opt.zero_grad()
            loss.backward()
            opt.step(nn.linear_lr(step, total_steps, cfg.lr_start, cfg.lr_end))
            step += 1
        val = None
        if n_val:
            scores = score_batches(model, packed, features, arrays, val_idx)
            val = auc(scores["click"], packed["click"][val_idx])
        history.epoch_loss.append(float(np.mean(losses)))
        history.val_click_auc.append(val)
        log.info("urm[%s] epoch %d: loss=%.4f val_click_auc=%s", variant, epoch,
                 history.epoch_loss[-1], f"{val:.4f}" if val is not None else "n/a")
    history.steps = step
    history.runtime_seconds = time.time() - t0

    metadata = {
        "config_hash": cfg.hash(),
        "variant": variant,
        "plugin_mode": PluginMode(plugin_mode).value if plugin_mode else None,
        "window_id": window_id or (f"days{day_range[0]}-{day_range[1]}" if day_range else "all"),
        "step_count": step,
        "dataset_seed": dataset.seed,
        "train_seed": int(seed),
        "ppm_checkpoint_hash": ppm_hash,
    }
    ckpt = Checkpoint.from_paramset("URM", model.pset, metadata)
    return model, ckpt, history


def score_batches(model, packed, features, arrays, indices, batch_size=1024):
    """Forward-only per-task scores for the given rows."""
    out = {t: np.empty(indices.size, dtype=np.float32) for t in model.mmoe.tasks}
    with nn.no_grad():
        for lo in range(0, indices.size, batch_size):
            idx = indices[lo : lo + batch_size]
            b = slice_batch(packed, idx)
            probs = model.forward_batch(b, features, arrays)
            for t in model.mmoe.tasks:
                out[t][lo : lo + idx.size] = probs[t].data
    return out
