"""Experiment harness: evaluation, the contrast-model grid, and the
offline-train + incremental-update pipeline."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .batching import pack_sequences
from .cache import FeatureCache, MatrixFeatureSource, build_cache_from_matrix
from .checkpoint import Checkpoint, file_hash
from .data import Dataset, generate, load_dataset, save_dataset, split_by_frequency, subsample
from .encoders import (
    EncoderTrainConfig,
    TextEncoder,
    VisionEncoder,
    encoder_version,
    export_feature_matrix,
    load_encoders,
    save_encoders,
    train_encoders,
)
from .errors import ConfigError, PipelineStageError
from .metrics import MetricsReport, auc, precision_at_n, uctr_ucvr
from .pretrain import PPMConfig, pretrain
from .ranker import PluginMode, URMConfig, catalog_arrays, score_batches, train_urm
from .pretrain import feature_table

log = logging.getLogger(__name__)

# Contrast-model grid rows, in reporting order.
VARIANT_NAMES = {
    "base": "Base",
    "qmep": "Base+QM&EP",
    "ppm_random": "Base+QM&EP+PPM (random initialized)",
    "ppm_frozen": "Base+QM&EP+PPM (frozen)",
    "ppm_finetune": "Base+QM&EP+PPM (finetune)",
    "id_only": "pure-IDRec",
}
GRID_KEYS = ("base", "qmep", "ppm_random", "ppm_frozen", "ppm_finetune")
DEFAULT_BUCKET_EDGES = (1, 10, 100)


_PLUGIN_MODES = {
    "ppm_random": PluginMode.RANDOM_INIT,
    "ppm_frozen": PluginMode.FROZEN,
    "ppm_finetune": PluginMode.FINETUNE,
}


def variant_wiring(key):
    """Map a grid key to (model variant, plugin mode, uses trained encoders)."""
    if key == "base":
        return "shared", None, False
    if key == "qmep":
        return "shared", None, True
    if key == "id_only":
        return "id_only", None, True
    if key in _PLUGIN_MODES:
        return "urm", _PLUGIN_MODES[key], True
    raise ConfigError(f"unknown grid key {key!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid: dataset, variants, seeds, and the training hyperparameters."""

    variants: tuple = GRID_KEYS
    seeds: tuple = (0, 1, 2)
    dataset_fraction: float = 1.0
    bucket_edges: tuple = DEFAULT_BUCKET_EDGES
    report_cart: bool = False
    ppm_day_hi_lag: int = 2  # pretraining data lags the eval day by this many days
    urm_day_lo_lag: int = 1  # ranker training day(s): lag 1 means eval day - 1

    def validate(self):
        for v in self.variants:
            if v not in VARIANT_NAMES:
                raise ConfigError(f"unknown variant key {v!r} (must match the grid rows)")
        if not (0.0 < self.dataset_fraction <= 1.0):
            raise ConfigError("dataset_fraction must be in (0, 1]")
        return self


def evaluate_model(model, dataset, features, split="test", bucket_edges=DEFAULT_BUCKET_EDGES,
                   report_cart=False, step_count=0):
    """Score a ranker on a split and assemble the metrics report."""
    t0 = time.time()
    table = dataset.test if split == "test" else dataset.train
    cfg = model.cfg
    packed = pack_sequences(table, cfg.seq_crop, cfg.recency_buckets, cfg.max_seq_len)
    arrays = catalog_arrays(dataset.catalog)
    indices = np.arange(len(table))
    scores = score_batches(model, packed, features, arrays, indices)

    tasks = ["click", "order"] + (["cart"] if report_cart else [])
    report = MetricsReport(split=split, n_samples=len(table), step_count=step_count)
    for t in tasks:
        labels = packed[t]
        report.task_auc[t] = auc(scores[t], labels)
        report.task_p_at_n[t] = precision_at_n(
            packed["request_id"], scores[t], labels, packed["target"], n=2
        )
    pair = [report.task_auc.get("click"), report.task_auc.get("order")]
    if None not in pair:
        report.avg_auc = float(np.mean(pair))
    pair_p = [report.task_p_at_n.get("click"), report.task_p_at_n.get("order")]
    if None not in pair_p:
        report.avg_p_at_n = float(np.mean(pair_p))

    if bucket_edges and split == "test":
        buckets = split_by_frequency(dataset, list(bucket_edges))
        for b, label in enumerate(buckets.labels):
            idx = buckets.indices(b)
            if idx.size == 0:
                continue
            entry = {"n": int(idx.size)}
            per_task = []
            for t in ("click", "order"):
                value = auc(scores[t][idx], packed[t][idx])
                entry[t] = value
                per_task.append(value)
            entry["average"] = float(np.mean(per_task)) if None not in per_task else None
            report.bucket_auc[label] = entry

    report.uctr, report.ucvr = uctr_ucvr(
        packed["user_id"], packed["day"], packed["click"], packed["order"]
    )
    report.runtime_seconds = time.time() - t0
    return report


@dataclass
class GridCell:
    variant_key: str
    variant_name: str
    seed: int
    report: MetricsReport | None = None
    error: str | None = None


@dataclass
class AblationReport:
    cells: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)  # variant name -> mean/sd stats
    ordering: list = field(default_factory=list)  # variant names by mean avg AUC desc

    def records(self):
        rows = []
        for cell in self.cells:
            base = {"variant": cell.variant_name, "seed": cell.seed}
            if cell.error:
                rows.append({**base, "metric": "error", "bucket": "", "value": None, "detail": cell.error})
                continue
            for r in cell.report.records():
                rows.append({**base, **r})
        for name, stats in self.summary.items():
            for k, v in stats.items():
                rows.append({"variant": name, "seed": None, "metric": f"summary/{k}", "bucket": "", "value": v})
        for rank, name in enumerate(self.ordering):
            rows.append({"variant": name, "seed": None, "metric": "rank/avg_auc", "bucket": "", "value": rank})
        return rows


class SeedArtifacts:
    """Per-training-seed shared pieces of a grid: encoders, features, PPM."""

    def __init__(self, dataset, seed, enc_cfg=None, ppm_cfg=None, ppm_day_range=None):
        enc_cfg = enc_cfg or EncoderTrainConfig()
        self.seed = seed
        log.info("seed %d: training modality encoders", seed)
        self.text_enc, self.vision_enc, self.enc_history = train_encoders(dataset, enc_cfg, seed)
        self.trained_features, self.trained_version = export_feature_matrix(
            dataset.catalog, self.text_enc, self.vision_enc
        )
        # untrained-but-frozen encoders stand in for generic pretrained backbones
        raw_text = TextEncoder(dataset.config.vocab_size, enc_cfg.text_dim, seed)
        raw_vision = VisionEncoder(
            dataset.config.image_dim, enc_cfg.vision_dim, dataset.config.n_entities, seed
        )
        raw_text.freeze()
        raw_vision.freeze()
        self.untrained_features, self.untrained_version = export_feature_matrix(
            dataset.catalog, raw_text, raw_vision
        )
        self.ppm_cfg = ppm_cfg or PPMConfig()
        self.ppm_day_range = ppm_day_range
        self._ppm = None
        self._dataset = dataset

    def ppm_checkpoint(self):
        if self._ppm is None:
            log.info("seed %d: pretraining content model on days %s", self.seed, self.ppm_day_range)
            _, ckpt, history = pretrain(
                self._dataset,
                MatrixFeatureSource(self.trained_features),
                self.ppm_cfg,
                self.seed,
                day_range=self.ppm_day_range,
            )
            self._ppm = (ckpt, history)
        return self._ppm[0]

    def features_for(self, trained: bool):
        return self.trained_features if trained else self.untrained_features


def run_ablation(dataset: Dataset, config: ExperimentConfig, urm_cfg=None, ppm_cfg=None,
                 enc_cfg=None) -> AblationReport:
    """Train every variant on every seed over one shared dataset.

    A failing variant is flagged in the report; the rest of the grid still
    runs. The summary orders variants by mean average AUC.
    """
    config.validate()
    urm_cfg = urm_cfg or URMConfig()
    test_day = int(dataset.stats["test_day"])
    ppm_range = (0, test_day - config.ppm_day_hi_lag)
    urm_range = (test_day - config.urm_day_lo_lag, test_day - 1)

    work = dataset
    if config.dataset_fraction < 1.0:
        work = subsample(dataset, config.dataset_fraction, seed=dataset.seed)

    report = AblationReport()
    per_variant = {VARIANT_NAMES[k]: [] for k in config.variants}
    for seed in config.seeds:
        artifacts = SeedArtifacts(work, seed, enc_cfg=enc_cfg, ppm_cfg=ppm_cfg, ppm_day_range=ppm_range)
        for key in config.variants:
            name = VARIANT_NAMES[key]
            cell = GridCell(variant_key=key, variant_name=name, seed=seed)
            try:
                variant, mode, trained = variant_wiring(key)
                ppm_ckpt = None
                if variant == "urm" and mode in (PluginMode.FROZEN, PluginMode.FINETUNE):
                    ppm_ckpt = artifacts.ppm_checkpoint()
                features = artifacts.features_for(trained)
                model, _, history = train_urm(
                    work,
                    MatrixFeatureSource(features),
                    urm_cfg,
                    seed,
                    variant=variant,
                    plugin_mode=mode,
                    ppm_checkpoint=ppm_ckpt,
                    day_range=urm_range,
                )
                cell.report = evaluate_model(
                    model, work, feature_table(MatrixFeatureSource(features), len(work.catalog)),
                    bucket_edges=config.bucket_edges, report_cart=config.report_cart,
                    step_count=history.steps,
                )
                per_variant[name].append(cell.report)
                log.info("seed %d %s: avg AUC %.4f", seed, name, cell.report.avg_auc)
            except Exception as exc:  # partial grid is still a valid report
                log.exception("variant %s seed %d failed", name, seed)
                cell.error = f"{type(exc).__name__}: {exc}"
            report.cells.append(cell)

    for name, reports in per_variant.items():
        if not reports:
            continue
        avg = np.array([r.avg_auc for r in reports], dtype=np.float64)
        p2 = np.array([r.avg_p_at_n for r in reports], dtype=np.float64)
        report.summary[name] = {
            "avg_auc_mean": float(avg.mean()),
            "avg_auc_sd": float(avg.std(ddof=1)) if avg.size > 1 else 0.0,
            "avg_p_at_2_mean": float(p2.mean()),
            "avg_p_at_2_sd": float(p2.std(ddof=1)) if p2.size > 1 else 0.0,
            "n_seeds": int(avg.size),
        }
    report.ordering = sorted(
        report.summary, key=lambda n: report.summary[n]["avg_auc_mean"], reverse=True
    )
    return report


def write_records(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, separators=(",", ":"), sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# Offline training + incremental update pipeline
# ----------------------------------------------------------------------------

@dataclass
class PipelineArtifacts:
    run_dir: Path
    dataset_dir: Path
    encoders_path: Path
    cache_path: Path
    ppm_path: Path
    urm_path: Path
    ppm_inc_path: Path
    urm_inc_path: Path
    report_path: Path
    manifest_path: Path
    pre_auc: float = None
    post_auc: float = None


def run_pipeline(run_dir, gen_config, seed, enc_cfg=None, ppm_cfg=None, urm_cfg=None,
                 dataset=None, report_cart=False) -> PipelineArtifacts:
    """Offline flow, then one incremental round.

    Stages: generate data -> train encoders -> export features -> build cache
    -> pretrain the content model on days [0, T-2] -> train the ranker on day
    T-1 from that checkpoint -> evaluate on the held-out day T. The
    incremental round continues the content model from its checkpoint on day
    T-1 data and retrains the ranker from the refreshed checkpoint, verified
    by a metadata hash chain. Day T is only ever evaluated, never trained on.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    enc_cfg = enc_cfg or EncoderTrainConfig()
    ppm_cfg = ppm_cfg or PPMConfig()
    urm_cfg = urm_cfg or URMConfig()
    stage_log = []

    def stage(name, fn):
        log.info("pipeline stage: %s", name)
        t0 = time.time()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineStageError(name, str(exc)) from exc
        stage_log.append({"stage": name, "seconds": round(time.time() - t0, 2)})
        return result

    dataset_dir = run_dir / "data"
    if dataset is None:
        dataset = stage("gen-data", lambda: generate(gen_config, seed))
        stage("save-data", lambda: save_dataset(dataset, dataset_dir))
    else:
        stage("save-data", lambda: save_dataset(dataset, dataset_dir))
    test_day = int(dataset.stats["test_day"])

    text_enc, vision_enc, _ = stage("train-modenc", lambda: train_encoders(dataset, enc_cfg, seed))
    encoders_path = run_dir / "encoders.ckpt"
    stage("save-encoders", lambda: save_encoders(encoders_path, text_enc, vision_enc))

    features, version = stage(
        "export-features", lambda: export_feature_matrix(dataset.catalog, text_enc, vision_enc)
    )
    cache_path = run_dir / "modal.cache"
    stage(
        "build-cache",
        lambda: build_cache_from_matrix(np.arange(len(dataset.catalog)), features, version, cache_path),
    )
    cache = FeatureCache.open(cache_path, mode="strict")

    ppm_path = run_dir / "ppm.ckpt"
    ppm_range = (0, test_day - 2)

    def _pretrain():
        _, ckpt, _ = pretrain(dataset, cache, ppm_cfg, seed, day_range=ppm_range,
                              window_id=f"days{ppm_range[0]}-{ppm_range[1]}")
        ckpt.save(ppm_path)
        return ckpt

    ppm_ckpt = stage("pretrain-ppm", _pretrain)
    ppm_hash = file_hash(ppm_path)

    urm_path = run_dir / "urm.ckpt"
    urm_range = (test_day - 1, test_day - 1)

    def _train_urm(ppm_ck, ppm_h, out_path):
        model, ckpt, history = train_urm(
            dataset, cache, urm_cfg, seed, variant="urm",
            plugin_mode=PluginMode.FINETUNE, ppm_checkpoint=ppm_ck, ppm_hash=ppm_h,
            day_range=urm_range, window_id=f"day{urm_range[0]}",
        )
        ckpt.save(out_path)
        return model, history

    model, history = stage("train-urm", lambda: _train_urm(ppm_ckpt, ppm_hash, urm_path))
    pre_report = stage(
        "eval",
        lambda: evaluate_model(model, dataset, feature_table(cache, len(dataset.catalog)),
                               report_cart=report_cart, step_count=history.steps),
    )

    # incremental round: refresh the content model with day T-1 from its own
    # checkpoint, then retrain the ranker from the refreshed checkpoint
    ppm_inc_path = run_dir / "ppm_incremental.ckpt"

    def _pretrain_inc():
        loaded = Checkpoint.load(ppm_path, kind="PPM")
        inc_cfg_epochs = max(1, ppm_cfg.epochs // 2)
        from dataclasses import replace

        inc_cfg = replace(ppm_cfg, epochs=inc_cfg_epochs)
        _, ckpt, _ = pretrain(dataset, cache, inc_cfg, seed, day_range=(test_day - 1, test_day - 1),
                              init_from=loaded, window_id=f"inc-day{test_day - 1}")
        ckpt.metadata["parent_checkpoint_hash"] = ppm_hash
        ckpt.save(ppm_inc_path)
        return ckpt

    ppm_inc_ckpt = stage("pretrain-ppm-incremental", _pretrain_inc)
    ppm_inc_hash = file_hash(ppm_inc_path)

    urm_inc_path = run_dir / "urm_incremental.ckpt"
    model_inc, history_inc = stage(
        "train-urm-incremental", lambda: _train_urm(ppm_inc_ckpt, ppm_inc_hash, urm_inc_path)
    )
    post_report = stage(
        "eval-incremental",
        lambda: evaluate_model(model_inc, dataset, feature_table(cache, len(dataset.catalog)),
                               report_cart=report_cart, step_count=history_inc.steps),
    )

    verify_provenance_chain(ppm_path, ppm_inc_path, urm_inc_path)

    report_path = run_dir / "reports" / "pipeline.jsonl"
    rows = []
    for tag, rep in (("pre_incremental", pre_report), ("post_incremental", post_report)):
        for r in rep.records():
            rows.append({"phase": tag, **r})
    write_records(rows, report_path)

    manifest = {
        "seed": seed,
        "gen_config": dataset.config.to_dict(),
        "stages": stage_log,
        "artifacts": {
            "dataset": str(dataset_dir),
            "encoders": str(encoders_path),
            "cache": str(cache_path),
            "ppm": str(ppm_path),
            "urm": str(urm_path),
            "ppm_incremental": str(ppm_inc_path),
            "urm_incremental": str(urm_inc_path),
        },
        "hashes": {
            "ppm": ppm_hash,
            "ppm_incremental": ppm_inc_hash,
            "urm": file_hash(urm_path),
            "urm_incremental": file_hash(urm_inc_path),
        },
        "pre_incremental_avg_auc": pre_report.avg_auc,
        "post_incremental_avg_auc": post_report.avg_auc,
    }
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    return PipelineArtifacts(
        run_dir=run_dir,
        dataset_dir=dataset_dir,
        encoders_path=encoders_path,
        cache_path=cache_path,
        ppm_path=ppm_path,
        urm_path=urm_path,
        ppm_inc_path=ppm_inc_path,
        urm_inc_path=urm_inc_path,
        report_path=report_path,
        manifest_path=manifest_path,
        pre_auc=pre_report.avg_auc,
        post_auc=post_report.avg_auc,
    )


def verify_provenance_chain(ppm_path, ppm_inc_path, urm_inc_path):
    """Check the metadata hash chain: incremental URM <- incremental PPM <- PPM."""
    ppm_hash = file_hash(ppm_path)
    inc = Checkpoint.load(ppm_inc_path, kind="PPM")
    if inc.metadata.get("parent_checkpoint_hash") != ppm_hash:
        raise PipelineStageError(
            "verify-provenance", "incremental content checkpoint does not chain to the offline one"
        )
    urm_inc = Checkpoint.load(urm_inc_path, kind="URM")
    if urm_inc.metadata.get("ppm_checkpoint_hash") != file_hash(ppm_inc_path):
        raise PipelineStageError(
            "verify-provenance", "incremental ranker does not chain to the incremental content model"
        )
    return True
