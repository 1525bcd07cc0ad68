"""Command-line pipeline: data generation through ablation and incremental updates.

Every command takes ``--workdir`` (artifact directory), ``--config`` (JSON,
see config.py), and ``--seed``. Exit status is 0 on success; failures print
the failing stage on stderr and exit nonzero. Deterministic outputs (reports,
checkpoints, caches, datasets) are bitwise reproducible for a fixed seed;
wall-clock timings go to separate ``*_meta.json`` files so reruns stay
byte-identical.
"""

import os

# single-threaded math before numpy loads anywhere: keeps CLI runs bitwise
# reproducible regardless of the host's core count
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from .errors import PlugRankError, PipelineStageError

log = logging.getLogger("plugrank")


def _fail(stage, exc):
    click.echo(f"error at stage '{stage}': {exc}", err=True)
    sys.exit(1)


def _write_meta(workdir, command, seconds, extra=None):
    meta_dir = Path(workdir) / "reports"
    meta_dir.mkdir(parents=True, exist_ok=True)
    meta = {"command": command, "runtime_seconds": round(seconds, 3)}
    if extra:
        meta.update(extra)
    (meta_dir / f"{command}_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _load(workdir):
    from .data import load_dataset

    data_dir = Path(workdir) / "data"
    if not data_dir.exists():
        raise PipelineStageError("load-data", f"no dataset under {data_dir}; run gen-data first")
    return load_dataset(data_dir)


common = [
    click.option("--workdir", default="run", show_default=True, help="artifact directory"),
    click.option("--config", "config_path", default=None, help="JSON config file"),
    click.option("--seed", default=0, show_default=True, type=int),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Desk-scale plug-in CTR pretraining and unified ranking experiments."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("gen-data")
@with_common
def gen_data(workdir, config_path, seed):
    """Generate the synthetic dataset into WORKDIR/data."""
    from .config import load_config
    from .data import generate, save_dataset

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        dataset = generate(cfg.data, seed)
        out = save_dataset(dataset, Path(workdir) / "data")
    except PlugRankError as exc:
        _fail("gen-data", exc)
    click.echo(f"dataset written to {out} ({dataset.stats['n_train']} train / {dataset.stats['n_test']} test)")
    _write_meta(workdir, "gen-data", time.time() - t0, {"stats": dataset.stats})


@main.command("train-modenc")
@with_common
def train_modenc(workdir, config_path, seed):
    """Train the text and vision encoders on the dataset's query pairs and catalog."""
    from .config import load_config
    from .encoders import save_encoders, train_encoders
    from .experiments import write_records

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        dataset = _load(workdir)
        text_enc, vision_enc, history = train_encoders(dataset, cfg.encoders, seed)
        path = save_encoders(Path(workdir) / "encoders.ckpt", text_enc, vision_enc)
        rows = []
        for metric, values in history.items():
            for epoch, value in enumerate(values):
                rows.append({"metric": metric, "epoch": epoch,
                             "value": None if value is None else float(value)})
        write_records(rows, Path(workdir) / "reports" / "train-modenc.jsonl")
    except PlugRankError as exc:
        _fail("train-modenc", exc)
    click.echo(f"encoders written to {path}")
    _write_meta(workdir, "train-modenc", time.time() - t0)


def _load_encoders(workdir, cfg, untrained, dataset, seed):
    from .encoders import TextEncoder, VisionEncoder, load_encoders

    if untrained:
        text_enc = TextEncoder(dataset.config.vocab_size, cfg.encoders.text_dim, seed)
        vision_enc = VisionEncoder(
            dataset.config.image_dim, cfg.encoders.vision_dim, dataset.config.n_entities, seed
        )
        text_enc.freeze()
        vision_enc.freeze()
        return text_enc, vision_enc
    path = Path(workdir) / "encoders.ckpt"
    if not path.exists():
        raise PipelineStageError("load-encoders", f"{path} missing; run train-modenc first")
    return load_encoders(path, dataset.config, cfg.encoders)


@main.command("export-features")
@with_common
@click.option("--untrained", is_flag=True, help="use frozen untrained encoders (Base variant)")
def export_features(workdir, config_path, seed, untrained):
    """Export per-item modal features to a JSONL table."""
    from .config import load_config
    from .encoders import export_feature_matrix

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        dataset = _load(workdir)
        text_enc, vision_enc = _load_encoders(workdir, cfg, untrained, dataset, seed)
        matrix, version = export_feature_matrix(dataset.catalog, text_enc, vision_enc)
        name = "features_untrained.jsonl" if untrained else "features.jsonl"
        out = Path(workdir) / name
        with open(out, "w", encoding="utf-8") as f:
            f.write(json.dumps({"encoder_version": version.hex(), "dim": matrix.shape[1]}) + "\n")
            for item_id in range(matrix.shape[0]):
                f.write(json.dumps(
                    {"item_id": item_id, "feature": [float(v) for v in matrix[item_id]]},
                    separators=(",", ":"),
                ) + "\n")
    except PlugRankError as exc:
        _fail("export-features", exc)
    click.echo(f"features written to {out}")
    _write_meta(workdir, "export-features", time.time() - t0)


@main.command("build-cache")
@with_common
@click.option("--untrained", is_flag=True, help="build the untrained-encoder cache")
def build_cache_cmd(workdir, config_path, seed, untrained):
    """Build the binary feature cache from exported features."""
    from .cache import FeatureCache, build_cache_from_matrix

    t0 = time.time()
    try:
        src = Path(workdir) / ("features_untrained.jsonl" if untrained else "features.jsonl")
        if not src.exists():
            raise PipelineStageError("build-cache", f"{src} missing; run export-features first")
        with open(src, encoding="utf-8") as f:
            header = json.loads(f.readline())
            version = bytes.fromhex(header["encoder_version"])
            rows = [json.loads(line) for line in f]
        ids = np.array([r["item_id"] for r in rows], dtype=np.uint64)
        matrix = np.array([r["feature"] for r in rows], dtype=np.float32)
        out = Path(workdir) / ("modal_untrained.cache" if untrained else "modal.cache")
        build_cache_from_matrix(ids, matrix, version, out)
        FeatureCache.open(out)  # verify what we just wrote
    except PlugRankError as exc:
        _fail("build-cache", exc)
    click.echo(f"cache written to {out}")
    _write_meta(workdir, "build-cache", time.time() - t0)


@main.command("pretrain-ppm")
@with_common
@click.option("--days", default=None, help="train-day window lo:hi (default: 0:test_day-2)")
def pretrain_ppm(workdir, config_path, seed, days):
    """Pretrain the content CTR model on cached modal features."""
    from .cache import FeatureCache
    from .config import load_config
    from .experiments import write_records
    from .pretrain import pretrain

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        dataset = _load(workdir)
        cache_path = Path(workdir) / "modal.cache"
        if not cache_path.exists():
            raise PipelineStageError("pretrain-ppm", f"{cache_path} missing; run build-cache first")
        cache = FeatureCache.open(cache_path)
        test_day = int(dataset.stats["test_day"])
        day_range = tuple(int(x) for x in days.split(":")) if days else (0, test_day - 2)
        _, ckpt, history = pretrain(dataset, cache, cfg.ppm, seed, day_range=day_range)
        out = Path(workdir) / "checkpoints" / "ppm.ckpt"
        ckpt.save(out)
        rows = [{"metric": "train_loss", "epoch": i, "value": v}
                for i, v in enumerate(history.epoch_loss)]
        rows += [{"metric": "val_auc", "epoch": i, "value": v}
                 for i, v in enumerate(history.val_auc)]
        write_records(rows, Path(workdir) / "reports" / "pretrain-ppm.jsonl")
    except PlugRankError as exc:
        _fail("pretrain-ppm", exc)
    click.echo(f"content checkpoint written to {out} (val AUC {history.val_auc[-1]})")
    _write_meta(workdir, "pretrain-ppm", time.time() - t0)


_VARIANT_MAP = {"base": ("shared", False), "qmep": ("shared", True), "urm": ("urm", True)}


@main.command("train-urm")
@with_common
@click.option("--variant", type=click.Choice(["base", "qmep", "urm"]), default="urm", show_default=True)
@click.option("--ppm-mode", type=click.Choice(["random", "frozen", "finetune"]), default="finetune",
              show_default=True, help="how pretraining weights enter the plug-in tower (urm variant)")
@click.option("--days", default=None, help="train-day window lo:hi (default: test_day-1)")
@click.option("--fraction", default=1.0, show_default=True, type=float,
              help="uniform subsample of the training window")
def train_urm_cmd(workdir, config_path, seed, variant, ppm_mode, days, fraction):
    """Train a unified ranker variant; reads the feature cache and, for
    frozen/finetune, the pretraining checkpoint."""
    from .cache import FeatureCache
    from .checkpoint import Checkpoint, file_hash
    from .config import load_config
    from .data import subsample
    from .experiments import write_records
    from .ranker import PluginMode, train_urm

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        dataset = _load(workdir)
        wiring, trained = _VARIANT_MAP[variant]
        cache_name = "modal.cache" if trained else "modal_untrained.cache"
        cache_path = Path(workdir) / cache_name
        if not cache_path.exists():
            raise PipelineStageError("train-urm", f"{cache_path} missing; run build-cache first")
        cache = FeatureCache.open(cache_path)
        test_day = int(dataset.stats["test_day"])
        day_range = tuple(int(x) for x in days.split(":")) if days else (test_day - 1, test_day - 1)
        if fraction < 1.0:
            dataset = subsample(dataset, fraction, seed)

        mode = None
        ppm_ckpt = None
        ppm_hash = None
        if wiring == "urm":
            mode = {"random": PluginMode.RANDOM_INIT, "frozen": PluginMode.FROZEN,
                    "finetune": PluginMode.FINETUNE}[ppm_mode]
            if mode is not PluginMode.RANDOM_INIT:
                ppm_path = Path(workdir) / "checkpoints" / "ppm.ckpt"
                if not ppm_path.exists():
                    raise PipelineStageError("train-urm", f"{ppm_path} missing; run pretrain-ppm first")
                ppm_ckpt = Checkpoint.load(ppm_path, kind="PPM")
                ppm_hash = file_hash(ppm_path)
        _, ckpt, history = train_urm(
            dataset, cache, cfg.urm, seed, variant=wiring, plugin_mode=mode,
            ppm_checkpoint=ppm_ckpt, ppm_hash=ppm_hash, day_range=day_range,
        )
        ckpt.metadata["cli_variant"] = variant
        ckpt.metadata["features"] = "trained" if trained else "untrained"
        suffix = f"{variant}_{ppm_mode}" if wiring == "urm" else variant
        out = Path(workdir) / "checkpoints" / f"urm_{suffix}.ckpt"
        ckpt.save(out)
        rows = [{"metric": "train_loss", "epoch": i, "value": v}
                for i, v in enumerate(history.epoch_loss)]
        rows += [{"metric": "val_click_auc", "epoch": i, "value": v}
                 for i, v in enumerate(history.val_click_auc)]
        write_records(rows, Path(workdir) / "reports" / f"train-urm_{suffix}.jsonl")
    except PlugRankError as exc:
        _fail("train-urm", exc)
    click.echo(f"ranker checkpoint written to {out}")
    _write_meta(workdir, "train-urm", time.time() - t0)


@main.command("eval")
@with_common
@click.option("--checkpoint", "ckpt_path", required=True, help="ranker checkpoint to score")
def eval_cmd(workdir, config_path, seed, ckpt_path):
    """Evaluate a ranker checkpoint on the held-out test day."""
    from .cache import FeatureCache
    from .checkpoint import Checkpoint
    from .config import load_config
    from .experiments import evaluate_model, write_records
    from .pretrain import feature_table
    from .ranker import IDVocab, UnifiedRankingModel

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        dataset = _load(workdir)
        ckpt = Checkpoint.load(ckpt_path, kind="URM")
        variant = ckpt.metadata.get("variant")
        model = UnifiedRankingModel(
            cfg.urm, IDVocab.from_config(dataset.config), seed=ckpt.metadata.get("train_seed", 0),
            variant=variant,
        )
        ckpt.load_into(model.pset)
        cache_name = "modal.cache" if ckpt.metadata.get("features", "trained") == "trained" \
            else "modal_untrained.cache"
        cache = FeatureCache.open(Path(workdir) / cache_name)
        report = evaluate_model(model, dataset, feature_table(cache, len(dataset.catalog)),
                                step_count=ckpt.metadata.get("step_count", 0))
        name = Path(ckpt_path).stem
        out = write_records(report.records(), Path(workdir) / "reports" / f"eval_{name}.jsonl")
    except PlugRankError as exc:
        _fail("eval", exc)
    click.echo(f"report written to {out} (avg AUC {report.avg_auc:.4f})")
    _write_meta(workdir, "eval", time.time() - t0)


@main.command("ablation")
@with_common
def ablation_cmd(workdir, config_path, seed):
    """Run the contrast-model grid over the configured seeds."""
    from .config import load_config
    from .data import generate
    from .experiments import run_ablation, write_records

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        data_dir = Path(workdir) / "data"
        dataset = _load(workdir) if data_dir.exists() else generate(cfg.data, seed)
        report = run_ablation(dataset, cfg.experiment, urm_cfg=cfg.urm, ppm_cfg=cfg.ppm,
                              enc_cfg=cfg.encoders)
        out = write_records(report.records(), Path(workdir) / "reports" / "ablation.jsonl")
        failed = [c for c in report.cells if c.error]
    except PlugRankError as exc:
        _fail("ablation", exc)
    for name in report.ordering:
        stats = report.summary[name]
        click.echo(f"{name}: avg AUC {stats['avg_auc_mean']:.4f} +/- {stats['avg_auc_sd']:.4f}")
    click.echo(f"report written to {out}")
    _write_meta(workdir, "ablation", time.time() - t0)
    if failed:
        click.echo(f"{len(failed)} grid cells failed (flagged in report)", err=True)
        sys.exit(1)


@main.command("pipeline")
@with_common
def pipeline_cmd(workdir, config_path, seed):
    """Full offline flow plus one incremental update round."""
    from .config import load_config
    from .experiments import run_pipeline

    t0 = time.time()
    try:
        cfg = load_config(config_path)
        artifacts = run_pipeline(Path(workdir), cfg.data, seed, enc_cfg=cfg.encoders,
                                 ppm_cfg=cfg.ppm, urm_cfg=cfg.urm)
    except PipelineStageError as exc:
        _fail(exc.stage, exc)
    except PlugRankError as exc:
        _fail("pipeline", exc)
    click.echo(
        f"pipeline complete: pre-incremental avg AUC {artifacts.pre_auc:.4f}, "
        f"post-incremental {artifacts.post_auc:.4f}"
    )
    click.echo(f"manifest: {artifacts.manifest_path}")
    _write_meta(workdir, "pipeline", time.time() - t0)


if __name__ == "__main__":
    main()
