"""Pretraining and the scarce-label fine-tuning protocol.

``pretrain`` trains a backbone with either a classifier head (cross-entropy)
or an embedding head plus proxies (ProxyNCA) and writes a checkpoint.
``finetune`` runs one training job per (seed, fold): draw ``n_c`` items per
class, split, train from a random or transferred backbone, and record the test
accuracy as a :class:`RunRecord` JSON file under ``<out>/runs``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..augment import AugmentConfig
from ..datasets import (
    PatchDataset,
    compute_channel_stats,
    count_from_percent,
    holdout_split,
    kfold_split,
    load_folder,
    subsample_indices,
)
from ..errors import (
    ConfigError,
    ContractError,
    IncompatibleCheckpointError,
    SamplingError,
    SplitError,
    TrainingAbort,
)
from ..losses import init_proxies
from ..models import Checkpoint, HeadSpec, build_backbone, build_head, load_checkpoint, make_checkpoint, save_checkpoint, transfer_strip
from .config import RunConfig
from .training import Model, accuracy, fit, scale_head_to_features

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    run_id: str
    config: dict
    seed: int
    init: str
    n_c: int | None = None
    r_percent: float | None = None
    class_size: int | None = None
    fold: int | None = None
    epochs: list[dict] = field(default_factory=list)
    test_accuracy: float | None = None
    wall_time: float = 0.0
    abort_reason: str | None = None
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    train_histogram: list[int] = field(default_factory=list)

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.run_id}.json"
        path.write_text(self.to_json())
        return path


def derive_seed(*parts: int) -> int:
    """Independent 32-bit seed for a (run seed, purpose) pair."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def augment_config(cfg: RunConfig, mean, std) -> AugmentConfig:
    return AugmentConfig(
        pad_fraction=cfg.pad_fraction, crop_size=cfg.crop_size, jitter_threshold=cfg.jitter,
        rotation_mode=cfg.rotation, flip_prob=cfg.flip_prob, channel_mean=tuple(float(m) for m in mean),
        channel_std=tuple(float(s) for s in std), resize_target=cfg.resize,
    )


def _eval_augment(aug: AugmentConfig) -> AugmentConfig:
    return AugmentConfig.no_augmentation(
        crop_size=aug.crop_size, channel_mean=aug.channel_mean, channel_std=aug.channel_std,
        resize_target=aug.resize_target,
    )


def _checked_stats(images: np.ndarray, indices) -> tuple[np.ndarray, np.ndarray]:
    mean, std = compute_channel_stats(images, indices)
    if np.any(std <= 0):
        raise ConfigError(f"training images have a constant channel (std={std.tolist()}); cannot normalize")
    return mean, std


def _fit_kwargs(cfg: RunConfig, seed: int, aug: AugmentConfig, loss: str) -> dict:
    return dict(
        epochs=cfg.resolved_epochs(), schedule=cfg.schedule_obj(), seed=seed, augment=aug,
        batch_size=cfg.batch_size, loss=loss, squared_distance=cfg.squared_distance,
        per_example_updates=cfg.per_example_updates, proxy_lr_scale=cfg.proxy_lr_scale,
    )


# -- pretraining ----------------------------------------------------------------------

def pretrain(cfg: RunConfig, dataset: PatchDataset | None = None) -> Checkpoint:
    """Train on the weakly labeled set and write ``<out>/pretrain_<method>.ckpt``.

    Raises :class:`TrainingAbort` (after writing the failed record) when the
    optimizer meets a non-finite loss or gradient.
    """
    cfg.validate(check_paths=dataset is None)
    if cfg.task != "pretrain":
        raise ConfigError(f"pretrain called with task={cfg.task}")
    ds = dataset if dataset is not None else load_folder(cfg.data)
    if ds.num_classes < 2:
        raise ConfigError(f"pretraining needs >= 2 classes, dataset has {ds.num_classes}")
    seed = cfg.seeds[0]
    arch = cfg.arch_spec()
    indices = np.arange(len(ds))
    mean, std = _checked_stats(ds.images, indices)
    aug = augment_config(cfg, mean, std)
    backbone = build_backbone(arch, derive_seed(seed, 1))
    if cfg.method == "classification":
        model = Model(backbone, build_head(HeadSpec("classifier", ds.num_classes), arch.feature_dim, derive_seed(seed, 2)))
        loss = "cross_entropy"
    else:
        head = build_head(HeadSpec("embedding", cfg.embedding_dim), arch.feature_dim, derive_seed(seed, 2))
        model = Model(backbone, head, init_proxies(ds.num_classes, cfg.embedding_dim, derive_seed(seed, 3)))
        loss = "proxynca"

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(f"pretrain_{cfg.method}_seed{seed}", cfg.to_dict(), seed, cfg.method)
    start = time.perf_counter()
    try:
        history = fit(model, ds.images, ds.labels, indices, **_fit_kwargs(cfg, seed, aug, loss))
    except TrainingAbort as exc:
        record.abort_reason = exc.reason
        record.epochs = [h.to_dict() for h in exc.history]
        record.wall_time = time.perf_counter() - start
        record.save(out / "pretrain")
        raise
    record.epochs = [h.to_dict() for h in history]
    record.wall_time = time.perf_counter() - start
    record.save(out / "pretrain")
    provenance = {
        "method": cfg.method, "seed": seed, "epochs": cfg.resolved_epochs(),
        "channel_mean": [float(m) for m in mean], "channel_std": [float(s) for s in std],
        "class_names": ds.class_names, "dataset": ds.provenance,
        "final_loss": history[-1].loss, "final_train_accuracy": history[-1].train_accuracy,
    }
    ckpt = make_checkpoint(model.backbone, model.head, model.proxies, provenance)
    save_checkpoint(ckpt, out / f"pretrain_{cfg.method}.ckpt")
    log.info("pretrain %s done: loss %.4f -> %.4f", cfg.method, history[0].loss, history[-1].loss)
    return ckpt


# -- fine-tuning ------------------------------------------------------------------------

@dataclass
class _Job:
    seed: int
    fold: int | None
    train: np.ndarray
    test: np.ndarray


def _resolve_n_c(cfg: RunConfig, class_size: int) -> int:
    if cfg.n_c is not None:
        return cfg.n_c
    if cfg.r_percent is not None:
        return max(1, count_from_percent(cfg.r_percent, class_size))
    return class_size


def _plan_jobs(cfg: RunConfig, ds: PatchDataset, test_ds: PatchDataset | None) -> tuple[list[_Job], int, int]:
    """All (seed, fold) jobs, validated before any training starts."""
    jobs = []
    if cfg.protocol == "kfold":
        if test_ds is not None:
            raise ConfigError("k-fold protocol uses a single dataset; drop test_data or use protocol=holdout")
        class_size = int(ds.class_histogram().min())
        n_c = _resolve_n_c(cfg, class_size)
        if n_c > class_size:
            raise SamplingError(f"n_c={n_c} exceeds the smallest class ({class_size})")
        if n_c < cfg.folds:
            raise SplitError(f"n_c={n_c} per class is fewer than folds={cfg.folds}")
        for seed in cfg.seeds:
            pool = subsample_indices(ds.labels, n_c, derive_seed(seed, 10), ds.num_classes)
            plans = kfold_split(ds.subset(pool), cfg.folds, derive_seed(seed, 11))
            for plan in plans[: cfg.fold_limit]:
                jobs.append(_Job(seed, plan.fold_index, pool[plan.train_indices], pool[plan.test_indices]))
        return jobs, n_c, class_size

    if test_ds is not None:
        if test_ds.class_names != ds.class_names:
            raise ConfigError("train and test datasets have different class names")
        pool = np.arange(len(ds))
        test = np.arange(len(test_ds))
    else:
        if cfg.test_per_class is None:
            raise ConfigError("holdout protocol needs test_data or test_per_class")
        split = holdout_split(ds, cfg.test_per_class, cfg.split_seed)
        pool, test = split.train_indices, split.test_indices
    class_size = int(np.bincount(ds.labels[pool], minlength=ds.num_classes).min())
    n_c = _resolve_n_c(cfg, class_size)
    if n_c > class_size:
        raise SamplingError(f"n_c={n_c} exceeds the smallest training class ({class_size})")
    for seed in cfg.seeds:
        chosen = pool[subsample_indices(ds.labels[pool], n_c, derive_seed(seed, 10), ds.num_classes)]
        jobs.append(_Job(seed, None, chosen, test))
    return jobs, n_c, class_size


def finetune(cfg: RunConfig, dataset: PatchDataset | None = None, test_dataset: PatchDataset | None = None,
             checkpoint: Checkpoint | None = None) -> list[RunRecord]:
    """Run every (seed, fold) fine-tuning job and persist one RunRecord per job.

    Configuration problems (incompatible checkpoint, ``n_c`` too large, too few
    items for the folds) raise before any training starts.  Aborted jobs are
    recorded with ``abort_reason`` and no accuracy.
    """
    cfg.validate(check_paths=dataset is None)
    ds = dataset if dataset is not None else load_folder(cfg.data)
    if test_dataset is None and cfg.test_data is not None:
        test_dataset = load_folder(cfg.test_data)
    arch = cfg.arch_spec()

    if checkpoint is None and cfg.init != "random":
        checkpoint = load_checkpoint(cfg.init)
    if checkpoint is not None:
        if checkpoint.arch != arch:
            raise IncompatibleCheckpointError(f"checkpoint arch {checkpoint.arch} differs from configured {arch}")
        init_label = cfg.label or checkpoint.provenance.get("method", "checkpoint")
    else:
        init_label = cfg.label or "random"

    jobs, n_c, class_size = _plan_jobs(cfg, ds, test_dataset)
    test_images = test_dataset.images if test_dataset is not None else ds.images
    test_labels = test_dataset.labels if test_dataset is not None else ds.labels
    test_refs = test_dataset.refs if test_dataset is not None else ds.refs
    test_prefix = "test:" if test_dataset is not None else ""
    loss_tag = "" if cfg.finetune_loss == "cross_entropy" else "_pnca"
    runs_dir = Path(cfg.out) / "runs"
    records = []
    for job in jobs:
        train_ids = [ds.refs[i] for i in job.train]
        test_ids = [test_prefix + test_refs[i] for i in job.test]
        if set(train_ids) & set(test_ids):
            raise ContractError("test item leaked into the training split")
        fold_tag = "" if job.fold is None else f"_fold{job.fold}"
        record = RunRecord(
            f"{init_label}{loss_tag}_nc{n_c}_seed{job.seed}{fold_tag}", cfg.to_dict(), job.seed, init_label,
            n_c=n_c, r_percent=100.0 * n_c / class_size, class_size=class_size, fold=job.fold,
            train_ids=train_ids, test_ids=test_ids,
            train_histogram=np.bincount(ds.labels[job.train], minlength=ds.num_classes).tolist(),
        )
        start = time.perf_counter()
        model = _fresh_model(cfg, ds.num_classes, job.seed, checkpoint)
        mean, std = _checked_stats(ds.images, job.train)
        aug = augment_config(cfg, mean, std)
        try:
            if cfg.head_init == "feature_scaled":
                scale_head_to_features(model, ds.images, job.train, _eval_augment(aug))
            history = fit(model, ds.images, ds.labels, job.train, freeze_backbone=cfg.freeze_backbone,
                          **_fit_kwargs(cfg, job.seed, aug, cfg.finetune_loss))
            record.epochs = [h.to_dict() for h in history]
            record.test_accuracy = accuracy(model, test_images, test_labels, job.test, _eval_augment(aug))
        except TrainingAbort as exc:
            record.abort_reason = exc.reason
            record.epochs = [h.to_dict() for h in exc.history]
        record.wall_time = time.perf_counter() - start
        record.save(runs_dir)
        if cfg.save_checkpoints and not record.aborted:
            prov = {"method": f"finetune:{init_label}", "seed": job.seed, "epochs": cfg.resolved_epochs(),
                    "channel_mean": list(aug.channel_mean), "channel_std": list(aug.channel_std)}
            save_checkpoint(make_checkpoint(model.backbone, model.head, model.proxies, prov),
                            runs_dir / f"{record.run_id}.ckpt")
        log.info("%s: accuracy %s", record.run_id, record.test_accuracy)
        records.append(record)
    return records


def _fresh_model(cfg: RunConfig, num_classes: int, seed: int, checkpoint: Checkpoint | None) -> Model:
    arch = cfg.arch_spec()
    if cfg.finetune_loss == "proxynca":
        spec = HeadSpec("embedding", cfg.embedding_dim)
        proxies = init_proxies(num_classes, cfg.embedding_dim, derive_seed(seed, 3))
    else:
        spec = HeadSpec("classifier", num_classes)
        proxies = None
    if checkpoint is None:
        backbone = build_backbone(arch, derive_seed(seed, 1))
        head = build_head(spec, arch.feature_dim, derive_seed(seed, 2))
    else:
        backbone, head = transfer_strip(checkpoint, spec, derive_seed(seed, 2), arch)
    return Model(backbone, head, proxies)


def load_records(runs_dir) -> list[RunRecord]:
    return [RunRecord.from_json(p.read_text()) for p in sorted(Path(runs_dir).glob("*.json"))]
