"""Mini-batch training and prediction for classifier and ProxyNCA models."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .. import tensorcore as tc
from ..augment import AugmentConfig, transform_batch
from ..errors import ConfigError, ContractError, OptimizerError, TrainingAbort
from ..losses import ProxySet, cross_entropy_loss, nearest_proxy, proxynca_loss
from ..models import Backbone, Checkpoint, Head
from ..optim import Adam, Schedule, lr_at

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "proxynca")
EVAL_MODES = ("classifier", "nearest_proxy")


@dataclass
class Model:
    backbone: Backbone
    head: Head
    proxies: ProxySet | None = None

    @property
    def mode(self) -> str:
        return "classifier" if self.head.kind == "classifier" else "nearest_proxy"

    def parameters(self, include_backbone: bool = True) -> list[tc.Tensor]:
        params = self.backbone.parameters() if include_backbone else []
        params = params + self.head.parameters()
        if self.proxies is not None:
            params.append(self.proxies.proxies)
        return params

    def outputs(self, x: tc.Tensor) -> tc.Tensor:
        return self.head(self.backbone(x))


@dataclass
class EpochStats:
    epoch: int
    loss: float
    lr: float
    train_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def _predict_from_outputs(model: Model, out: np.ndarray) -> np.ndarray:
    if model.head.kind == "classifier":
        return out.argmax(axis=1)
    if model.proxies is None:
        raise ContractError("nearest-proxy prediction needs proxies")
    return nearest_proxy(out, model.proxies.proxies.data)


def fit(model: Model, images: np.ndarray, labels: np.ndarray, indices: Sequence[int], *,
        epochs: int, schedule: Schedule, seed: int, augment: AugmentConfig, batch_size: int = 32,
        loss: str | None = None, squared_distance: bool = False, per_example_updates: bool = False,
        freeze_backbone: bool = False, proxy_lr_scale: float = 1.0) -> list[EpochStats]:
    """Train ``model`` in place on ``images[indices]``.

    ``loss`` defaults to cross-entropy for classifier heads and ProxyNCA for
    embedding heads.  With ``per_example_updates`` every example in a batch
    triggers its own optimizer step.  A non-finite loss or gradient raises
    :class:`TrainingAbort` carrying the history so far.
    """
    loss = loss or ("cross_entropy" if model.head.kind == "classifier" else "proxynca")
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}")
    if loss == "proxynca" and (model.proxies is None or model.head.kind != "embedding"):
        raise ConfigError("proxynca training needs an embedding head and proxies")
    if loss == "cross_entropy" and model.head.kind != "classifier":
        raise ConfigError("cross-entropy training needs a classifier head")
    if epochs < 1 or batch_size < 1:
        raise ConfigError(f"epochs and batch_size must be >= 1 (got {epochs}, {batch_size})")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ContractError("no training items")

    params = model.parameters(include_backbone=not freeze_backbone)
    scales = [proxy_lr_scale if (model.proxies is not None and p is model.proxies.proxies) else 1.0 for p in params]
    opt = Adam(params, lr_scales=scales)
    frozen = model.backbone.parameters() if freeze_backbone else []
    for p in frozen:
        p.requires_grad = False

    def step(x: np.ndarray, y: np.ndarray, lr: float) -> tuple[float, np.ndarray]:
        out = model.outputs(tc.Tensor(x))
        if loss == "proxynca":
            value = proxynca_loss(out, y, model.proxies, squared_distance=squared_distance)
        else:
            value = cross_entropy_loss(out, y)
        lv = value.item()
        if not np.isfinite(lv):
            raise OptimizerError(f"non-finite loss {lv}")
        tc.backward(value.value)
        opt.step(lr)
        opt.zero_grad()
        return lv, _predict_from_outputs(model, out.data)

    history: list[EpochStats] = []
    try:
        # overflow surfaces through the explicit finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(epochs):
                lr = lr_at(schedule, epoch)
                order = np.random.default_rng(np.random.SeedSequence([int(seed), epoch, 1])).permutation(indices)
                total, correct = 0.0, 0
                for start in range(0, len(order), batch_size):
                    batch = order[start:start + batch_size]
                    x = transform_batch(images, batch, augment, train=True, run_seed=seed, epoch=epoch)
                    y = labels[batch]
                    if per_example_updates:
                        for i in range(len(batch)):
                            lv, pred = step(x[i:i + 1], y[i:i + 1], lr)
                            total += lv
                            correct += int(pred[0] == y[i])
                    else:
                        lv, pred = step(x, y, lr)
                        total += lv * len(batch)
                        correct += int((pred == y).sum())
                stats = EpochStats(epoch, total / len(order), lr, correct / len(order))
                history.append(stats)
                log.debug("epoch %d loss %.4f acc %.3f lr %.2e", epoch, stats.loss, stats.train_accuracy, lr)
    except OptimizerError as exc:
        raise TrainingAbort(f"epoch {len(history)}: {exc}", history) from None
    finally:
        for p in frozen:
            p.requires_grad = True
        opt.zero_grad()
    return history


def predict(model: Model, images: np.ndarray, indices: Sequence[int], augment: AugmentConfig,
            batch_size: int = 256) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    preds = []
    with tc.no_grad():
        for start in range(0, len(indices), batch_size):
            batch = indices[start:start + batch_size]
            x = transform_batch(images, batch, augment, train=False)
            preds.append(_predict_from_outputs(model, model.outputs(tc.Tensor(x)).data))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def feature_rms(model: Model, images: np.ndarray, indices: Sequence[int], augment: AugmentConfig,
                batch_size: int = 256) -> float:
    """Root mean square of backbone features over ``indices`` (eval transform)."""
    indices = np.asarray(indices, dtype=np.int64)
    total, count = 0.0, 0
    with tc.no_grad():
        for start in range(0, len(indices), batch_size):
            x = transform_batch(images, indices[start:start + batch_size], augment, train=False)
            f = model.backbone(tc.Tensor(x)).data.astype(np.float64)
            total += float(np.sum(f * f))
            count += f.size
    return float(np.sqrt(total / count)) if count else 0.0


def scale_head_to_features(model: Model, images: np.ndarray, indices: Sequence[int], augment: AugmentConfig) -> float:
    """Divide the head weights by the feature RMS so initial outputs have unit scale.

    Keeps a fresh head on a pretrained backbone (whose features may be far
    from unit scale) from starting with huge logits.  Returns the RMS used.
    """
    rms = feature_rms(model, images, indices, augment)
    if not np.isfinite(rms) or rms <= 0:
        raise TrainingAbort(f"cannot scale head: feature rms is {rms}")
    model.head.weight.data /= np.asarray(rms, dtype=model.head.weight.data.dtype)
    return rms


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, indices: Sequence[int],
             augment: AugmentConfig) -> float:
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, images, indices, augment) == labels[indices]))


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    return Model(ckpt.backbone(), ckpt.head(), ckpt.proxies())


def evaluate(ckpt: Checkpoint | Model, dataset, mode: str | None = None,
             augment: AugmentConfig | None = None) -> float:
    """Accuracy of a checkpoint (or in-memory model) on ``dataset``.

    ``classifier`` mode takes the argmax of the logits; ``nearest_proxy``
    mode takes the closest normalized proxy.  Ties go to the lowest class id.
    Without an explicit ``augment`` the normalization statistics stored in the
    checkpoint provenance are used.
    """
    model = ckpt if isinstance(ckpt, Model) else model_from_checkpoint(ckpt)
    mode = mode or model.mode
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if mode != model.mode:
        raise ContractError(f"{mode} evaluation needs a {'classifier' if mode == 'classifier' else 'embedding'} head")
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if augment is None:
        prov = {} if isinstance(ckpt, Model) else ckpt.provenance
        augment = AugmentConfig.no_augmentation(
            channel_mean=tuple(prov.get("channel_mean", (0.0, 0.0, 0.0))),
            channel_std=tuple(prov.get("channel_std", (1.0, 1.0, 1.0))),
        )
    return accuracy(model, dataset.images, dataset.labels, np.arange(len(dataset)), augment)
