"""ProxyNCA and cross-entropy losses.

The ProxyNCA loss for one example with embedding ``a`` and label ``y`` is

    l = d(a_hat, p_hat_y) + log sum_{z != y} exp(-d(a_hat, z_hat))

where hats denote L2-normalized vectors and ``d`` is Euclidean distance.  This
is the same quantity as ``-log(exp(-d_pos) / sum exp(-d_neg))``; the positive
proxy is excluded from the denominator, so ``l`` can be negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ContractError, DegenerateInputError, DegenerateTaskError
from .tensorcore import Tensor


@dataclass
class ProxySet:
    """One trainable proxy row per class."""

    proxies: Tensor

    def __post_init__(self):
        if self.proxies.ndim != 2:
            raise ContractError(f"proxies must be 2-D, got shape {self.proxies.shape}")

    @property
    def num_classes(self) -> int:
        return self.proxies.shape[0]

    @property
    def dim(self) -> int:
        return self.proxies.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return np.arange(self.num_classes)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.proxies.data)))


@dataclass
class LossValue:
    value: Tensor
    per_example: Tensor

    def item(self) -> float:
        return self.value.item()


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    return labels


def init_proxies(num_classes: int, dim: int, seed: int, dtype=np.float32) -> ProxySet:
    """Gaussian rows with std 1/sqrt(dim), so row norms concentrate near 1."""
    if num_classes < 2:
        raise DegenerateTaskError(f"ProxyNCA needs at least 2 classes, got {num_classes}")
    if dim < 1:
        raise ContractError(f"proxy dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim)).astype(dtype)
    return ProxySet(Tensor(rows, requires_grad=True))


def proxy_assign(label: int, proxies: ProxySet) -> tuple[Tensor, Tensor]:
    """Split proxies into the row for ``label`` and all other rows (ascending class id)."""
    n = proxies.num_classes
    if not 0 <= int(label) < n:
        raise ContractError(f"label {label} out of range [0, {n})")
    others = np.array([c for c in range(n) if c != label], dtype=np.int64)
    return proxies.proxies[int(label)], proxies.proxies[others]


def proxynca_loss(embeddings: Tensor, labels, proxies: ProxySet, squared_distance: bool = False) -> LossValue:
    """Batch ProxyNCA loss on normalized embeddings and proxies."""
    c = proxies.num_classes
    if c < 2:
        raise DegenerateTaskError("ProxyNCA needs at least 2 classes (no negative proxies)")
    if embeddings.ndim != 2 or embeddings.shape[1] != proxies.dim:
        raise ContractError(f"embeddings {embeddings.shape} do not match proxy dim {proxies.dim}")
    labels = _check_labels(labels, c)
    if len(labels) != embeddings.shape[0]:
        raise ContractError(f"{len(labels)} labels for {embeddings.shape[0]} embeddings")
    try:
        a_hat = tc.l2_normalize(embeddings, axis=1)
        p_hat = tc.l2_normalize(proxies.proxies, axis=1)
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"proxynca_loss: zero-norm embedding or proxy ({exc})") from None
    dist = tc.pairwise_distances(a_hat, p_hat, squared=squared_distance)
    onehot = np.zeros(dist.shape, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    d_pos = tc.tsum(dist * onehot.astype(dist.dtype), axis=1)
    neg_term = tc.logsumexp(-dist, axis=1, mask=~onehot)
    per = d_pos + neg_term
    return LossValue(tc.mean(per), per)


def cross_entropy_loss(logits: Tensor, labels) -> LossValue:
    """Mean negative log-softmax probability of the true class."""
    if logits.ndim != 2:
        raise ContractError(f"logits must be 2-D, got shape {logits.shape}")
    labels = _check_labels(labels, logits.shape[1])
    if len(labels) != logits.shape[0]:
        raise ContractError(f"{len(labels)} labels for {logits.shape[0]} rows of logits")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    per = -tc.tsum(tc.log_softmax(logits, axis=1) * onehot, axis=1)
    return LossValue(tc.mean(per), per)


def nearest_proxy(embeddings: np.ndarray, proxies: np.ndarray) -> np.ndarray:
    """Class of the closest normalized proxy for each normalized embedding row.

    ``argmin`` returns the first minimum, so ties go to the lowest class id.
    """
    a = np.asarray(embeddings, dtype=np.float64)
    p = np.asarray(proxies, dtype=np.float64)
    a_norm = np.linalg.norm(a, axis=1, keepdims=True)
    p_norm = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(a_norm <= tc.NORM_EPS) or np.any(p_norm <= tc.NORM_EPS):
        raise DegenerateInputError("nearest_proxy: zero-norm embedding or proxy")
    a = a / a_norm
    p = p / p_norm
    d = np.sqrt(np.maximum(((a[:, None, :] - p[None, :, :]) ** 2).sum(-1), 0))
    return d.argmin(axis=1)
