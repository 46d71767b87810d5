"""Patch datasets: folder ingestion, procedural textures, scarcity sampling, splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import read_image, write_image
from .errors import ConfigError, ContractError, IngestionError, SamplingError, SplitError

# Texture-family parameters are drawn from this fixed stream, indexed by the
# global class id, so different ``class_offset`` ranges never share a family.
_FAMILY_SEED = 0x5EED_7E47


@dataclass
class PatchDataset:
    """Images stored as uint8 (N, 3, H, W) with dense class ids 0..C-1."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    refs: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ContractError(f"images must be N×3×H×W, got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.refs) != len(self.labels):
            raise ContractError("images, labels and refs differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ContractError("labels outside 0..C-1")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "PatchDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchDataset(
            self.images[idx], self.labels[idx], list(self.class_names),
            [self.refs[i] for i in idx], dict(self.provenance),
        )


@dataclass
class SplitPlan:
    kind: str  # "kfold" | "holdout"
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    fold_index: int = 0
    k: int = 1


# -- ingestion ----------------------------------------------------------------------

def load_folder(root) -> PatchDataset:
    """Read ``root/<class_name>/*.png``; classes and items in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist or is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"{root}: no class subdirectories")
    images, labels, refs = [], [], []
    shape = None
    for cid, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise IngestionError(f"{d}: class directory has no PNG files")
        for f in files:
            img = read_image(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise IngestionError(f"{f}: size {img.shape[1:]} differs from {shape[1:]}")
            images.append(img)
            labels.append(cid)
            refs.append(str(f.relative_to(root)))
    return PatchDataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], refs,
                        {"source": "folder", "root": str(root)})


def write_folder(ds: PatchDataset, root) -> Path:
    """Write the dataset as ``root/<class>/<item>.png`` plus ``manifest.json``."""
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for img, label, ref in zip(ds.images, ds.labels, ds.refs):
        stem = Path(ref).stem
        write_image(root / ds.class_names[label] / f"{stem}.png", img)
    manifest = {
        "provenance": ds.provenance,
        "class_names": ds.class_names,
        "per_class_counts": {n: int(c) for n, c in zip(ds.class_names, ds.class_histogram())},
        "image_size": list(ds.image_size),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


# -- synthetic textures -------------------------------------------------------------

def _family(k: int) -> dict:
    """Deterministic texture parameters for global class id ``k``."""
    rng = np.random.default_rng([_FAMILY_SEED, k])
    hue = (k * 0.6180339887) % 1.0
    sat = (0.35, 0.6)[k % 2]
    val = (0.55, 0.75)[(k // 2) % 2]
    tint = _hsv_to_rgb(hue, sat, val)
    return {
        "freq": float(rng.uniform(1.5, 6.0)),
        "theta": float(rng.uniform(0, np.pi)),
        "freq2": float(rng.uniform(1.5, 6.0)),
        "theta2": float(rng.uniform(0, np.pi)),
        "mix": float(rng.uniform(0.2, 0.8)),
        "color": rng.uniform(-1, 1, size=3),
        "tint": tint,
    }


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(np.array([h, s, v]))


def generate_synthetic(num_classes: int, n_per_class: int, size: int, seed: int, *,
                       class_offset: int = 0, noise: float = 0.1, amplitude: float = 0.25,
                       jitter: float = 0.05) -> PatchDataset:
    """Procedural texture classes.

    Class ``c`` uses the family with global id ``class_offset + c``: two
    oriented sinusoids with class-specific frequencies and orientations,
    modulating a class-specific color tint.  Each sample gets random phases,
    a small frequency/orientation jitter and i.i.d. Gaussian pixel noise.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if size < 16:
        raise ConfigError(f"image size must be >= 16, got {size}")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = np.empty((num_classes * n_per_class, 3, size, size), dtype=np.uint8)
    labels, refs, names = [], [], []
    i = 0
    for c in range(num_classes):
        k = class_offset + c
        fam = _family(k)
        names.append(f"class_{k:02d}")
        for j in range(n_per_class):
            f1 = fam["freq"] * (1 + rng.uniform(-jitter, jitter))
            f2 = fam["freq2"] * (1 + rng.uniform(-jitter, jitter))
            t1 = fam["theta"] + rng.uniform(-jitter, jitter)
            t2 = fam["theta2"] + rng.uniform(-jitter, jitter)
            ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
            w1 = np.sin(2 * np.pi * f1 * (xx * np.cos(t1) + yy * np.sin(t1)) + ph1)
            w2 = np.sin(2 * np.pi * f2 * (xx * np.cos(t2) + yy * np.sin(t2)) + ph2)
            pattern = (1 - fam["mix"]) * w1 + fam["mix"] * w2
            img = fam["tint"][:, None, None] + amplitude * pattern[None] * (0.6 + 0.4 * fam["color"][:, None, None])
            img = img + rng.normal(0, noise, size=img.shape)
            images[i] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
            labels.append(c)
            refs.append(f"class_{k:02d}/{j:05d}")
            i += 1
    provenance = {
        "source": "synthetic", "seed": int(seed), "num_classes": num_classes,
        "n_per_class": n_per_class, "size": size, "class_offset": class_offset,
        "noise": noise, "amplitude": amplitude, "jitter": jitter,
    }
    return PatchDataset(images, np.array(labels), names, refs, provenance)


# -- scarcity sampling and splits -----------------------------------------------------

def count_from_percent(r_percent: float, class_size: int) -> int:
    """Per-class count for R% of a class, rounding half up."""
    return int(math.floor(r_percent / 100.0 * class_size + 0.5))


def subsample_even(ds: PatchDataset, n_c: int, seed: int) -> PatchDataset:
    """Exactly ``n_c`` items per class, uniformly without replacement, dataset order kept."""
    hist = ds.class_histogram()
    if n_c < 1 or n_c > hist.min():
        raise SamplingError(f"cannot draw {n_c} per class; smallest class has {hist.min()}")
    return ds.subset(subsample_indices(ds.labels, n_c, seed, ds.num_classes))


def subsample_indices(labels: np.ndarray, n_c: int, seed: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if n_c > len(idx):
            raise SamplingError(f"class {c} has {len(idx)} items, cannot draw {n_c}")
        chosen.append(rng.choice(idx, size=n_c, replace=False))
    return np.sort(np.concatenate(chosen))


def kfold_split(ds: PatchDataset, k: int = 10, seed: int = 0) -> list[SplitPlan]:
    """Stratified k-fold; within each class the first ``n % k`` folds get one extra item."""
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    hist = ds.class_histogram()
    if hist.min() < k:
        raise SplitError(f"class {int(hist.argmin())} has {hist.min()} items, fewer than k={k}")
    rng = np.random.default_rng(seed)
    folds: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        for f, part in enumerate(np.array_split(idx, k)):
            folds[f].append(part)
    everything = np.arange(len(ds))
    plans = []
    for f in range(k):
        test = np.sort(np.concatenate(folds[f]))
        train = np.setdiff1d(everything, test, assume_unique=True)
        plans.append(SplitPlan("kfold", train, test, seed, f, k))
    return plans


def holdout_split(ds: PatchDataset, test_per_class: int, seed: int) -> SplitPlan:
    """Stratified train/test split with ``test_per_class`` test items per class."""
    hist = ds.class_histogram()
    if test_per_class < 1 or test_per_class >= hist.min():
        raise SplitError(f"test_per_class={test_per_class} leaves no training data (smallest class {hist.min()})")
    test = subsample_indices(ds.labels, test_per_class, seed, ds.num_classes)
    train = np.setdiff1d(np.arange(len(ds)), test, assume_unique=True)
    return SplitPlan("holdout", train, test, seed)


def compute_channel_stats(ds: PatchDataset | np.ndarray, indices: Sequence[int] | None = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std of pixel values in [0, 1]."""
    images = ds.images if isinstance(ds, PatchDataset) else np.asarray(ds)
    if indices is not None:
        images = images[np.asarray(indices, dtype=np.int64)]
    if len(images) == 0:
        raise ContractError("cannot compute channel statistics of an empty dataset")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    x = images.astype(np.float64).transpose(1, 0, 2, 3).reshape(3, -1) / scale
    return x.mean(axis=1), x.std(axis=1)
