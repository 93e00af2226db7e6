"""Datasets: synthetic long-tailed multi-label images, ChestX-ray14 ingestion,
seeded splits, batching and the stage-1 positive filter."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import mamsio
from .errors import ConfigError, InputError, UsageError

logger = logging.getLogger(__name__)

CHESTXRAY14_CLASSES = (
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
)
NO_FINDING = "No Finding"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Images plus a binary label matrix.

    Images come either from an in-memory array ``images`` of shape [M, c, H, W]
    (c == 1 is replicated to ``channels`` on load, as for grayscale radiographs)
    or from ``loader(indices) -> [n, channels, H, W]`` for lazily read files.
    """

    labels: np.ndarray
    class_names: List[str]
    images: Optional[np.ndarray] = None
    loader: Optional[Callable[[np.ndarray], np.ndarray]] = None
    split_tags: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None
    channels: int = 3
    item_names: Optional[List[str]] = None
    dropped: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.class_names):
            raise InputError(f"labels {self.labels.shape} do not match {len(self.class_names)} class names")
        if self.images is None and self.loader is None:
            raise InputError("dataset needs images or a loader")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def load(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if self.loader is not None:
            return self.loader(idx)
        imgs = self.images[idx]
        if imgs.shape[1] == 1 and self.channels != 1:
            imgs = np.repeat(imgs, self.channels, axis=1)
        return np.asarray(imgs, dtype=np.float64)

    def indices(self, split: Optional[str] = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        if self.split_tags is None:
            raise UsageError("dataset has not been split; call split() first")
        return np.flatnonzero(self.split_tags == split)

    def prevalence(self, split: Optional[str] = None) -> np.ndarray:
        return self.labels[self.indices(split)].mean(axis=0)


# -- synthetic data -----------------------------------------------------------


@dataclass
class SynthConfig:
    num_classes: int = 14
    num_images: int = 20000
    head_prevalence: float = 0.5
    tail_ratio: float = 0.7
    image_size: int = 32
    noise: float = 0.15
    seed: int = 0
    min_positives: int = 5
    sigma_range: Tuple[float, float] = (1.0, 4.0)
    aspect_range: Tuple[float, float] = (1.0, 3.0)
    max_frequency: float = 0.4
    class_names: Optional[List[str]] = None

    def prevalences(self) -> np.ndarray:
        """p_k = p_1 * rho^(k-1)."""
        return self.head_prevalence * self.tail_ratio ** np.arange(self.num_classes)

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_images < 1 or self.image_size < 4:
            raise ConfigError("synthetic dataset needs >=1 class, >=1 image and image_size >= 4")
        if not 0.0 < self.head_prevalence <= 1.0:
            raise ConfigError(f"head_prevalence must lie in (0, 1], got {self.head_prevalence}")
        if not 0.0 < self.tail_ratio <= 1.0:
            raise ConfigError(f"tail_ratio must lie in (0, 1], got {self.tail_ratio}")
        p_last = self.prevalences()[-1]
        if p_last < 5.0 / self.num_images:
            raise ConfigError(
                f"rarest class prevalence {p_last:.3g} < 5/M = {5.0 / self.num_images:.3g}; "
                "increase num_images or tail_ratio"
            )
        if self.min_positives > self.num_images:
            raise ConfigError("min_positives exceeds the number of images")


@dataclass
class ClassShape:
    sigma: float
    aspect: float
    angle: float
    frequency: float
    amplitude: float


def class_vocabulary(config: SynthConfig) -> List[ClassShape]:
    """Per-class blob geometry and texture, fixed by the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    lo, hi = config.sigma_range
    out = []
    for k in range(config.num_classes):
        out.append(ClassShape(
            sigma=float(rng.uniform(lo, hi)),
            aspect=float(rng.uniform(*config.aspect_range)),
            angle=float(rng.uniform(0.0, math.pi)),
            frequency=float(rng.uniform(0.0, config.max_frequency)),
            amplitude=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.2)),
        ))
    return out


def _render_class(rng, shape: ClassShape, n: int, size: int) -> np.ndarray:
    """n randomly placed, textured, rotated Gaussian blobs of one class."""
    margin = min(shape.sigma * 1.5, size / 3)
    cy = rng.uniform(margin, size - 1 - margin, size=n)[:, None, None]
    cx = rng.uniform(margin, size - 1 - margin, size=n)[:, None, None]
    phase = rng.uniform(0.0, 2 * math.pi, size=n)[:, None, None]
    jitter = rng.normal(0.0, 0.15, size=n)[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy[None] - cy, xx[None] - cx
    ang = shape.angle + jitter
    u = dx * np.cos(ang) + dy * np.sin(ang)
    v = -dx * np.sin(ang) + dy * np.cos(ang)
    su, sv = shape.sigma * shape.aspect, shape.sigma
    blob = np.exp(-0.5 * ((u / su) ** 2 + (v / sv) ** 2))
    texture = 0.5 + 0.5 * np.cos(2 * math.pi * shape.frequency * u + phase)
    return shape.amplitude * blob * texture


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Long-tailed multi-label images; class k is present independently with probability p_k.

    Images are single-channel (replicated to 3 on load). Deterministic in ``config.seed``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    m, k, size = config.num_images, config.num_classes, config.image_size
    labels = (rng.random((m, k)) < config.prevalences()[None, :]).astype(np.uint8)
    for c in range(k):
        short = config.min_positives - int(labels[:, c].sum())
        if short > 0:
            negatives = np.flatnonzero(labels[:, c] == 0)
            labels[rng.choice(negatives, size=short, replace=False), c] = 1

    images = rng.normal(0.0, config.noise, size=(m, 1, size, size))
    for c, shape in enumerate(class_vocabulary(config)):
        idx = np.flatnonzero(labels[:, c])
        if idx.size:
            images[idx, 0] += _render_class(rng, shape, idx.size, size)
    names = config.class_names or [f"class_{c:02d}" for c in range(k)]
    return Dataset(labels=labels, class_names=list(names), images=images)


# -- ChestX-ray14 ingestion ---------------------------------------------------


def parse_finding_labels(field_value: str, class_list: Sequence[str] = CHESTXRAY14_CLASSES) -> Tuple[np.ndarray, List[str]]:
    """Pipe-separated findings -> multi-hot vector, plus any unknown tokens."""
    vec = np.zeros(len(class_list), dtype=np.uint8)
    lookup = {name: i for i, name in enumerate(class_list)}
    unknown = []
    for token in field_value.split("|"):
        token = token.strip()
        if not token or token == NO_FINDING:
            continue
        key = token if token in lookup else token.replace(" ", "_")
        if key in lookup:
            vec[lookup[key]] = 1
        else:
            unknown.append(token)
    return vec, unknown


def load_radiograph(path: str, size: int = 224) -> np.ndarray:
    """8-bit grayscale image -> [3, size, size], bilinear resize, ImageNet normalization."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    mean = np.asarray(IMAGENET_MEAN)[:, None, None]
    std = np.asarray(IMAGENET_STD)[:, None, None]
    return (arr[None] - mean) / std


def ingest_chestxray14(
    label_csv_path,
    image_dir,
    class_list: Sequence[str] = CHESTXRAY14_CLASSES,
    image_size: int = 224,
) -> Dataset:
    """Read a ``Data_Entry_2017.csv``-style table ("Image Index", "Finding Labels", optional "Patient ID").

    Unknown disease tokens are skipped with a warning; rows whose image file is
    missing are dropped and counted. Images are read lazily.
    """
    names, rows, groups = [], [], []
    missing = 0
    with open(label_csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in ("Image Index", "Finding Labels"):
            if col not in cols:
                raise InputError(f"{label_csv_path}: missing column {col!r}")
        for lineno, rec in enumerate(reader, start=2):
            vec, unknown = parse_finding_labels(rec["Finding Labels"], class_list)
            for tok in unknown:
                logger.warning("%s:%d: unknown finding %r skipped", label_csv_path, lineno, tok)
            fname = rec["Image Index"].strip()
            if not os.path.exists(os.path.join(image_dir, fname)):
                missing += 1
                continue
            names.append(fname)
            rows.append(vec)
            groups.append(rec.get("Patient ID") or fname)
    if missing:
        logger.warning("%d rows dropped: image file not found under %s", missing, image_dir)
    if not rows:
        raise InputError(f"no usable rows in {label_csv_path}")

    def loader(idx: np.ndarray) -> np.ndarray:
        return np.stack([load_radiograph(os.path.join(image_dir, names[i]), image_size) for i in idx])

    ds = Dataset(
        labels=np.stack(rows),
        class_names=list(class_list),
        loader=loader,
        groups=np.asarray(groups),
        item_names=names,
        dropped=missing,
    )
    return ds


# -- export -------------------------------------------------------------------


def export_dataset(dataset: Dataset, directory) -> None:
    """``images.mams`` ([M, 3, H, W]) and ``labels.csv`` (item, split, one column per class)."""
    os.makedirs(directory, exist_ok=True)
    mamsio.save(os.path.join(directory, "images.mams"), dataset.load(np.arange(len(dataset))))
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item", "split"] + list(dataset.class_names))
        for i in range(len(dataset)):
            tag = dataset.split_tags[i] if dataset.split_tags is not None else ""
            w.writerow([i, tag] + dataset.labels[i].tolist())


def load_exported(directory) -> Dataset:
    images = mamsio.load(os.path.join(directory, "images.mams"))
    with open(os.path.join(directory, "labels.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    labels = np.array([[int(v) for v in r[2:]] for r in rows], dtype=np.uint8)
    tags = np.array([r[1] for r in rows])
    ds = Dataset(labels=labels, class_names=header[2:], images=images, channels=images.shape[1])
    if np.all(np.isin(tags, SPLITS)):
        ds.split_tags = tags
    return ds


# -- splitting and batching ---------------------------------------------------


def split(
    dataset: Dataset,
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    by_group: bool = False,
) -> Dataset:
    """Tag every item train/val/test from a seeded permutation.

    Train and val sizes are floored, test takes the remainder. With ``by_group``
    whole groups (patients) are assigned together, so sizes are approximate.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    m = len(dataset)
    rng = np.random.default_rng(seed)
    tags = np.empty(m, dtype="<U5")
    if by_group:
        if dataset.groups is None:
            raise ConfigError("by_group split needs group ids (e.g. Patient ID)")
        uniq = np.unique(dataset.groups)
        order = rng.permutation(uniq.size)
        gid = np.searchsorted(uniq, dataset.groups)
        counts = np.bincount(gid, minlength=uniq.size)
        cum = np.cumsum(counts[order])
        n_train, n_val = math.floor(fractions[0] * m), math.floor(fractions[1] * m)
        group_tag = np.empty(uniq.size, dtype="<U5")
        group_tag[order] = np.where(cum <= n_train, "train", np.where(cum <= n_train + n_val, "val", "test"))
        tags[:] = group_tag[gid]
    else:
        perm = rng.permutation(m)
        n_train = math.floor(fractions[0] * m)
        n_val = math.floor(fractions[1] * m)
        tags[perm[:n_train]] = "train"
        tags[perm[n_train:n_train + n_val]] = "val"
        tags[perm[n_train + n_val:]] = "test"
    for name, frac in zip(SPLITS, fractions):
        if frac > 0 and not np.any(tags == name):
            raise ConfigError(f"split {name!r} is empty for M={m}")
    out = dataclasses.replace(dataset, split_tags=tags)
    missing = np.flatnonzero(out.labels[tags == "train"].sum(axis=0) == 0)
    for c in missing:
        logger.warning("class %s has no positive example in the train split", dataset.class_names[c])
    return out


def stage1_filter(dataset: Dataset, indices) -> np.ndarray:
    """Keep only items with at least one positive label."""
    idx = np.asarray(indices, dtype=np.int64)
    return idx[dataset.labels[idx].any(axis=1)]


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.indices.size


def batch(
    dataset: Dataset,
    split_name: Optional[str],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    positive_only: bool = False,
    drop_last: bool = False,
) -> Iterator[Batch]:
    """One pass over a split. Positive filtering happens before batching, so every
    batch except possibly the last has exactly ``batch_size`` items."""
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    idx = dataset.indices(split_name)
    if positive_only:
        idx = stage1_filter(dataset, idx)
    if idx.size == 0:
        raise ConfigError(f"split {split_name!r} has no items to batch")
    if shuffle_seed is not None:
        idx = idx[np.random.default_rng(shuffle_seed).permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        if drop_last and chunk.size < batch_size:
            return
        yield Batch(chunk, dataset.load(chunk), dataset.labels[chunk].astype(np.float64))


def repeat_batches(
    dataset: Dataset,
    split_name: str,
    batch_size: int,
    seed: int,
    positive_only: bool = False,
) -> Iterator[Batch]:
    """Endless epochs of exactly ``batch_size`` items, reshuffled each epoch.

    The partial batch at the end of an epoch is dropped. A pool smaller than one
    batch is served whole (with a warning); pools of one item are rejected since
    batch statistics need N >= 2.
    """
    idx = dataset.indices(split_name)
    pool = stage1_filter(dataset, idx).size if positive_only else idx.size
    if pool < 2:
        raise ConfigError(f"split {split_name!r} has {pool} usable items; batches need at least 2")
    full = pool >= batch_size
    if not full:
        logger.warning("split %r has %d usable items < batch size %d; using the whole pool per step",
                       split_name, pool, batch_size)
    epoch = 0
    while True:
        epoch_seed = int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
        yield from batch(dataset, split_name, batch_size, epoch_seed, positive_only, drop_last=full)
        epoch += 1
