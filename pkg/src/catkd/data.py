"""Datasets, deterministic reductions and the label-free / label-poisoned views.

Everything is held in memory as float tensors.  CIFAR-10/100, STL-10 and
Tiny-ImageNet are read from their standard on-disk layouts under a local root
(never downloaded); ``synthetic-blobs`` is generated on the fly.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataMissingError, PolicyError

DATASETS = ("cifar100", "cifar10", "stl10", "tiny-imagenet", "synthetic-blobs")
NUM_CLASSES = {"cifar100": 100, "cifar10": 10, "stl10": 10, "tiny-imagenet": 200}
DATA_ROOT_ENV = "CATKD_DATA"

# Per-channel statistics used to standardize the CIFAR family.
_MEAN_STD = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic-blobs"
    split: str = "train"
    root: Optional[str] = None
    num_classes: Optional[int] = None
    per_class: int = 100
    class_subset: Optional[tuple] = None
    ratio: float = 1.0
    augmentation: str = "none"
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ConfigError(f"dataset.name: expected one of {DATASETS}, got {self.name!r}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"dataset.split: expected train or test, got {self.split!r}")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"dataset.ratio: must lie in (0, 1], got {self.ratio}")
        if self.augmentation not in ("standard-crop-flip", "none"):
            raise ConfigError(f"dataset.augmentation: expected standard-crop-flip or none, got {self.augmentation!r}")
        if self.class_subset is not None:
            subset = tuple(int(c) for c in self.class_subset)
            if not subset or min(subset) < 0 or max(subset) >= self.classes:
                raise ConfigError(f"dataset.class_subset: must be a nonempty subset of [0, {self.classes})")
            object.__setattr__(self, "class_subset", subset)

    @property
    def classes(self) -> int:
        if self.name == "synthetic-blobs":
            return self.num_classes or 10
        return NUM_CLASSES[self.name]

    def to_dict(self):
        d = asdict(self)
        if self.class_subset is not None:
            d["class_subset"] = list(self.class_subset)
        return d


@dataclass
class ArrayDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    ids: torch.Tensor

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "ArrayDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return ArrayDataset(self.images[index], self.labels[index], self.num_classes, self.ids[index])

    def class_counts(self):
        return torch.bincount(self.labels, minlength=self.num_classes)


class LabelFreeView:
    """Images-only view of a dataset; there is no way to reach the labels through it."""

    def __init__(self, dataset: ArrayDataset):
        self._images = dataset.images
        self._ids = dataset.ids

    def __len__(self):
        return len(self._images)

    @property
    def images(self):
        return self._images


def poison_labels(dataset: ArrayDataset, seed: int = 0) -> ArrayDataset:
    """Copy of ``dataset`` with its labels randomly permuted."""
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(dataset), generator=g)
    return ArrayDataset(dataset.images, dataset.labels[perm].clone(), dataset.num_classes, dataset.ids)


# ---------------------------------------------------------------------------
# synthetic-blobs
# ---------------------------------------------------------------------------

def _rng(*keys) -> np.random.Generator:
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _prototypes(num_classes: int):
    """Class-defining (orientation, frequency, colour) triples on smooth manifolds.

    Neighbouring classes share similar textures, so features learned on some
    classes carry over to the rest.
    """
    rng = _rng("synthetic-blobs-prototypes", num_classes)
    k = np.arange(num_classes)
    theta = np.pi * k / num_classes
    freq = 0.35 + 0.25 * ((k * 3) % num_classes) / num_classes
    hue = 2 * np.pi * ((k * 7) % num_classes) / num_classes
    colour = np.stack([np.cos(hue), np.cos(hue - 2 * np.pi / 3), np.cos(hue + 2 * np.pi / 3)], axis=1)
    colour = 0.6 * colour + 0.1 * rng.standard_normal(colour.shape)
    return theta, freq, colour


def synthetic_blobs(num_classes: int, per_class: int, size: int, seed: int, split: str):
    """Gaussian-enveloped oriented gratings at random positions over noise."""
    theta, freq, colour = _prototypes(num_classes)
    rng = _rng("synthetic-blobs", num_classes, per_class, size, seed, split)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    margin = size / 5
    for i, c in enumerate(labels):
        cy, cx = rng.uniform(margin, size - margin, 2)
        radius = rng.uniform(0.14, 0.22) * size
        env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        t = theta[c] + rng.normal(0, 0.08)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(freq[c] * ((xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)) + phase)
        pattern = env * (0.6 + 0.8 * wave)
        img = colour[c][:, None, None] * pattern[None] + 0.35 * rng.standard_normal((3, size, size))
        images[i] = img
    return torch.from_numpy(images), torch.from_numpy(labels).long()


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

def data_root(spec: DatasetSpec) -> Path:
    return Path(spec.root or os.environ.get(DATA_ROOT_ENV, "data"))


def _missing(spec: DatasetSpec, path: Path, layout: str):
    raise DataMissingError(
        f"{spec.name} not found under {path}. Place the standard {layout} there "
        f"(or point dataset.root / ${DATA_ROOT_ENV} at it); nothing is downloaded automatically."
    )


def _load_torchvision(spec: DatasetSpec):
    from torchvision import datasets

    root = data_root(spec)
    train = spec.split == "train"
    try:
        if spec.name == "cifar10":
            ds = datasets.CIFAR10(str(root), train=train, download=False)
        elif spec.name == "cifar100":
            ds = datasets.CIFAR100(str(root), train=train, download=False)
        elif spec.name == "stl10":
            ds = datasets.STL10(str(root), split="train" if train else "test", download=False)
        else:
            return _load_tiny_imagenet(spec, root)
    except RuntimeError:
        layouts = {
            "cifar10": "cifar-10-batches-py/ directory",
            "cifar100": "cifar-100-python/ directory",
            "stl10": "stl10_binary/ directory",
        }
        _missing(spec, root, layouts[spec.name])
    if spec.name == "stl10":
        images = torch.from_numpy(ds.data).float() / 255.0
        labels = torch.from_numpy(ds.labels.astype(np.int64))
    else:
        images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float() / 255.0
        labels = torch.tensor(ds.targets, dtype=torch.long)
    return images, labels


def _load_tiny_imagenet(spec: DatasetSpec, root: Path):
    from PIL import Image

    base = root / "tiny-imagenet-200"
    if not (base / "wnids.txt").exists():
        _missing(spec, root, "tiny-imagenet-200/ directory")
    wnids = (base / "wnids.txt").read_text().split()
    index = {w: i for i, w in enumerate(wnids)}
    files, labels = [], []
    if spec.split == "train":
        for w in wnids:
            for f in sorted((base / "train" / w / "images").glob("*.JPEG")):
                files.append(f)
                labels.append(index[w])
    else:
        for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
            name, w = line.split("\t")[:2]
            files.append(base / "val" / "images" / name)
            labels.append(index[w])
    images = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    return torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0, torch.tensor(labels)


def _standardize(name: str, images: torch.Tensor) -> torch.Tensor:
    mean, std = _MEAN_STD.get(name, _MEAN_STD["cifar100"])
    mean = torch.tensor(mean).view(1, 3, 1, 1)
    std = torch.tensor(std).view(1, 3, 1, 1)
    return (images - mean) / std


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def ratio_index(labels: torch.Tensor, num_classes: int, ratio: float) -> torch.Tensor:
    """Keep the first ``floor(ratio * count)`` samples of every class, in file order."""
    keep = []
    for c in range(num_classes):
        idx = torch.nonzero(labels == c).flatten()
        if len(idx):
            keep.append(idx[: max(1, int(math.floor(ratio * len(idx) + 1e-9)))])
    if not keep:
        return torch.zeros(0, dtype=torch.long)
    return torch.sort(torch.cat(keep)).values


def reduce_classes(spec: DatasetSpec, n: int) -> DatasetSpec:
    """Restrict to the first ``n`` categories in default order."""
    if n <= 0 or n > spec.classes:
        raise PolicyError(f"class reduction needs 0 < n <= {spec.classes}, got {n}")
    if n == spec.classes:
        return spec
    return replace(spec, class_subset=tuple(range(n)))


def heldout_classes(spec: DatasetSpec, n: int) -> DatasetSpec:
    """The complement of ``reduce_classes(spec, n)``: categories ``[n, K)``."""
    if n <= 0 or n >= spec.classes:
        raise PolicyError(f"held-out subset needs 0 < n < {spec.classes}, got {n}")
    return replace(spec, class_subset=tuple(range(n, spec.classes)))


def load(spec: DatasetSpec) -> ArrayDataset:
    """Materialize ``spec``: deterministic order, labels in ``[0, K)``."""
    if spec.name == "synthetic-blobs":
        images, labels = synthetic_blobs(spec.classes, spec.per_class, spec.image_size, spec.seed, spec.split)
    else:
        images, labels = _load_torchvision(spec)
        if spec.name in ("stl10", "tiny-imagenet") and images.shape[-1] != spec.image_size:
            images = F.interpolate(images, size=(spec.image_size, spec.image_size), mode="bilinear", align_corners=False)
        images = _standardize(spec.name, images)
    ds = ArrayDataset(images.contiguous(), labels, spec.classes, torch.arange(len(labels)))
    if spec.class_subset is not None:
        keep = torch.isin(ds.labels, torch.tensor(spec.class_subset))
        ds = ds.subset(torch.nonzero(keep).flatten())
    if spec.ratio < 1:
        ds = ds.subset(ratio_index(ds.labels, ds.num_classes, spec.ratio))
    return ds


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------

def augment(images: torch.Tensor, generator: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random ``pad``-pixel crop plus horizontal flip, driven by ``generator``."""
    n, _, h, w = images.shape
    padded = F.pad(images, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def iterate(n: int, batch_size: int, generator: Optional[torch.Generator] = None) -> Iterator[torch.Tensor]:
    """Index batches; shuffled when a generator is given."""
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
