"""Image classification data: the CIFAR-10 binary reader and a synthetic stripe set."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from ssplab.checkpoint import load_records, save_records

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
MAX_SYNTHETIC_CLASSES = 8


class DataError(ValueError):
    """Malformed or missing dataset files."""


@dataclass(frozen=True)
class LabeledImageSet:
    """One split: standardized ``images`` (N, C, H, W) and integer ``labels``.

    ``indices`` locate each example in the pooled source so split
    disjointness can be checked.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    indices: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class DataSplits:
    train: LabeledImageSet
    valid: LabeledImageSet
    test: LabeledImageSet
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def records(self) -> dict[str, np.ndarray]:
        out = {"channel_mean": self.channel_mean, "channel_std": self.channel_std}
        for s in (self.train, self.valid, self.test):
            out[f"{s.split}/images"] = s.images
            out[f"{s.split}/labels"] = s.labels.astype(np.float32)
            out[f"{s.split}/indices"] = s.indices.astype(np.float32)
        out["num_classes"] = np.array([self.train.num_classes], dtype=np.float32)
        return out

    def save(self, path) -> None:
        save_records(path, self.records())

    @classmethod
    def load(cls, path) -> "DataSplits":
        rec = load_records(path)
        k = int(rec["num_classes"][0])
        parts = {
            name: LabeledImageSet(
                rec[f"{name}/images"],
                rec[f"{name}/labels"].astype(np.int64),
                name,
                k,
                rec[f"{name}/indices"].astype(np.int64),
            )
            for name in ("train", "valid", "test")
        }
        return cls(parts["train"], parts["valid"], parts["test"], rec["channel_mean"], rec["channel_std"])


def _standardize(raw: np.ndarray, split_ids: dict[str, np.ndarray], labels: np.ndarray, k: int) -> DataSplits:
    train = raw[split_ids["train"]]
    mean = train.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1, 1, 1)
    sets = {}
    for name, ids in split_ids.items():
        images = ((raw[ids] - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)
        sets[name] = LabeledImageSet(images, labels[ids].astype(np.int64), name, k, np.asarray(ids))
    return DataSplits(sets["train"], sets["valid"], sets["test"], mean.astype(np.float32), std.astype(np.float32))


# -- CIFAR-10 -------------------------------------------------------------

def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch into ``(images in [0, 1], labels)``."""
    blob = np.fromfile(path, dtype=np.uint8)
    if blob.size % CIFAR_RECORD_BYTES:
        raise DataError(f"{path}: length {blob.size} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = blob.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} exceeds 9")
    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(dir_path: str | Path, split_seed: int = 0, num_valid: int = 5000) -> DataSplits:
    """Train batches 1-5 split into train/valid by a seeded shuffle; the test batch is kept whole."""
    root = Path(dir_path)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (root / f).is_file()]
    if missing:
        raise DataError(f"{root}: missing CIFAR-10 files {', '.join(missing)}")
    train_parts = [read_cifar_batch(root / f) for f in CIFAR_TRAIN_FILES]
    test_images, test_labels = read_cifar_batch(root / CIFAR_TEST_FILE)
    images = np.concatenate([p[0] for p in train_parts] + [test_images])
    labels = np.concatenate([p[1] for p in train_parts] + [test_labels])
    n_train = sum(len(p[1]) for p in train_parts)
    if not 0 < num_valid < n_train:
        raise DataError(f"cannot hold out {num_valid} of {n_train} training records")
    order = np.random.default_rng(split_seed).permutation(n_train)
    ids = {
        "train": np.sort(order[num_valid:]),
        "valid": np.sort(order[:num_valid]),
        "test": np.arange(n_train, len(labels)),
    }
    return _standardize(images, ids, labels, 10)


# -- synthetic stripes ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int = 625
    num_classes: int = 4
    image_size: int = 16
    noise_sigma: float = 0.5
    seed: int = 0
    stripe_period: float = 4.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.num_classes > MAX_SYNTHETIC_CLASSES:
            raise ValueError(f"at most {MAX_SYNTHETIC_CLASSES} stripe orientations are distinguishable")
        if self.image_size < 4 or self.image_size % 4:
            raise ValueError("image size must be a positive multiple of 4")
        if self.n_per_class < 10:
            raise ValueError("need at least 10 examples per class for an 80/10/10 split")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


_CHANNEL_GAIN = np.array([1.0, 0.8, 0.6])


def stripe_template(k: int, spec: SyntheticSpec) -> np.ndarray:
    """Class ``k``: stripes at angle k*pi/K, 3 channels; each channel mean is 0.5 for every class."""
    angle = k * math.pi / spec.num_classes
    yy, xx = np.mgrid[0 : spec.image_size, 0 : spec.image_size].astype(np.float64)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    wave = np.sin(2 * math.pi * u / spec.stripe_period)
    wave -= wave.mean()
    return 0.5 + 0.5 * _CHANNEL_GAIN[:, None, None] * wave[None]


def synthetic_raw(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unstandardized images (template plus noise) and labels, class-major order."""
    rng = np.random.default_rng([spec.seed, 1234])
    k, n = spec.num_classes, spec.n_per_class
    templates = np.stack([stripe_template(c, spec) for c in range(k)])
    labels = np.repeat(np.arange(k), n)
    raw = templates[labels] + spec.noise_sigma * rng.standard_normal((k * n,) + templates.shape[1:])
    return raw.astype(np.float32), labels


def make_synthetic(spec: SyntheticSpec) -> DataSplits:
    """Balanced stripe set with additive Gaussian noise, split 80/10/10 within each class."""
    raw, labels = synthetic_raw(spec)
    k, n = spec.num_classes, spec.n_per_class
    rng = np.random.default_rng([spec.seed, 4321])
    # a tenth of the pool each for valid and test, spread over classes as evenly as possible
    held = (k * n) // 10
    per_class = [held // k + (c < held % k) for c in range(k)]
    ids = {"train": [], "valid": [], "test": []}
    for c in range(k):
        members = c * n + rng.permutation(n)
        m = per_class[c]
        ids["valid"].append(members[:m])
        ids["test"].append(members[m : 2 * m])
        ids["train"].append(members[2 * m :])
    ids = {name: np.sort(np.concatenate(v)) for name, v in ids.items()}
    return _standardize(raw, ids, labels, k)


# -- batching ---------------------------------------------------------------

def iterate_minibatches(
    data: LabeledImageSet,
    batch_size: int,
    rng: np.random.Generator | None = None,
    flip: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` minibatches; shuffled when ``rng`` is given.

    ``flip`` mirrors a random half of each batch horizontally (needs ``rng``).
    """
    if len(data) == 0:
        raise DataError(f"{data.split} split is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if flip and rng is None:
        raise ValueError("random flips need an rng")
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        images = data.images[idx]
        if flip:
            mirror = rng.random(len(idx)) < 0.5
            images = np.where(mirror[:, None, None, None], images[..., ::-1], images)
        yield images, data.labels[idx]
