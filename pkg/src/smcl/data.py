"""Long-tailed dataset construction and minor-class-weighted target sampling.

Datasets are plain uint8 arrays in NHWC layout. A long-tailed training set is
carved out of a balanced base set with an exponential class-count profile, and
contrastive targets are drawn from a distribution that favours rare classes
via the effective number of samples.
"""

from __future__ import annotations

import hashlib
import json
import os
import pickle
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "SMCL_DATA_ROOT"


class DatasetError(ValueError):
    """A dataset, spec, or sampler input violates its contract."""


def round_half_up(x):
    """Round to nearest integer, ties away from zero for positive x."""
    return int(np.floor(x + 0.5))


def resolve_data_path(path):
    """Resolve a dataset path, joining relative paths onto $SMCL_DATA_ROOT if set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists():
        candidate = Path(root) / p
        if candidate.exists():
            return candidate
    return p


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass
class ClassHistogram:
    """Per-class training counts n_k for classes 0..K-1. Every count >= 1."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or self.counts.size == 0:
            raise DatasetError("histogram must be a non-empty 1-d count vector")
        if np.any(self.counts < 1):
            raise DatasetError("every class must have at least one sample")

    @property
    def num_classes(self):
        return int(self.counts.size)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def imbalance_ratio(self):
        return float(self.counts.max() / self.counts.min())

    @classmethod
    def from_labels(cls, labels, num_classes=None):
        labels = np.asarray(labels, dtype=np.int64)
        k = int(num_classes) if num_classes is not None else int(labels.max()) + 1
        counts = np.bincount(labels, minlength=k)
        return cls(counts)

    def to_json_dict(self):
        return {str(k): int(n) for k, n in enumerate(self.counts)}

    @classmethod
    def from_json_dict(cls, d):
        counts = np.zeros(len(d), dtype=np.int64)
        for k, n in d.items():
            counts[int(k)] = int(n)
        return cls(counts)


@dataclass
class LongTailSpec:
    """Exponential long-tail profile: n_k = round(n_max * rho^(-k/(K-1))), floor 1."""

    num_classes: int
    rho: float
    n_max: int
    profile: str = "exponential"

    def __post_init__(self):
        if self.num_classes < 1:
            raise DatasetError("num_classes must be >= 1")
        if self.rho < 1:
            raise DatasetError("imbalance ratio rho must be >= 1")
        if self.n_max < 1:
            raise DatasetError("n_max must be >= 1")
        if self.n_max < self.rho:
            raise DatasetError("n_max must be >= rho so the smallest class keeps a sample")
        if self.profile != "exponential":
            raise DatasetError(f"unknown profile {self.profile!r}")

    def class_counts(self):
        k = self.num_classes
        if k == 1:
            return np.array([self.n_max], dtype=np.int64)
        counts = np.empty(k, dtype=np.int64)
        for i in range(k):
            n = round_half_up(self.n_max * self.rho ** (-i / (k - 1)))
            counts[i] = max(1, n)
        return counts

    def histogram(self):
        return ClassHistogram(self.class_counts())


@dataclass
class MinorWeightedDistribution:
    """Target-class distribution p_k proportional to 1/E_k.

    E_k is the effective number of samples (1 - beta^n_k) / (1 - beta) with
    beta = (N - 1) / N, so rarer classes receive higher probability.
    """

    beta: float
    effective: np.ndarray
    probs: np.ndarray

    @property
    def num_classes(self):
        return int(self.probs.size)


def effective_numbers(hist):
    """Build the minor-weighted target distribution from a training histogram."""
    if not isinstance(hist, ClassHistogram):
        hist = ClassHistogram(np.asarray(hist))
    n = hist.counts.astype(np.float64)
    total = hist.total
    if total < 2:
        # beta = (N-1)/N degenerates to 0; E_k = 1 for all classes
        beta = 0.0
    else:
        beta = (total - 1) / total
    if beta == 0.0:
        eff = np.ones_like(n)
    else:
        eff = (1.0 - beta**n) / (1.0 - beta)
    inv = 1.0 / eff
    probs = inv / inv.sum()
    return MinorWeightedDistribution(beta=beta, effective=eff, probs=probs)


class TargetSampler:
    """Draws (class, sample index) pairs from the minor-weighted distribution.

    The dataset index maps each class to the positions of its samples; a draw
    first picks a class by p_k, then a sample uniformly within the class.
    """

    def __init__(self, dist, class_indices):
        if dist.num_classes != len(class_indices):
            raise DatasetError("distribution and index disagree on class count")
        for k, idx in enumerate(class_indices):
            if len(idx) == 0 and dist.probs[k] > 0:
                raise DatasetError(f"class {k} has positive probability but no samples")
        self.dist = dist
        self.class_indices = [np.asarray(ix, dtype=np.int64) for ix in class_indices]

    def draw_classes(self, rng, size):
        return rng.choice(self.dist.num_classes, size=size, p=self.dist.probs)

    def draw(self, rng, size=None):
        """Return dataset indices of sampled targets (scalar when size is None)."""
        scalar = size is None
        n = 1 if scalar else int(size)
        classes = self.draw_classes(rng, n)
        out = np.empty(n, dtype=np.int64)
        for i, k in enumerate(classes):
            pool = self.class_indices[k]
            out[i] = pool[rng.integers(len(pool))]
        return int(out[0]) if scalar else out


def sample_target(dist, class_indices, rng, size=None):
    """Functional form of TargetSampler.draw for one-off use."""
    return TargetSampler(dist, class_indices).draw(rng, size=size)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class ArrayDataset:
    """In-memory image dataset: uint8 NHWC images with int64 labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError("images must be NHWC")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("images and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label out of range")

    def __len__(self):
        return int(self.images.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_indices(self):
        return [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]

    def histogram(self):
        return ClassHistogram.from_labels(self.labels, self.num_classes)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.images[indices], self.labels[indices], self.num_classes)


def build_longtail(base, spec, seed):
    """Select a long-tailed subset of a balanced base set.

    Per class, the first n_k samples of a seeded shuffle of that class's pool
    are kept. Returns (subset, histogram). Raises when any class pool is
    smaller than its requested n_k.
    """
    if spec.num_classes != base.num_classes:
        raise DatasetError("spec and base dataset disagree on class count")
    counts = spec.class_counts()
    rng = np.random.default_rng(seed)
    keep = []
    for k, idx in enumerate(base.class_indices()):
        if len(idx) < counts[k]:
            raise DatasetError(
                f"class {k} has {len(idx)} base samples, profile needs {counts[k]}"
            )
        perm = rng.permutation(len(idx))
        keep.append(idx[perm[: counts[k]]])
    keep = np.concatenate(keep)
    subset = base.subset(keep)
    hist = subset.histogram()
    if not np.array_equal(hist.counts, counts):
        raise DatasetError("realized histogram does not match profile")
    return subset, hist


def channel_stats(images):
    """Per-channel mean and std of uint8 images, in [0, 1] units."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    std = np.maximum(std, 1e-6)
    return mean.astype(np.float64), std.astype(np.float64)


def make_synthetic(num_classes, per_class, image_size=16, seed=0):
    """Balanced synthetic dataset with a learnable per-class visual signature.

    Each class places a bright tinted square at a class-specific grid cell on
    a noisy background, so small convnets can separate classes in a few
    epochs. Used for tests and smoke runs; not a benchmark.
    """
    rng = np.random.default_rng(seed)
    h = w = int(image_size)
    n = num_classes * per_class
    images = np.empty((n, h, w, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    grid = int(np.ceil(np.sqrt(num_classes)))
    cell = max(2, h // grid)
    side = max(2, cell - 1)
    for i in range(n):
        k = i % num_classes
        img = rng.uniform(0, 80, size=(h, w, 3))
        gy, gx = divmod(k, grid)
        y0 = min(gy * cell + rng.integers(0, 2), h - side)
        x0 = min(gx * cell + rng.integers(0, 2), w - side)
        tint = np.array(
            [
                180 + 60 * np.sin(2.1 * k),
                180 + 60 * np.sin(1.3 * k + 1.0),
                180 + 60 * np.sin(0.7 * k + 2.0),
            ]
        )
        img[y0 : y0 + side, x0 : x0 + side] = tint
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
        labels[i] = k
    return ArrayDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def _cifar_unpickle(f):
    return pickle.load(f, encoding="bytes")


def _cifar_entry_to_arrays(entry):
    data = entry[b"data"]
    if b"labels" in entry:
        labels = entry[b"labels"]
    else:
        labels = entry[b"fine_labels"]
    images = np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, np.asarray(labels, dtype=np.int64)


def load_cifar(path):
    """Load a CIFAR-format binary archive (directory or .tar.gz).

    Recognizes both the 10-class layout (data_batch_1..5 / test_batch) and the
    100-class layout (train / test with fine labels). Returns (train, test).
    """
    path = Path(resolve_data_path(path))
    if not path.exists():
        raise DatasetError(f"no dataset at {path}")

    def read_members(opener, names):
        batches = {}
        for name in names:
            base = Path(name).name
            if base in ("data_batch_1", "data_batch_2", "data_batch_3",
                        "data_batch_4", "data_batch_5", "test_batch", "train", "test"):
                with opener(name) as f:
                    batches[base] = _cifar_entry_to_arrays(_cifar_unpickle(f))
        return batches

    if path.is_dir():
        names = [str(p) for p in path.rglob("*") if p.is_file()]
        batches = read_members(lambda n: open(n, "rb"), names)
    elif tarfile.is_tarfile(path):
        with tarfile.open(path, "r:*") as tf:
            names = [m.name for m in tf.getmembers() if m.isfile()]
            batches = {}
            with tarfile.open(path, "r:*") as tf2:
                for name in names:
                    base = Path(name).name
                    if base in ("data_batch_1", "data_batch_2", "data_batch_3",
                                "data_batch_4", "data_batch_5", "test_batch", "train", "test"):
                        f = tf2.extractfile(name)
                        batches[base] = _cifar_entry_to_arrays(_cifar_unpickle(f))
    else:
        raise DatasetError(f"{path} is neither a directory nor a tar archive")

    if "train" in batches and "test" in batches:
        train_imgs, train_labels = batches["train"]
        test_imgs, test_labels = batches["test"]
    elif "test_batch" in batches:
        parts = [batches[f"data_batch_{i}"] for i in range(1, 6) if f"data_batch_{i}" in batches]
        if not parts:
            raise DatasetError(f"no training batches found under {path}")
        train_imgs = np.concatenate([p[0] for p in parts])
        train_labels = np.concatenate([p[1] for p in parts])
        test_imgs, test_labels = batches["test_batch"]
    else:
        raise DatasetError(f"unrecognized CIFAR layout under {path}")

    k = int(max(train_labels.max(), test_labels.max())) + 1
    return ArrayDataset(train_imgs, train_labels, k), ArrayDataset(test_imgs, test_labels, k)


def load_image_folder(path, image_size=None):
    """Load a directory-per-class image tree. Class names sort to indices."""
    from PIL import Image

    path = Path(resolve_data_path(path))
    if not path.is_dir():
        raise DatasetError(f"no image folder at {path}")
    class_dirs = sorted(p for p in path.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{path} contains no class directories")
    images, labels = [], []
    for k, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        for fp in files:
            img = Image.open(fp).convert("RGB")
            if image_size is not None:
                img = img.resize((image_size, image_size), Image.BILINEAR)
            images.append(np.asarray(img, dtype=np.uint8))
            labels.append(k)
    if not images:
        raise DatasetError(f"{path} contains no images")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetError("images differ in size; pass image_size to resize")
    return ArrayDataset(np.stack(images), np.asarray(labels), len(class_dirs))


def load_npz(path):
    """Load an NPZ with arrays 'images' (NHWC uint8) and 'labels'."""
    path = Path(resolve_data_path(path))
    if not path.exists():
        raise DatasetError(f"no dataset at {path}")
    with np.load(path) as z:
        if "images" not in z or "labels" not in z:
            raise DatasetError(f"{path} must contain 'images' and 'labels'")
        images = z["images"]
        labels = z["labels"]
    k = int(labels.max()) + 1 if labels.size else 0
    return ArrayDataset(images, labels, k)


def load_base_dataset(path):
    """Autodetect the base dataset format. Returns (train, test_or_None)."""
    path = Path(resolve_data_path(path))
    if path.suffix == ".npz":
        return load_npz(path), None
    if path.is_file() and tarfile.is_tarfile(path):
        return load_cifar(path)
    if path.is_dir():
        entries = {p.name for p in path.iterdir()}
        if entries & {"data_batch_1", "test_batch", "train", "test"}:
            return load_cifar(path)
        if (path / "train.npz").exists():
            train = load_npz(path / "train.npz")
            test_p = path / "test.npz"
            return train, (load_npz(test_p) if test_p.exists() else None)
        return load_image_folder(path), None
    raise DatasetError(f"cannot detect dataset format at {path}")


# ---------------------------------------------------------------------------
# built dataset bundles
# ---------------------------------------------------------------------------


@dataclass
class DataBundle:
    """A built long-tailed training set plus its balanced test set and stats."""

    train: ArrayDataset
    test: ArrayDataset | None
    histogram: ClassHistogram
    channel_mean: np.ndarray
    channel_std: np.ndarray
    meta: dict = field(default_factory=dict)

    def fingerprint(self):
        return dataset_fingerprint(self)


def dataset_fingerprint(bundle):
    """Stable content hash of a bundle: array bytes, shapes, and histogram."""
    h = hashlib.sha256()
    for arr in (bundle.train.images, bundle.train.labels):
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    if bundle.test is not None:
        for arr in (bundle.test.images, bundle.test.labels):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps(bundle.histogram.to_json_dict(), sort_keys=True).encode())
    return h.hexdigest()[:12]


def save_bundle(out_dir, bundle):
    """Write train/test arrays, the histogram report, and metadata to a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "train.npz", images=bundle.train.images, labels=bundle.train.labels)
    if bundle.test is not None:
        np.savez_compressed(out / "test.npz", images=bundle.test.images, labels=bundle.test.labels)
    # histogram report is exactly the {class_index: count} mapping for audit
    report = bundle.histogram.to_json_dict()
    (out / "histogram.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    meta = dict(bundle.meta)
    meta["total"] = bundle.histogram.total
    meta["imbalance_ratio"] = bundle.histogram.imbalance_ratio
    meta["channel_mean"] = [float(v) for v in bundle.channel_mean]
    meta["channel_std"] = [float(v) for v in bundle.channel_std]
    meta["fingerprint"] = dataset_fingerprint(bundle)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_bundle(path):
    """Load a directory written by save_bundle."""
    path = Path(resolve_data_path(path))
    train_p = path / "train.npz"
    if not train_p.exists():
        raise DatasetError(f"no built dataset at {path}")
    meta = json.loads((path / "meta.json").read_text())
    hist = ClassHistogram.from_json_dict(json.loads((path / "histogram.json").read_text()))
    train = load_npz(train_p)
    train.num_classes = hist.num_classes
    test = None
    if (path / "test.npz").exists():
        test = load_npz(path / "test.npz")
        test.num_classes = hist.num_classes
    return DataBundle(
        train=train,
        test=test,
        histogram=hist,
        channel_mean=np.asarray(meta["channel_mean"], dtype=np.float64),
        channel_std=np.asarray(meta["channel_std"], dtype=np.float64),
        meta=meta,
    )


def build_bundle(base_train, test, spec, seed, extra_meta=None):
    """Carve the long-tailed subset and package it with channel stats."""
    subset, hist = build_longtail(base_train, spec, seed)
    mean, std = channel_stats(subset.images)
    meta = {
        "num_classes": spec.num_classes,
        "rho": spec.rho,
        "n_max": spec.n_max,
        "profile": spec.profile,
        "seed": int(seed),
    }
    if extra_meta:
        meta.update(extra_meta)
    return DataBundle(subset, test, hist, mean, std, meta)
