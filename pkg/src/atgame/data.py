"""Dataset loading, splits, augmentation, and a synthetic generator.

The synthetic generator embeds label-correlated coordinates of two kinds
into noise images: strongly correlated ones whose correlation survives any
in-budget perturbation (robust), and weakly correlated ones the attacker
can flip (non-robust). It returns the coordinate map so tests can verify
both definitions numerically.

File formats parsed here, byte-exact:

CIFAR-10 binary batch (data_batch_N.bin / test_batch.bin):
    repeated records of 3073 bytes: 1 label byte, then 3072 pixel bytes
    laid out as 1024 red, 1024 green, 1024 blue (row-major 32x32).
MNIST IDX (optionally gzipped):
    big-endian headers; image magic 0x00000803 then [N, rows, cols] int32,
    label magic 0x00000801 then [N] int32; unsigned pixel/label bytes follow.
Pixel bytes scale to [0,1] by /255.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass

import numpy as np

from .models import read_container, write_container


@dataclass
class Dataset:
    """Images in [0,1] with integer labels."""

    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        # N == 0 is allowed so degenerate artifacts (empty holdout, empty
        # relabeled dataset) stay representable; consumers reject them.
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have matching length")
        if len(self.labels) > 0:
            if self.images.min() < 0.0 or self.images.max() > 1.0:
                raise ValueError("image values must lie in [0,1]")
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       self.n_classes, self.provenance)


def save_dataset(path: str, ds: Dataset) -> None:
    meta = {"kind": "dataset", "n_classes": ds.n_classes, "provenance": ds.provenance}
    write_container(path, meta, {"images": ds.images, "labels": ds.labels})


def load_dataset(path: str) -> Dataset:
    meta, arrays = read_container(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset container")
    return Dataset(arrays["images"], arrays["labels"], meta["n_classes"],
                   meta.get("provenance", ""))


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


_CIFAR_RECORD = 3073  # label byte + 3*1024 pixel bytes


def _parse_cifar_batch(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise ValueError(f"{path}: size {len(raw)} is not a whole number of records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(path: str) -> tuple[Dataset, Dataset]:
    """Parse the binary-format batches found under ``path``."""
    train_parts = []
    for i in range(1, 6):
        fname = os.path.join(path, f"data_batch_{i}.bin")
        if not os.path.exists(fname):
            raise FileNotFoundError(fname)
        train_parts.append(_parse_cifar_batch(fname))
    test_images, test_labels = _parse_cifar_batch(os.path.join(path, "test_batch.bin"))
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    return (
        Dataset(images, labels, 10, "cifar10-train"),
        Dataset(test_images, test_labels, 10, "cifar10-test"),
    )


# ---------------------------------------------------------------------------
# MNIST IDX


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _idx_open(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx_images(path: str) -> np.ndarray:
    raw = _idx_open(path)
    magic, n, rows, cols = np.frombuffer(raw[:16], dtype=">i4")
    if magic != _IDX_IMAGE_MAGIC:
        raise ValueError(f"{path}: bad image magic {magic:#010x}")
    if len(raw) != 16 + n * rows * cols:
        raise ValueError(f"{path}: dimension mismatch")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0


def _parse_idx_labels(path: str) -> np.ndarray:
    raw = _idx_open(path)
    magic, n = np.frombuffer(raw[:8], dtype=">i4")
    if magic != _IDX_LABEL_MAGIC:
        raise ValueError(f"{path}: bad label magic {magic:#010x}")
    if len(raw) != 8 + n:
        raise ValueError(f"{path}: dimension mismatch")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist(path: str) -> tuple[Dataset, Dataset]:
    def find(stem):
        for suffix in ("", ".gz"):
            candidate = os.path.join(path, stem + suffix)
            if os.path.exists(candidate):
                return candidate
        raise FileNotFoundError(os.path.join(path, stem))

    train = Dataset(
        _parse_idx_images(find("train-images-idx3-ubyte")),
        _parse_idx_labels(find("train-labels-idx1-ubyte")),
        10, "mnist-train",
    )
    test = Dataset(
        _parse_idx_images(find("t10k-images-idx3-ubyte")),
        _parse_idx_labels(find("t10k-labels-idx1-ubyte")),
        10, "mnist-test",
    )
    return train, test


# ---------------------------------------------------------------------------
# splits and augmentation


def split_holdout(train: Dataset, n_holdout: int, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified disjoint split; the holdout becomes the validation set."""
    if n_holdout >= len(train):
        raise ValueError("holdout would consume the whole training set")
    if n_holdout == 0:
        return train, train.subset(np.array([], dtype=np.int64))

    rng = np.random.default_rng(seed)
    counts = np.bincount(train.labels, minlength=train.n_classes)
    quotas = n_holdout * counts / len(train)
    alloc = np.floor(quotas).astype(int)
    # largest remainder: hand out what flooring dropped
    short = n_holdout - alloc.sum()
    for c in np.argsort(-(quotas - alloc))[:short]:
        alloc[c] += 1
    if (alloc > counts).any():
        raise ValueError("holdout too large for stratification")

    hold_idx = []
    for c in range(train.n_classes):
        members = np.flatnonzero(train.labels == c)
        hold_idx.append(rng.permutation(members)[: alloc[c]])
    hold_idx = np.sort(np.concatenate(hold_idx))
    keep = np.setdiff1d(np.arange(len(train)), hold_idx, assume_unique=True)
    return train.subset(keep), train.subset(hold_idx)


def hflip(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Horizontally mirror the selected examples."""
    out = images.copy()
    out[mask] = out[mask][:, :, :, ::-1]
    return out


def crop_padded(images: np.ndarray, oy: np.ndarray, ox: np.ndarray,
                pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` and crop back at per-example offsets.

    Offset (pad, pad) is the centered crop, i.e. the identity.
    """
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = np.broadcast_to(np.asarray(oy), (n,))
    ox = np.broadcast_to(np.asarray(ox), (n,))
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return out


def augment(batch: np.ndarray, seed: int, pad: int = 4) -> np.ndarray:
    """Random crop (zero padding) + horizontal flip, seeded."""
    rng = np.random.default_rng(seed)
    n = len(batch)
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    out = crop_padded(batch, oy, ox, pad)
    return hflip(out, rng.random(n) < 0.5)


# ---------------------------------------------------------------------------
# synthetic robust / non-robust features


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a dataset with known robust and non-robust coordinates.

    Coordinate features are linear, f_i(x) = x_i - 1/2, so their usefulness
    and worst-case behaviour under an epsilon budget are analytic: the
    correlation of a coordinate drops by exactly epsilon under the worst
    in-budget perturbation. A feature is planted as robust by giving it
    strength >= gamma_feat + eps_target, and as non-robust by keeping its
    strength below eps_target.
    """

    n_classes: int = 2
    image_shape: tuple[int, int, int] = (1, 8, 8)
    robust_count: int = 4  # coordinates per class
    robust_strength: float = 0.25
    nonrobust_count: int = 4
    nonrobust_strength: float = 0.06
    noise_scale: float = 0.08  # scale of the pure-noise coordinates
    feature_jitter: float | None = None  # per-example jitter on feature
    # coordinates; defaults to noise_scale
    rho: float = 0.02  # usefulness threshold
    gamma_feat: float = 0.05  # robustness threshold
    eps_target: float = 0.1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        dim = int(np.prod(self.image_shape))
        used = self.n_classes * (self.robust_count + self.nonrobust_count)
        if used > dim:
            raise ValueError(f"spec unsatisfiable: {used} feature coords > {dim} dims")
        if not (self.nonrobust_strength < self.eps_target):
            raise ValueError("spec unsatisfiable: non-robust strength must be < eps")
        if self.robust_strength < self.gamma_feat + self.eps_target:
            raise ValueError("spec unsatisfiable: robust strength below gamma + eps")
        if min(self.robust_strength, self.nonrobust_strength) < self.rho and \
                self.nonrobust_strength > 0:
            raise ValueError("spec unsatisfiable: feature strengths below rho")

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "image_shape": list(self.image_shape),
            "robust_count": self.robust_count,
            "robust_strength": self.robust_strength,
            "nonrobust_count": self.nonrobust_count,
            "nonrobust_strength": self.nonrobust_strength,
            "noise_scale": self.noise_scale,
            "feature_jitter": self.feature_jitter,
            "rho": self.rho,
            "gamma_feat": self.gamma_feat,
            "eps_target": self.eps_target,
        }

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["image_shape"] = tuple(d["image_shape"])
        return SyntheticSpec(**d)


def _synth_sample(spec: SyntheticSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    dim = int(np.prod(spec.image_shape))
    c = spec.n_classes
    n_feature = c * (spec.robust_count + spec.nonrobust_count)
    jitter = spec.noise_scale if spec.feature_jitter is None else spec.feature_jitter
    labels = rng.integers(0, c, size=n)
    flat = 0.5 + spec.noise_scale * rng.standard_normal((n, dim))
    flat[:, :n_feature] = 0.5 + jitter * rng.standard_normal((n, n_feature))
    off = -1.0 / (c - 1)  # balanced against the +1 own-class sign
    for cls in range(c):
        sign = np.where(labels == cls, 1.0, off)[:, None]
        rb = slice(cls * spec.robust_count, (cls + 1) * spec.robust_count)
        flat[:, rb] += spec.robust_strength * sign
        nb_start = c * spec.robust_count + cls * spec.nonrobust_count
        nb = slice(nb_start, nb_start + spec.nonrobust_count)
        flat[:, nb] += spec.nonrobust_strength * sign
    images = np.clip(flat, 0.0, 1.0).reshape((n,) + spec.image_shape)
    return images.astype(np.float32), labels


def generate_synthetic(spec: SyntheticSpec, n_train: int, n_test: int,
                       seed: int) -> tuple[Dataset, Dataset, dict]:
    """Seeded train/test pair plus the ground-truth coordinate map."""
    rng = np.random.default_rng(seed)
    tr_images, tr_labels = _synth_sample(spec, n_train, rng)
    te_images, te_labels = _synth_sample(spec, n_test, rng)
    c = spec.n_classes
    fmap = {
        "robust": {
            cls: np.arange(cls * spec.robust_count, (cls + 1) * spec.robust_count)
            for cls in range(c)
        },
        "nonrobust": {
            cls: np.arange(
                c * spec.robust_count + cls * spec.nonrobust_count,
                c * spec.robust_count + (cls + 1) * spec.nonrobust_count,
            )
            for cls in range(c)
        },
        "noise": np.arange(c * (spec.robust_count + spec.nonrobust_count),
                           int(np.prod(spec.image_shape))),
    }
    return (
        Dataset(tr_images, tr_labels, c, "synthetic-train"),
        Dataset(te_images, te_labels, c, "synthetic-test"),
        fmap,
    )


def measure_coordinate_correlation(ds: Dataset, coord: int, cls: int) -> tuple[float, float]:
    """Monte-Carlo E[y * f(x)] for the linear coordinate feature of one class.

    y is +1 on the class and -1/(C-1) off it; returns (mean, standard error).
    """
    flat = ds.images.reshape(len(ds), -1)[:, coord] - 0.5
    y = np.where(ds.labels == cls, 1.0, -1.0 / (ds.n_classes - 1))
    vals = y * flat
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def verify_synthetic(ds: Dataset, fmap: dict, spec: SyntheticSpec) -> dict:
    """Check the planted coordinates against both feature definitions.

    Usefulness: measured correlation >= rho (within 3 standard errors).
    Robustness: the linear worst case, correlation - eps, against gamma_feat.
    """
    report = {"robust": [], "nonrobust": []}
    for kind in ("robust", "nonrobust"):
        for cls, coords in fmap[kind].items():
            for coord in coords:
                mean, se = measure_coordinate_correlation(ds, int(coord), cls)
                worst = mean - spec.eps_target
                report[kind].append({
                    "class": cls,
                    "coord": int(coord),
                    "correlation": mean,
                    "se": se,
                    "useful": mean >= spec.rho - 3 * se,
                    "worst_case": worst,
                    "robust": worst >= spec.gamma_feat - 3 * se,
                })
    return report
