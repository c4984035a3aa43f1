"""Dataset ingestion, normalization and deterministic batching."""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-6
CACHE_MAGIC = b"GMMDLDS\0"
CACHE_VERSION = 1
DATA_DIR_ENV = "GMMDL_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, p)
    labels: np.ndarray  # (n,)
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        if y.size and y.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def load_sparse(path, n_features: int, label_offset: int = 0, split: str = "train") -> Dataset:
    """Read ``label idx:val idx:val ...`` lines with 1-based indices into a dense dataset."""
    rows, labels = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = int(float(parts[0])) - label_offset
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad label {parts[0]!r}") from None
            row = np.zeros(n_features)
            seen = set()
            for tok in parts[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise DataFormatError(f"{path}:{lineno}: expected idx:val, got {tok!r}")
                try:
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad entry {tok!r}") from None
                if not 1 <= idx <= n_features:
                    raise DataFormatError(f"{path}:{lineno}: index {idx} outside 1..{n_features}")
                if idx in seen:
                    raise DataFormatError(f"{path}:{lineno}: duplicate index {idx}")
                seen.add(idx)
                row[idx - 1] = val
            if label < 0:
                raise DataFormatError(f"{path}:{lineno}: label {parts[0]} below offset {label_offset}")
            rows.append(row)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    return Dataset(np.vstack(rows), np.asarray(labels), split=split)


def write_sparse(ds: Dataset, path, label_offset: int = 0):
    with open(path, "w") as fh:
        for x, y in zip(ds.features, ds.labels):
            entries = " ".join(f"{j + 1}:{v!r}" for j, v in enumerate(x.tolist()) if v != 0.0)
            fh.write(f"{int(y) + label_offset} {entries}".rstrip() + "\n")


def synth_blobs(
    num_classes: int,
    dim: int,
    n_per_class: int,
    separation: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian blobs around randomly rotated class centres.

    Centres are ``separation`` times orthonormal directions when
    ``dim >= num_classes``; otherwise random unit directions are used.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if separation < 0 or noise < 0:
        raise ValueError("separation and noise must be nonnegative")
    rng = np.random.default_rng(seed)
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        directions = q[:, :num_classes].T
    else:
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centres = separation * directions
    labels = np.repeat(np.arange(num_classes), n_per_class)
    X = centres[labels] + noise * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    X, labels = X[order], labels[order]
    n_test = int(round(test_fraction * labels.size))
    return (
        Dataset(X[n_test:], labels[n_test:], split="train"),
        Dataset(X[:n_test], labels[:n_test], split="test"),
    )


def standardize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-feature z-scoring with train statistics, std floored at 1e-6."""
    if len(train) == 0:
        raise ValueError("cannot standardize with an empty train split")
    mean = train.features.mean(axis=0)
    std = np.maximum(train.features.std(axis=0), STD_FLOOR)
    out = []
    for ds in (train, *others):
        out.append(replace(ds, features=(ds.features - mean) / std, mean=mean, std=std))
    return out


def batches(n: int | Dataset, b: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index slices for one epoch; the last partial batch is kept."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    n = len(n) if isinstance(n, Dataset) else int(n)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + b] for i in range(0, n, b)]


def save_cache(ds: Dataset, path):
    """Flat binary: 8-byte magic, u32 version, u32 reserved, then u64 n, u64 p, labels, features."""
    X = np.ascontiguousarray(ds.features, dtype="<f8")
    y = np.ascontiguousarray(ds.labels, dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, 0))
        fh.write(struct.pack("<QQ", X.shape[0], X.shape[1]))
        fh.write(y.tobytes())
        fh.write(X.tobytes())


def load_cache(path, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:8] != CACHE_MAGIC:
            raise DataFormatError(f"{path}: not a dataset cache")
        (version, _) = struct.unpack("<II", header[8:])
        if version != CACHE_VERSION:
            raise DataFormatError(f"{path}: unsupported cache version {version}")
        n, p = struct.unpack("<QQ", fh.read(16))
        y = np.frombuffer(fh.read(8 * n), dtype="<i8")
        X = np.frombuffer(fh.read(8 * n * p), dtype="<f8").reshape(n, p)
    return Dataset(X.copy(), y.copy(), split=split)


def find_usps(data_dir=None) -> tuple[Path, Path] | None:
    """Locate the LIBSVM-format USPS train/test files (``usps`` and ``usps.t``)."""
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    train, test = Path(root) / "usps", Path(root) / "usps.t"
    return (train, test) if train.is_file() and test.is_file() else None


def load_usps(data_dir=None) -> tuple[Dataset, Dataset] | None:
    paths = find_usps(data_dir)
    if paths is None:
        return None
    return (
        load_sparse(paths[0], 256, label_offset=1, split="train"),
        load_sparse(paths[1], 256, label_offset=1, split="test"),
    )


def read_posterior_csv(path):
    """Rows ``label, mu_1..mu_d, var_1..var_d``; a non-numeric first row is a header."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                values = [float(f) for f in rec]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
            if (len(values) - 1) % 2 or len(values) < 3:
                raise DataFormatError(f"{path}:{lineno}: expected label plus 2*d values")
            labels.append(int(values[0]))
            rows.append(values[1:])
    if not rows:
        raise DataFormatError(f"{path}: no posterior rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataFormatError(f"{path}: rows have differing widths {sorted(widths)}")
    return np.asarray(rows), np.asarray(labels)
