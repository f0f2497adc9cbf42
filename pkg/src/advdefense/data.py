"""Dataset ingestion: IDX files, synthetic blobs/moons, splits and scaling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_moons

from .errors import IdxDtypeError, IdxMagicError, IdxTruncatedError
from .network import LabeledBatch

_IDX_UBYTE = 0x08


def _read_idx(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic")
    zero0, zero1, dtype, ndim = blob[0], blob[1], blob[2], blob[3]
    if zero0 != 0 or zero1 != 0:
        raise IdxMagicError(f"{path}: bad magic bytes {zero0:#04x} {zero1:#04x}")
    if dtype != _IDX_UBYTE:
        raise IdxDtypeError(f"{path}: dtype code {dtype:#04x} not supported (ubyte only)")
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxTruncatedError(f"{path}: header needs {header_len} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    expected = int(np.prod(dims)) if dims else 0
    payload = blob[header_len:]
    if len(payload) != expected:
        raise IdxTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(path):
    """IDX payload as float64 with byte values scaled to [0, 1]."""
    return _read_idx(path).astype(np.float64) / 255.0


def load_idx_raw(path):
    """IDX payload as integers (label files)."""
    return _read_idx(path).astype(np.int64)


@dataclass
class DatasetSpec:
    kind: str = "synthetic-moons"  # idx-files | synthetic-blobs | synthetic-moons
    classes: int = 2
    samples_per_class: int = 500
    noise: float = 0.1
    dim: int = 2
    centers_per_class: int = 1
    seed: int = 0
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit_train: int | None = None
    limit_test: int | None = None
    mean_subtract: bool = False
    binary: bool = False  # remap labels {0,1} -> {-1,+1}

    def __post_init__(self):
        if self.kind not in ("idx-files", "synthetic-blobs", "synthetic-moons"):
            raise ValueError(f"unknown dataset kind '{self.kind}'")
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")
        if self.kind == "synthetic-moons" and self.classes != 2:
            raise ValueError("moons are a two-class dataset")
        if self.noise < 0 or self.samples_per_class < 1 or self.classes < 2:
            raise ValueError("invalid synthetic parameters")
        if self.binary and self.classes != 2:
            raise ValueError("binary label mapping needs exactly two classes")


@dataclass
class DatasetSplits:
    train: LabeledBatch
    val: LabeledBatch | None
    test: LabeledBatch
    feature_scale: float = 1.0  # max feature range after preprocessing


def generate_synthetic(spec):
    """Full synthetic sample set (pre-split), reproducible from the seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "synthetic-moons":
        n = 2 * spec.samples_per_class
        X, y = make_moons(n_samples=n, noise=spec.noise, random_state=spec.seed)
        return X.astype(np.float64), y.astype(np.int64)
    if spec.kind != "synthetic-blobs":
        raise ValueError(f"cannot generate data for kind '{spec.kind}'")
    centers = rng.uniform(0.0, 1.0, size=(spec.classes * spec.centers_per_class, spec.dim))
    xs, ys = [], []
    for cls in range(spec.classes):
        per_center = np.full(spec.centers_per_class, spec.samples_per_class // spec.centers_per_class)
        per_center[: spec.samples_per_class % spec.centers_per_class] += 1
        for j in range(spec.centers_per_class):
            c = centers[cls * spec.centers_per_class + j]
            pts = c + spec.noise * rng.standard_normal(size=(per_center[j], spec.dim))
            xs.append(pts)
            ys.append(np.full(per_center[j], cls, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def _scale_unit(X):
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (X - lo) / span


def _finalize(spec, X, y):
    if spec.mean_subtract:
        X = X - X.mean(axis=0)
    if spec.binary:
        y = 2 * y - 1
    return X, y


def prepare_dataset(spec):
    """Load or generate, scale features to [0, 1], split deterministically."""
    if spec.kind == "idx-files":
        X = load_idx(spec.train_images)
        y = load_idx_raw(spec.train_labels)
        Xt = load_idx(spec.test_images)
        yt = load_idx_raw(spec.test_labels)
        X = X.reshape(len(X), -1)
        Xt = Xt.reshape(len(Xt), -1)
        rng = np.random.default_rng(spec.seed)
        order = rng.permutation(len(X))
        X, y = X[order], y[order]
        if spec.limit_train is not None:
            X, y = X[: spec.limit_train], y[: spec.limit_train]
        if spec.limit_test is not None:
            Xt, yt = Xt[: spec.limit_test], yt[: spec.limit_test]
        val_n = int(round(len(X) * spec.val_fraction / max(spec.train_fraction + spec.val_fraction, 1e-9)))
        X, y = _finalize(spec, X, y)
        Xv, yv = X[:val_n], y[:val_n]
        Xr, yr = X[val_n:], y[val_n:]
        Xt, yt = _finalize(spec, Xt, yt)
        binary = spec.binary
        return DatasetSplits(
            train=LabeledBatch(Xr, yr, binary),
            val=LabeledBatch(Xv, yv, binary) if val_n else None,
            test=LabeledBatch(Xt, yt, binary),
        )

    X, y = generate_synthetic(spec)
    X = _scale_unit(X)
    X, y = _finalize(spec, X, y)
    rng = np.random.default_rng((spec.seed, 0x5B1))
    order = rng.permutation(len(X))
    X, y = X[order], y[order]
    n = len(X)
    n_train = int(round(spec.train_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    binary = spec.binary
    train = LabeledBatch(X[:n_train], y[:n_train], binary)
    val = LabeledBatch(X[n_train : n_train + n_val], y[n_train : n_train + n_val], binary) if n_val else None
    test = LabeledBatch(X[n_train + n_val :], y[n_train + n_val :], binary)
    return DatasetSplits(train=train, val=val, test=test)
