"""Domain datasets, the few-shot protocol, oversampling and feature files.

Feature files come in two formats:

* CSV, UTF-8, ``.`` decimal separator.  An optional first column named
  ``label`` holds integer class ids; the remaining columns are features.
* Packed little-endian binary.  A 16-byte header (``b"GFCF"``, ``n`` and ``d``
  as uint32, a uint32 flag word whose bit 0 marks labels), then ``n`` int32
  labels if flagged, then ``n * d`` float64 features in row-major order.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, LoadError, MissingClassError, ParameterError, ProtocolError
from .numerics import make_rng

BIN_MAGIC = b"GFCF"
BIN_HEADER = struct.Struct("<4sIII")
FLAG_LABELS = 1


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Feature matrix with optional labels.  Arrays are made read-only."""

    features: np.ndarray
    labels: np.ndarray | None
    class_count: int
    domain_tag: str = ""

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ParameterError(f"features must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite entries")
        if self.class_count < 1:
            raise ParameterError("class_count must be >= 1")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ParameterError(f"expected {x.shape[0]} labels, got shape {y.shape}")
            if y.size and (y.min() < 0 or y.max() >= self.class_count):
                bad = int(y[(y < 0) | (y >= self.class_count)][0])
                raise DataError(f"label {bad} outside [0, {self.class_count})")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def class_counts(self) -> np.ndarray:
        self._require_labels()
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, idx) -> DomainDataset:
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return DomainDataset(self.features[idx], labels, self.class_count, self.domain_tag)

    def select_classes(self, classes) -> DomainDataset:
        self._require_labels()
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def unlabeled(self) -> DomainDataset:
        return DomainDataset(self.features, None, self.class_count, self.domain_tag)

    def _require_labels(self):
        if self.labels is None:
            raise ParameterError(f"dataset {self.domain_tag!r} is unlabeled")


@dataclass(frozen=True)
class FewShotProtocol:
    few_shot_classes: tuple[int, ...]
    normal_classes: tuple[int, ...]
    shots_per_class: int
    seed: int = 0

    def __post_init__(self):
        fs = tuple(sorted(int(k) for k in self.few_shot_classes))
        nm = tuple(sorted(int(k) for k in self.normal_classes))
        object.__setattr__(self, "few_shot_classes", fs)
        object.__setattr__(self, "normal_classes", nm)
        if set(fs) & set(nm):
            raise ProtocolError(f"few-shot and normal classes overlap: {sorted(set(fs) & set(nm))}")
        if len(set(fs)) != len(fs) or len(set(nm)) != len(nm):
            raise ProtocolError("duplicate class ids in protocol")
        if sorted(fs + nm) != list(range(len(fs) + len(nm))):
            raise ProtocolError("few-shot and normal classes must partition 0..c-1")
        if self.shots_per_class < 1:
            raise ProtocolError("shots_per_class must be >= 1")

    @classmethod
    def from_few_shot(cls, few_shot_classes, class_count: int, shots_per_class: int,
                      seed: int = 0) -> FewShotProtocol:
        fs = {int(k) for k in few_shot_classes}
        if any(not 0 <= k < class_count for k in fs):
            raise ProtocolError(f"few-shot class ids must lie in [0, {class_count})")
        normal = [k for k in range(class_count) if k not in fs]
        return cls(tuple(sorted(fs)), tuple(normal), shots_per_class, seed)

    @property
    def class_count(self) -> int:
        return len(self.few_shot_classes) + len(self.normal_classes)


class FewShotSplit(NamedTuple):
    train: DomainDataset
    heldout: DomainDataset


def make_few_shot_split(source: DomainDataset, protocol: FewShotProtocol) -> FewShotSplit:
    """Keep every normal-class sample and ``m`` random samples per few-shot class.

    Each few-shot class draws from its own stream keyed by ``(seed, class)``,
    so a class keeps the same shots whichever other classes are few-shot.
    """
    source._require_labels()
    if protocol.class_count != source.class_count:
        raise ProtocolError(f"protocol covers {protocol.class_count} classes, dataset has {source.class_count}")
    keep = [np.flatnonzero(np.isin(source.labels, protocol.normal_classes))]
    held = []
    for k in protocol.few_shot_classes:
        idx = np.flatnonzero(source.labels == k)
        if idx.size < protocol.shots_per_class:
            raise ProtocolError(f"class {k} has {idx.size} samples, fewer than {protocol.shots_per_class} shots")
        rng = make_rng(protocol.seed, k)
        chosen = np.sort(rng.choice(idx, size=protocol.shots_per_class, replace=False))
        keep.append(chosen)
        held.append(np.setdiff1d(idx, chosen))
    train_idx = np.sort(np.concatenate(keep))
    held_idx = np.sort(np.concatenate(held)) if held else np.zeros(0, dtype=np.int64)
    return FewShotSplit(source.subset(train_idx), source.subset(held_idx))


def oversample_balanced(source: DomainDataset, rng: np.random.Generator) -> DomainDataset:
    """Duplicate samples (uniformly, with replacement) until all classes tie the largest."""
    if not source.labeled:
        raise ParameterError("oversampling requires labels")
    counts = source.class_counts()
    for k, cnt in enumerate(counts):
        if cnt == 0:
            raise MissingClassError(k, "oversample_balanced")
    target = counts.max()
    parts = []
    for k in range(source.class_count):
        idx = np.flatnonzero(source.labels == k)
        extra = rng.choice(idx, size=target - idx.size, replace=True)
        parts.append(np.concatenate([idx, extra]))
    order = np.concatenate(parts)
    return source.subset(order[rng.permutation(order.size)])


def one_hot(label: int, c: int) -> np.ndarray:
    if not 0 <= label < c:
        raise ParameterError(f"label {label} outside [0, {c})")
    out = np.zeros(c)
    out[label] = 1.0
    return out


def one_hot_matrix(labels, c: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ParameterError(f"labels outside [0, {c})")
    out = np.zeros((y.size, c))
    out[np.arange(y.size), y] = 1.0
    return out


# ---------------------------------------------------------------- synthetic pair

@dataclass(frozen=True)
class SyntheticDomainConfig:
    """Gaussian-blob source domain and a rotated, translated target domain.

    Rotations act in the coordinate planes (0, 1), (2, 3), ... in order, one
    angle (degrees) per plane.  ``translation`` is a full vector or a scalar
    added to the first coordinate.
    """

    class_count: int = 10
    feature_dim: int = 32
    mean_scale: float = 1.0
    noise_std: float = 0.5
    rotation_deg: tuple[float, ...] = (30.0, 30.0)
    translation: tuple[float, ...] | float = 0.0
    samples_per_class: int = 200
    target_samples_per_class: int | None = None
    mean_offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ParameterError("feature_dim must be >= 2")
        if self.class_count < 2:
            raise ParameterError("class_count must be >= 2")
        if self.noise_std <= 0:
            raise ParameterError("noise_std must be positive")
        if 2 * len(self.rotation_deg) > self.feature_dim:
            raise ParameterError("more rotation planes than the dimension allows")
        if self.samples_per_class < 1:
            raise ParameterError("samples_per_class must be >= 1")
        object.__setattr__(self, "rotation_deg", tuple(float(a) for a in self.rotation_deg))
        self.translation_vector()

    def translation_vector(self) -> np.ndarray:
        t = np.atleast_1d(np.asarray(self.translation, dtype=np.float64))
        if t.size == 1:
            out = np.zeros(self.feature_dim)
            out[0] = t[0]
            return out
        if t.shape != (self.feature_dim,):
            raise ParameterError(f"translation must be a scalar or length {self.feature_dim}")
        return t

    def rotation_matrix(self) -> np.ndarray:
        r = np.eye(self.feature_dim)
        for plane, deg in enumerate(self.rotation_deg):
            i, j = 2 * plane, 2 * plane + 1
            th = np.deg2rad(deg)
            g = np.eye(self.feature_dim)
            g[i, i], g[i, j], g[j, i], g[j, j] = np.cos(th), -np.sin(th), np.sin(th), np.cos(th)
            r = g @ r
        return r


class SyntheticTruth(NamedTuple):
    source_means: np.ndarray  # c x d
    target_means: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray


class SyntheticPair(NamedTuple):
    source: DomainDataset
    target: DomainDataset
    truth: SyntheticTruth


def synthesize_domain_pair(config: SyntheticDomainConfig) -> SyntheticPair:
    """Draw a labeled source/target pair; target labels are for evaluation only."""
    c, d = config.class_count, config.feature_dim
    means = config.mean_offset + config.mean_scale * make_rng(config.seed, 0).standard_normal((c, d))
    rot, shift = config.rotation_matrix(), config.translation_vector()
    target_means = means @ rot.T + shift

    def draw(centers, per_class, stream):
        rng = make_rng(config.seed, stream)
        labels = np.repeat(np.arange(c), per_class)
        x = centers[labels] + config.noise_std * rng.standard_normal((labels.size, d))
        return x, labels

    n_t = config.target_samples_per_class or config.samples_per_class
    xs, ys = draw(means, config.samples_per_class, 1)
    xt, yt = draw(target_means, n_t, 2)
    return SyntheticPair(DomainDataset(xs, ys, c, "source"),
                         DomainDataset(xt, yt, c, "target"),
                         SyntheticTruth(means, target_means, rot, shift))


# ---------------------------------------------------------------- feature files

def _infer_format(path: Path, fmt):
    if fmt is not None:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "bin"


def save_features(ds: DomainDataset, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = [f"f{j}" for j in range(ds.dim)]
            w.writerow((["label"] if ds.labeled else []) + cols)
            for i in range(ds.n):
                row = [repr(float(v)) for v in ds.features[i]]
                w.writerow(([int(ds.labels[i])] if ds.labeled else []) + row)
    elif fmt == "bin":
        flags = FLAG_LABELS if ds.labeled else 0
        with path.open("wb") as fh:
            fh.write(BIN_HEADER.pack(BIN_MAGIC, ds.n, ds.dim, flags))
            if ds.labeled:
                fh.write(ds.labels.astype("<i4").tobytes())
            fh.write(ds.features.astype("<f8").tobytes())
    else:
        raise ParameterError(f"unknown feature format {fmt!r}")
    return path


def load_features(path, fmt: str | None = None, class_count: int | None = None,
                  domain_tag: str = "") -> DomainDataset:
    """Read a feature file written in either supported format.

    Without ``class_count`` the class count is one more than the largest label
    (1 for unlabeled files).
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if not path.exists():
        raise LoadError(f"{path}: no such file")
    if fmt == "csv":
        x, y = _read_csv(path)
    elif fmt == "bin":
        x, y = _read_bin(path)
    else:
        raise ParameterError(f"unknown feature format {fmt!r}")
    if class_count is None:
        class_count = int(y.max()) + 1 if y is not None and y.size else 1
    if y is not None and y.size:
        bad = np.flatnonzero((y < 0) | (y >= class_count))
        if bad.size:
            raise LoadError(f"{path}: row {bad[0]}: unknown class id {y[bad[0]]}")
    if not np.all(np.isfinite(x)):
        row = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
        raise LoadError(f"{path}: row {row}: non-finite feature value")
    return DomainDataset(x, y, class_count, domain_tag or path.stem)


def _read_csv(path):
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LoadError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[0] == "label"
    width = len(header) - has_label
    if width < 1:
        raise LoadError(f"{path}: no feature columns")
    feats, labels = [], []
    for i, row in enumerate(rows[1:]):
        if not row:
            continue
        if len(row) != len(header):
            raise LoadError(f"{path}: row {i}: expected {len(header)} fields, got {len(row)}")
        try:
            if has_label:
                labels.append(int(row[0]))
            feats.append([float(v) for v in row[has_label:]])
        except ValueError as exc:
            raise LoadError(f"{path}: row {i}: {exc}") from None
    x = np.array(feats, dtype=np.float64).reshape(len(feats), width)
    y = np.array(labels, dtype=np.int64) if has_label else None
    return x, y


def _read_bin(path):
    raw = path.read_bytes()
    if len(raw) < BIN_HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, n, d, flags = BIN_HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}")
    off = BIN_HEADER.size
    y = None
    if flags & FLAG_LABELS:
        y = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
        off += 4 * n
    expected = off + 8 * n * d
    if len(raw) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for {n}x{d}, found {len(raw)}")
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    return x, y
