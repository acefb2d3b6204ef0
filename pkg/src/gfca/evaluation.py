"""Accuracy metrics, cosine silhouettes, centroid similarity and weight norms.

:class:`MetricsReport` serialises to JSON with sorted keys and to a one-row
CSV, so equal runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingClassError, ParameterError, UndefinedMetricError
from .numerics import cosine_similarity


def subset_accuracy(predictions, truth, subset) -> float:
    """Percentage correct among samples whose true class is in ``subset``."""
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise ParameterError("predictions and truth differ in length")
    mask = np.isin(true, list(subset))
    if not mask.any():
        raise UndefinedMetricError(f"no samples with true class in {sorted(subset)}")
    return 100.0 * float((pred[mask] == true[mask]).sum()) / float(mask.sum())


def per_class_accuracy(predictions, truth, class_count: int) -> list[float | None]:
    out = []
    for k in range(class_count):
        try:
            out.append(subset_accuracy(predictions, truth, [k]))
        except UndefinedMetricError:
            out.append(None)
    return out


def cross_task_average(values) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ParameterError("cross_task_average of an empty list")
    return sum(vals) / len(vals)


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ParameterError("cosine distance undefined for zero vectors")
    return x / norms


def silhouette_cosine(features, labels, augmentation=None, scope="all",
                      few_shot_classes=None) -> float:
    """Mean silhouette coefficient with cosine distance and label-defined clusters.

    ``augmentation`` is an optional ``(features, labels)`` pair appended to the
    data.  With ``scope="few-shot"`` only samples of ``few_shot_classes`` are
    kept.  Samples alone in their cluster score 0.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if augmentation is not None:
        ax, ay = augmentation
        ax = np.asarray(ax, dtype=np.float64).reshape(-1, x.shape[1])
        x = np.vstack([x, ax])
        y = np.concatenate([y, np.asarray(ay, dtype=np.int64)])
    if scope == "few-shot":
        if few_shot_classes is None:
            raise ParameterError("few-shot scope needs few_shot_classes")
        keep = np.isin(y, list(few_shot_classes))
        x, y = x[keep], y[keep]
    elif scope != "all":
        raise ParameterError(f"unknown scope {scope!r}")
    classes = np.unique(y)
    if classes.size < 2:
        raise ParameterError("silhouette needs at least 2 clusters")
    u = _unit_rows(x)
    dist = np.maximum(1.0 - u @ u.T, 0.0)
    np.fill_diagonal(dist, 0.0)
    member = y[:, None] == classes[None, :]
    sums = dist @ member
    sizes = member.sum(axis=0)
    own = np.searchsorted(classes, y)
    n_own = sizes[own]
    a = np.where(n_own > 1, sums[np.arange(y.size), own] / np.maximum(n_own - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(y.size), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((n_own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def centroid_similarity_report(train_x, train_y, heldout_x, heldout_y, synth_x, synth_y,
                               few_shot_classes) -> list[dict]:
    """Per few-shot class cosine similarity of class centres against held-out data.

    Pass ``synth_x=None`` when there is no generator; the synthetic entry is
    then ``None``.
    """
    def centre(name, x, y, k):
        mask = np.asarray(y) == k
        if not mask.any():
            raise MissingClassError(k, name)
        return np.asarray(x)[mask].mean(axis=0)

    out = []
    for k in sorted(few_shot_classes):
        ho = centre("heldout", heldout_x, heldout_y, k)
        entry = {"class": int(k),
                 "train_vs_heldout": cosine_similarity(centre("train", train_x, train_y, k), ho),
                 "synthetic_vs_heldout": None}
        if synth_x is not None:
            entry["synthetic_vs_heldout"] = cosine_similarity(centre("synthetic", synth_x, synth_y, k), ho)
        out.append(entry)
    return out


def weight_norm_report(W_c, normal_classes, few_shot_classes) -> tuple[float, float]:
    """Mean L2 norm (not squared) of classifier rows over normal and few-shot classes."""
    norms = np.linalg.norm(np.asarray(W_c, dtype=np.float64), axis=1)
    normal = float(norms[list(normal_classes)].mean()) if len(normal_classes) else float("nan")
    few = float(norms[list(few_shot_classes)].mean()) if len(few_shot_classes) else float("nan")
    return normal, few


def export_embeddings(encode_fn, path, sets: dict) -> Path:
    """Write embedded rows as CSV: ``source_kind, class_id, h0 .. h{d-1}``.

    ``sets`` maps a kind (``real-train``, ``real-heldout``, ``synthetic``,
    ``target``) to ``(features, labels)``; labels may be ``None`` (written
    as -1).  Empty sets are skipped.
    """
    path = Path(path)
    blocks = []
    for kind, (x, y) in sets.items():
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            continue
        h = np.asarray(encode_fn(x))
        yy = np.full(h.shape[0], -1) if y is None else np.asarray(y)
        blocks.append((kind, h, yy))
    width = blocks[0][1].shape[1] if blocks else 0
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_kind", "class_id"] + [f"h{j}" for j in range(width)])
        for kind, h, yy in blocks:
            for row, lab in zip(h, yy):
                w.writerow([kind, int(lab)] + [repr(float(v)) for v in row])
    return path


def load_embeddings(path):
    """Read an embeddings CSV back as ``(kinds, class_ids, matrix)``."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    kinds = [r[0] for r in body]
    ids = np.array([int(r[1]) for r in body], dtype=np.int64)
    width = len(rows[0]) - 2
    mat = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), width)
    return kinds, ids, mat


@dataclass
class MetricsReport:
    mode: str
    seed: int
    per_class_accuracy: list
    few_shot_accuracy: float
    normal_accuracy: float
    overall_accuracy: float
    few_shot_accuracy_macro: float
    normal_accuracy_macro: float
    n_few_shot_target: int
    n_normal_target: int
    silhouette: dict
    centroid_similarity: list | None
    mean_weight_norm_normal: float
    mean_weight_norm_few_shot: float | None
    alpha: float
    few_shot_sq_norm: float | None
    max_abs_loss: float
    few_shot_classes: list
    shots_per_class: int | None
    class_count: int
    config: dict = field(default_factory=dict)
    task: str = ""

    @property
    def fc_ratio(self) -> float | None:
        """Mean few-shot squared weight norm over alpha."""
        if self.few_shot_sq_norm is None:
            return None
        return self.few_shot_sq_norm / self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        return cls.from_dict(json.loads(text))

    CSV_FIELDS = ("mode", "seed", "few_shot_accuracy", "normal_accuracy", "overall_accuracy",
                  "mean_weight_norm_normal", "mean_weight_norm_few_shot", "alpha",
                  "few_shot_sq_norm")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        sil = sorted(self.silhouette)
        w.writerow(list(self.CSV_FIELDS) + [f"silhouette_{k}" for k in sil])
        d = self.to_dict()
        w.writerow([d[k] for k in self.CSV_FIELDS] + [self.silhouette[k] for k in sil])
        return buf.getvalue()


def accuracy_block(predictions, truth, class_count, few_shot_classes, normal_classes) -> dict:
    """Headline accuracies (micro over samples) plus macro-per-class extras."""
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    per = per_class_accuracy(pred, true, class_count)

    def macro(classes):
        vals = [per[k] for k in classes if per[k] is not None]
        return float(np.mean(vals)) if vals else None

    def micro(classes):
        try:
            return subset_accuracy(pred, true, classes)
        except UndefinedMetricError:
            return None

    return {
        "per_class_accuracy": per,
        "few_shot_accuracy": micro(few_shot_classes),
        "normal_accuracy": micro(normal_classes),
        "overall_accuracy": subset_accuracy(pred, true, range(class_count)),
        "few_shot_accuracy_macro": macro(few_shot_classes),
        "normal_accuracy_macro": macro(normal_classes),
        "n_few_shot_target": int(np.isin(true, list(few_shot_classes)).sum()),
        "n_normal_target": int(np.isin(true, list(normal_classes)).sum()),
    }
