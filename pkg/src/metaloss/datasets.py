"""Synthetic dataset generation, bias injection, and CSV ingestion.

Datasets keep both the labels handed to the trainer (``given_labels``) and,
for synthetic data, the uncorrupted truth (``true_labels``), so corruption
rates are measurable after the fact. Every generator and injector is a pure
seeded function; corruption provenance is carried along as a list of plain
dicts and written to a ``.prov.json`` sidecar next to the CSV.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray                  # (N, D) float64
    given_labels: np.ndarray              # (N,) int64 in [0, C)
    true_labels: np.ndarray | None        # (N,) int64, present for synthetic data
    num_classes: int
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.given_labels = np.asarray(self.given_labels, dtype=np.int64)
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-d matrix")
        if self.given_labels.shape != (self.features.shape[0],):
            raise DatasetError("one given label per row required")
        for name, labels in (("given", self.given_labels), ("true", self.true_labels)):
            if labels is None:
                continue
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"{name} label out of range [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.given_labels, minlength=self.num_classes)

    def noisy_fraction(self) -> float | None:
        """Measured disagreement between given and true labels."""
        if self.true_labels is None:
            return None
        return float(np.mean(self.given_labels != self.true_labels))


def _class_means(num_classes: int, dims: int, separation: float) -> np.ndarray:
    """Deterministic cluster centers at pairwise distance >= separation.

    With enough dimensions the centers sit on scaled axes (exactly
    equidistant); otherwise they sit on a circle in the first two dims,
    where adjacent centers realize the minimum distance.
    """
    means = np.zeros((num_classes, dims))
    if num_classes <= dims:
        scale = separation / math.sqrt(2.0)
        for c in range(num_classes):
            means[c, c] = scale
    else:
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def gen_blobs(
    num_classes: int,
    per_class: int,
    dims: int,
    separation: float,
    seed: int,
) -> LabeledDataset:
    """Balanced isotropic Gaussian clusters with unit variance.

    Cluster centers depend only on (num_classes, dims, separation), so
    datasets drawn with different seeds share geometry — a holdout set is
    just another seed.
    """
    if num_classes < 2 or per_class < 1 or dims < 2:
        raise DatasetError("need num_classes >= 2, per_class >= 1, dims >= 2")
    if separation <= 0:
        raise DatasetError("separation must be positive")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    means = _class_means(num_classes, dims, separation)
    features = rng.standard_normal((num_classes * per_class, dims)) + means[labels]
    prov = [{
        "op": "blobs",
        "num_classes": num_classes,
        "per_class": per_class,
        "dims": dims,
        "separation": separation,
        "seed": seed,
    }]
    return LabeledDataset(features, labels, labels.copy(), num_classes, prov)


def longtail_counts(per_class: int, num_classes: int, imbalance_ratio: float) -> list[int]:
    """Exponential head-to-tail profile: class i keeps floor(n * rho^(-i/(C-1)))."""
    return [
        int(math.floor(per_class * imbalance_ratio ** (-i / (num_classes - 1))))
        for i in range(num_classes)
    ]


def apply_longtail(data: LabeledDataset, imbalance_ratio: float, seed: int) -> LabeledDataset:
    """Subsample a balanced dataset to the exponential long-tail profile.

    Kept samples are drawn uniformly at random within each class, so the
    within-class distribution is preserved.
    """
    if imbalance_ratio < 1:
        raise DatasetError("imbalance ratio must be >= 1")
    counts = data.class_counts()
    if counts.min() != counts.max():
        raise DatasetError("long-tail subsampling expects a balanced dataset")
    per_class = int(counts[0])
    target = longtail_counts(per_class, data.num_classes, imbalance_ratio)
    if min(target) < 1:
        raise DatasetError(
            f"imbalance ratio {imbalance_ratio} would empty a class "
            f"(per_class={per_class})"
        )
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.given_labels == c)
        chosen = rng.choice(idx, size=target[c], replace=False)
        keep.append(np.sort(chosen))
    order = np.concatenate(keep)
    prov = data.provenance + [{
        "op": "longtail",
        "imbalance_ratio": imbalance_ratio,
        "seed": seed,
        "class_counts": target,
    }]
    return LabeledDataset(
        data.features[order],
        data.given_labels[order],
        None if data.true_labels is None else data.true_labels[order],
        data.num_classes,
        prov,
    )


def _with_new_labels(data: LabeledDataset, labels: np.ndarray, entry: dict) -> LabeledDataset:
    out = replace(data, given_labels=labels, provenance=data.provenance + [entry])
    entry["noisy_fraction"] = out.noisy_fraction()
    return out


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise DatasetError(f"noise rate must lie in [0, 1], got {rate}")


def inject_symmetric_noise(data: LabeledDataset, rate: float, seed: int) -> LabeledDataset:
    """Each sample's label is resampled uniformly over all classes with
    probability ``rate`` (the new label may equal the old one, so the
    effective corruption is rate*(C-1)/C)."""
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    flip = rng.random(data.n) < rate
    resampled = rng.integers(0, data.num_classes, size=data.n)
    labels = np.where(flip, resampled, data.given_labels).astype(np.int64)
    return _with_new_labels(
        data, labels, {"op": "symmetric_noise", "rate": rate, "seed": seed}
    )


def inject_asymmetric_noise(
    data: LabeledDataset,
    rate: float,
    pair_map: dict[int, int],
    seed: int,
) -> LabeledDataset:
    """Pair noise: samples of a mapped class flip to the mapped target with
    probability ``rate``; unmapped classes are untouched."""
    _check_rate(rate)
    for src, dst in pair_map.items():
        if not (0 <= src < data.num_classes and 0 <= dst < data.num_classes):
            raise DatasetError(f"pair map entry {src}->{dst} out of range")
    rng = np.random.default_rng(seed)
    flip = rng.random(data.n) < rate
    labels = data.given_labels.copy()
    for src, dst in sorted(pair_map.items()):
        mask = flip & (data.given_labels == src)
        labels[mask] = dst
    return _with_new_labels(
        data,
        labels,
        {
            "op": "asymmetric_noise",
            "rate": rate,
            "pair_map": {str(k): v for k, v in sorted(pair_map.items())},
            "seed": seed,
        },
    )


def inject_distribution_noise(data: LabeledDataset, rate: float, seed: int) -> LabeledDataset:
    """Distribution-aware noise: a sample is reassigned to class j with
    probability rate * N_j / N, where N_j counts class j's given labels, and
    kept otherwise. On balanced data this reduces to symmetric resampling."""
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    probs = data.class_counts() / data.n
    flip = rng.random(data.n) < rate
    targets = rng.choice(data.num_classes, size=data.n, p=probs)
    labels = np.where(flip, targets, data.given_labels).astype(np.int64)
    return _with_new_labels(
        data, labels, {"op": "distribution_noise", "rate": rate, "seed": seed}
    )


# --- CSV + provenance sidecar ------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".prov.json")


def save_csv(data: LabeledDataset, path: str | Path) -> None:
    """Write features and labels as CSV plus a .prov.json sidecar.

    Floats are written with repr (shortest round-trip form); reloading
    reproduces the dataset exactly.
    """
    path = Path(path)
    header = [f"feature_{j}" for j in range(data.dims)] + ["given_label"]
    if data.true_labels is not None:
        header.append("true_label")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]]
            row.append(str(int(data.given_labels[i])))
            if data.true_labels is not None:
                row.append(str(int(data.true_labels[i])))
            writer.writerow(row)
    sidecar = {
        "num_classes": data.num_classes,
        "num_samples": data.n,
        "noisy_fraction": data.noisy_fraction(),
        "provenance": data.provenance,
    }
    _sidecar_path(path).write_text(
        json.dumps(sidecar, indent=2) + "\n", encoding="utf-8"
    )


def load_csv(path: str | Path) -> LabeledDataset:
    """Load a dataset written by :func:`save_csv` (sidecar optional).

    Without a sidecar the class count is inferred as max label + 1.
    """
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        rows = list(reader)

    has_true = header[-1:] == ["true_label"]
    n_features = len(header) - (2 if has_true else 1)
    expected = [f"feature_{j}" for j in range(n_features)] + ["given_label"]
    if has_true:
        expected.append("true_label")
    if header != expected or n_features < 1:
        raise DatasetError(f"{path}: malformed header {header!r}")

    num_classes: int | None = None
    provenance: list[dict] = []
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        num_classes = int(meta["num_classes"])
        provenance = list(meta.get("provenance", []))

    features = np.empty((len(rows), n_features))
    given = np.empty(len(rows), dtype=np.int64)
    true = np.empty(len(rows), dtype=np.int64) if has_true else None
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {i + 1} has {len(row)} cells")
        try:
            features[i] = [float(v) for v in row[:n_features]]
            given[i] = int(row[n_features])
            if true is not None:
                true[i] = int(row[n_features + 1])
        except ValueError as exc:
            raise DatasetError(f"{path}: row {i + 1}: {exc}") from None
    if num_classes is None:
        labels_max = given.max(initial=0)
        if true is not None and len(rows):
            labels_max = max(labels_max, true.max())
        num_classes = int(labels_max) + 1
    for i in range(len(rows)):
        if given[i] >= num_classes or given[i] < 0 or (
            true is not None and not 0 <= true[i] < num_classes
        ):
            raise DatasetError(f"{path}: row {i + 1}: label out of range")
    return LabeledDataset(features, given, true, num_classes, provenance)
