"""Run manifests, metrics serialization, and analysis tables.

Reports are machine-readable tables (CSV/JSON) meant for external plotting;
every emitted file parses back losslessly. Metrics files contain one JSON
object per epoch and are byte-reproducible from the run manifest.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import MLP, forward, model_from_dict, model_to_dict, onehot, per_sample_cross_entropy
from .datasets import LabeledDataset
from .losses import (
    LabelCorrector,
    MarginGenerator,
    compute_rank_bins,
    correct_labels,
)
from .trainer import TrainConfig, TrainState, _predicted_targets


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("spearman needs two equal-length vectors of size >= 2")

    def _ranks(v: np.ndarray) -> np.ndarray:
        order = np.argsort(v, kind="stable")
        ranks = np.empty(v.size)
        ranks[order] = np.arange(1, v.size + 1, dtype=np.float64)
        # average the ranks of tied values
        for val in np.unique(v):
            mask = v == val
            if mask.sum() > 1:
                ranks[mask] = ranks[mask].mean()
        return ranks

    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def write_metrics_jsonl(history: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry) + "\n")


def read_metrics_jsonl(path: str | Path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


@dataclass
class RunManifest:
    config: dict
    dataset: str
    holdout: str | None
    dataset_provenance: list[dict]
    seed: int
    outputs: dict
    version: str = __version__
    wall_clock_sec: float | None = None
    kernel_backend: str = ""

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "kernel_backend": self.kernel_backend,
            "seed": self.seed,
            "config": self.config,
            "dataset": self.dataset,
            "holdout": self.holdout,
            "dataset_provenance": self.dataset_provenance,
            "outputs": self.outputs,
            "wall_clock_sec": self.wall_clock_sec,
        }


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8"
    )


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --- trainer checkpoints -------------------------------------------------------

def _net_to_dict(net: LabelCorrector | MarginGenerator) -> dict:
    return {
        "w1": net.w1.tolist(),
        "b1": net.b1.tolist(),
        "w2": net.w2.tolist(),
        "b2": net.b2.tolist(),
    }


def _net_arrays(payload: dict) -> dict:
    return {k: np.array(v, dtype=np.float64) for k, v in payload.items()}


def checkpoint_to_dict(state: TrainState, config: TrainConfig) -> dict:
    return {
        "format_version": 1,
        "model": model_to_dict(state.model),
        "corrector": {
            **_net_to_dict(state.corrector),
            "num_classes": state.corrector.num_classes,
            "num_bins": state.corrector.num_bins,
        },
        "margin_generator": {
            **_net_to_dict(state.margin_gen),
            "num_classes": state.margin_gen.num_classes,
        },
        "epoch": state.epoch,
        "config": config.to_dict(),
    }


def save_checkpoint(state: TrainState, config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(checkpoint_to_dict(state, config)) + "\n", encoding="utf-8"
    )


@dataclass
class Checkpoint:
    model: MLP
    corrector: LabelCorrector
    margin_gen: MarginGenerator
    config: TrainConfig
    epoch: int = 0


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    corr = payload["corrector"]
    marg = payload["margin_generator"]
    from .trainer import config_from_dict

    return Checkpoint(
        model=model_from_dict(payload["model"]),
        corrector=LabelCorrector(
            **_net_arrays({k: corr[k] for k in ("w1", "b1", "w2", "b2")}),
            num_classes=int(corr["num_classes"]),
            num_bins=int(corr["num_bins"]),
        ),
        margin_gen=MarginGenerator(
            **_net_arrays({k: marg[k] for k in ("w1", "b1", "w2", "b2")}),
            num_classes=int(marg["num_classes"]),
        ),
        config=config_from_dict(payload["config"]),
        epoch=int(payload.get("epoch", 0)),
    )


# --- inspection tables ---------------------------------------------------------

def crossing_bins(weight_table: np.ndarray) -> list[int | None]:
    """Per class, the first rank bin where g drops below 0.5 (None if never)."""
    out: list[int | None] = []
    for c in range(weight_table.shape[1]):
        below = np.flatnonzero(weight_table[:, c] < 0.5)
        out.append(int(below[0]) if below.size else None)
    return out


def write_weight_table_csv(weight_table: np.ndarray, path: str | Path) -> None:
    num_bins, num_classes = weight_table.shape
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin"] + [f"class_{c}" for c in range(num_classes)])
        for r in range(num_bins):
            writer.writerow([r] + [repr(float(v)) for v in weight_table[r]])


def write_margins_csv(margins: np.ndarray, class_counts: np.ndarray,
                      path: str | Path) -> None:
    margins = margins.ravel()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count", "margin"])
        for c, (n, q) in enumerate(zip(class_counts, margins)):
            writer.writerow([c, int(n), repr(float(q))])


@dataclass
class InspectionReport:
    weight_table: np.ndarray
    margins: np.ndarray
    class_counts: np.ndarray
    margin_count_spearman: float
    corrected_label_accuracy: float | None
    crossing_bins: list[int | None]
    estimated_clean_fractions: list[float | None] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "margin_count_spearman": self.margin_count_spearman,
            "corrected_label_accuracy": self.corrected_label_accuracy,
            "crossing_bins": self.crossing_bins,
            "estimated_clean_fractions": self.estimated_clean_fractions,
        }


def inspect_checkpoint(ck: Checkpoint, data: LabeledDataset) -> InspectionReport:
    """All report tables for a trained checkpoint against a dataset."""
    if data.dims != ck.model.weights[0].shape[0]:
        raise ValueError(
            f"dataset has {data.dims} features, checkpoint expects "
            f"{ck.model.weights[0].shape[0]}"
        )
    if data.num_classes != ck.corrector.num_classes:
        raise ValueError("dataset and checkpoint class counts differ")
    table = ck.corrector.weight_table()
    margins = ck.margin_gen.margins()
    counts = data.class_counts()
    cross = crossing_bins(table)
    fractions = [
        None if b is None else b / ck.corrector.num_bins for b in cross
    ]

    corrected_acc = None
    if data.true_labels is not None:
        logits = forward(ck.model, data.features)
        cache = per_sample_cross_entropy(logits, data.given_labels)
        ranks = compute_rank_bins(
            cache, data.given_labels, ck.corrector.num_bins, data.num_classes
        )
        given = onehot(data.given_labels, data.num_classes)
        predicted = _predicted_targets(logits, ck.config)
        corrected = correct_labels(ck.corrector, given, predicted, ranks.bins)
        corrected_acc = float(np.mean(np.argmax(corrected, axis=1) == data.true_labels))

    return InspectionReport(
        weight_table=table,
        margins=margins,
        class_counts=counts,
        margin_count_spearman=spearman(margins.ravel(), counts),
        corrected_label_accuracy=corrected_acc,
        crossing_bins=cross,
        estimated_clean_fractions=fractions,
    )


def write_inspection(report: InspectionReport, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "weight_table": str(out_dir / "weight_table.csv"),
        "margins": str(out_dir / "margins.csv"),
        "summary": str(out_dir / "summary.json"),
    }
    write_weight_table_csv(report.weight_table, paths["weight_table"])
    write_margins_csv(report.margins, report.class_counts, paths["margins"])
    Path(paths["summary"]).write_text(
        json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8"
    )
    return paths


class Stopwatch:
    def __init__(self) -> None:
        self.start = time.monotonic()

    def elapsed(self) -> float:
        return time.monotonic() - self.start
