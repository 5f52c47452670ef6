"""Per-epoch construction of the balanced clean meta set.

Hierarchical sampling draws a random per-class primary subset first and
only then keeps the lowest-loss members, so the meta set changes across
epochs and is not locked onto the same easy samples — the failure mode of
the naive lowest-loss rule, which is provided as a baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LabeledDataset


class SamplingError(ValueError):
    pass


@dataclass
class EpochSplit:
    meta_indices: np.ndarray     # balanced across classes, sorted
    train_indices: np.ndarray    # the complement, sorted
    per_class_meta: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "meta_indices": self.meta_indices.tolist(),
            "train_indices": self.train_indices.tolist(),
            "per_class_meta": self.per_class_meta,
            "seed": self.seed,
        }


def _lowest_loss(idx: np.ndarray, losses: np.ndarray, k: int) -> np.ndarray:
    """k members of idx with the smallest loss, ties broken by index."""
    idx = np.sort(idx)
    order = idx[np.argsort(losses[idx], kind="stable")]
    return order[:k]


def _finalize(
    n: int, per_class_picks: list[np.ndarray], k: int, seed: int | None
) -> EpochSplit:
    meta = np.sort(np.concatenate(per_class_picks)) if per_class_picks else np.empty(0, np.int64)
    mask = np.ones(n, dtype=bool)
    mask[meta] = False
    return EpochSplit(meta.astype(np.int64), np.flatnonzero(mask).astype(np.int64), k, seed)


def hierarchical_sample(
    data: LabeledDataset,
    losses: np.ndarray,
    m0_frac: float,
    m1_frac: float,
    seed: int,
) -> EpochSplit:
    """Random primary subset per class, then lowest-loss selection.

    Per class c: primary = floor(m0_frac * n_c) random samples, candidates =
    the floor(m1_frac * |primary|) lowest-loss members. The per-class meta
    count is min_c |candidates| so the meta set is exactly balanced; every
    unselected sample goes to the training counterpart.
    """
    if not 0.0 < m1_frac <= m0_frac <= 1.0:
        raise SamplingError(f"need 0 < m1_frac <= m0_frac <= 1, got {m0_frac}, {m1_frac}")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (data.n,):
        raise SamplingError("losses must cover every sample")
    rng = np.random.default_rng(seed)
    candidates: list[np.ndarray] = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.given_labels == c)
        n_primary = int(np.floor(m0_frac * idx.size))
        primary = rng.choice(idx, size=n_primary, replace=False) if n_primary else idx[:0]
        n_cand = int(np.floor(m1_frac * primary.size))
        candidates.append(_lowest_loss(primary, losses, n_cand))
    k = min(c.size for c in candidates)
    if k == 0:
        raise SamplingError(
            "a class produced no meta candidates; raise m1_frac/m0_frac or "
            "reduce the dataset imbalance"
        )
    picks = [_lowest_loss(c, losses, k) for c in candidates]
    return _finalize(data.n, picks, k, seed)


def naive_sample(data: LabeledDataset, losses: np.ndarray, m1_frac: float) -> EpochSplit:
    """Lowest-loss selection straight from each full class (no primary stage);
    deterministic given the losses, which is exactly its weakness."""
    if not 0.0 < m1_frac <= 1.0:
        raise SamplingError(f"need 0 < m1_frac <= 1, got {m1_frac}")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (data.n,):
        raise SamplingError("losses must cover every sample")
    candidates: list[np.ndarray] = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.given_labels == c)
        n_cand = int(np.floor(m1_frac * idx.size))
        candidates.append(_lowest_loss(idx, losses, n_cand))
    k = min(c.size for c in candidates)
    if k == 0:
        raise SamplingError(
            "a class produced no meta candidates; raise m1_frac or reduce "
            "the dataset imbalance"
        )
    picks = [_lowest_loss(c, losses, k) for c in candidates]
    return _finalize(data.n, picks, k, None)


def dispersion(meta_features: np.ndarray, meta_labels: np.ndarray) -> float:
    """Mean over classes of the mean pairwise distance within the class."""
    meta_features = np.asarray(meta_features, dtype=np.float64)
    meta_labels = np.asarray(meta_labels, dtype=np.int64)
    per_class: list[float] = []
    for c in np.unique(meta_labels):
        pts = meta_features[meta_labels == c]
        if pts.shape[0] < 2:
            raise SamplingError(f"class {c} has fewer than 2 meta samples")
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        m = pts.shape[0]
        per_class.append(float(dist.sum() / (m * (m - 1))))
    return float(np.mean(per_class))
