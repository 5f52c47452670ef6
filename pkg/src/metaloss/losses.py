"""Adaptive loss components and reference baselines.

The two learnable pieces are tiny perceptrons optimized by meta-gradients:

* :class:`LabelCorrector` maps (class one-hot, normalized loss-rank bin) to
  a trust weight g in [0, 1]; corrected soft labels mix the given one-hot
  with the classifier's prediction as y* = y*g + y'*(1-g).
* :class:`MarginGenerator` maps a fixed all-ones vector to one additive
  logit margin per class; the loss is softmax cross-entropy on logits + q.

Baselines: balanced softmax (fixed q_j = log n_j) and a per-class
two-component Gaussian mixture over losses whose low-mean responsibility
serves as a clean-label posterior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .classifier import soft_cross_entropy, soft_cross_entropy_var


@dataclass
class RankAssignment:
    """Per-sample loss-rank bin within its given-label class."""

    bins: np.ndarray        # (N,) int64 in [0, num_bins)
    losses: np.ndarray      # the per-sample loss cache the bins came from
    num_bins: int


def compute_rank_bins(
    losses: np.ndarray,
    labels: np.ndarray,
    num_bins: int,
    num_classes: int | None = None,
) -> RankAssignment:
    """Sort each class by loss (ties by sample index) into equal-size bins.

    bin = floor(rank * num_bins / group_size), so within a class the bin
    sizes differ by at most one and the bin index is non-decreasing in loss.
    """
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if not np.isfinite(losses).all():
        raise ValueError("losses must be finite")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    bins = np.zeros(losses.shape[0], dtype=np.int64)
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            warnings.warn(f"class {c} has no samples; skipped in rank binning")
            continue
        order = idx[np.argsort(losses[idx], kind="stable")]
        ranks = np.arange(idx.size, dtype=np.int64)
        bins[order] = ranks * num_bins // idx.size
    return RankAssignment(bins, losses.copy(), num_bins)


@dataclass
class LabelCorrector:
    """Trust-weight network g(r|y): (C+1) -> hidden -> 1 with logistic output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    num_classes: int
    num_bins: int

    def param_arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_vars(self) -> list[ad.Var]:
        return [ad.parameter(p) for p in self.param_arrays()]

    def copy(self) -> "LabelCorrector":
        return LabelCorrector(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.num_classes, self.num_bins,
        )

    def inputs_for(self, onehot_labels: np.ndarray, bins: np.ndarray) -> np.ndarray:
        """Per-sample network input [one-hot(y) || r/R]."""
        norm = (np.asarray(bins, dtype=np.float64) / self.num_bins).reshape(-1, 1)
        return np.concatenate([onehot_labels, norm], axis=1)

    def weights(self, onehot_labels: np.ndarray, bins: np.ndarray) -> np.ndarray:
        """Plain g evaluation for metrics and reports."""
        x = self.inputs_for(onehot_labels, bins)
        h = kernels.relu(x @ self.w1 + self.b1)
        return kernels.logistic(h @ self.w2 + self.b2)

    def weight_table(self) -> np.ndarray:
        """Full g(r|y) grid, shape (num_bins, num_classes)."""
        r = np.repeat(np.arange(self.num_bins), self.num_classes)
        y = np.tile(np.arange(self.num_classes), self.num_bins)
        eye = np.eye(self.num_classes)[y]
        g = self.weights(eye, r)
        return g.reshape(self.num_bins, self.num_classes)


def init_corrector(
    num_classes: int,
    num_bins: int,
    hidden: int = 32,
    seed: int = 0,
    trust_bias: float = 3.0,
) -> LabelCorrector:
    """Glorot-uniform weights; the output bias starts at +3 so g ~ 0.95 and
    early training trusts the given labels."""
    rng = np.random.default_rng(seed)
    in_dim = num_classes + 1
    bound1 = np.sqrt(6.0 / (in_dim + hidden))
    bound2 = np.sqrt(6.0 / (hidden + 1))
    return LabelCorrector(
        w1=rng.uniform(-bound1, bound1, size=(in_dim, hidden)),
        b1=np.zeros((1, hidden)),
        w2=rng.uniform(-bound2, bound2, size=(hidden, 1)),
        b2=np.full((1, 1), trust_bias),
        num_classes=num_classes,
        num_bins=num_bins,
    )


def corrector_weights_var(params: list[ad.Var], inputs: np.ndarray) -> ad.Var:
    """Graph g for a batch of corrector inputs, shape (N, 1)."""
    w1, b1, w2, b2 = params
    h = ad.relu(ad.add(ad.matmul(ad.constant(inputs), w1), b1))
    return ad.logistic(ad.add(ad.matmul(h, w2), b2))


def correct_labels_var(
    g: ad.Var, given_onehot: np.ndarray, predicted: np.ndarray
) -> ad.Var:
    """Graph y* = y*g + y'*(1-g); predictions enter as constants (detached)."""
    y = ad.constant(given_onehot)
    yp = ad.constant(predicted)
    one = ad.constant(np.ones(g.shape))
    return ad.add(ad.mul(y, g), ad.mul(yp, one - g))


def correct_labels(
    corrector: LabelCorrector,
    given_onehot: np.ndarray,
    predicted: np.ndarray,
    bins: np.ndarray,
) -> np.ndarray:
    """Plain corrected soft labels for metrics and reports."""
    g = corrector.weights(given_onehot, bins)
    return given_onehot * g + predicted * (1.0 - g)


@dataclass
class MarginGenerator:
    """Margin network: fixed all-ones input -> hidden -> C identity outputs."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    num_classes: int

    def param_arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_vars(self) -> list[ad.Var]:
        return [ad.parameter(p) for p in self.param_arrays()]

    def copy(self) -> "MarginGenerator":
        return MarginGenerator(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.num_classes,
        )

    def margins(self) -> np.ndarray:
        """Plain margin vector q, shape (1, C)."""
        ones = np.ones((1, self.num_classes))
        h = kernels.relu(ones @ self.w1 + self.b1)
        return h @ self.w2 + self.b2


def init_margin_generator(
    num_classes: int, seed: int = 0, init_scale: float = 1e-2
) -> MarginGenerator:
    """Small uniform weights so the initial q is near zero (unbiased softmax)."""
    rng = np.random.default_rng(seed)
    hidden = 2 * num_classes
    return MarginGenerator(
        w1=rng.uniform(-init_scale, init_scale, size=(num_classes, hidden)),
        b1=np.zeros((1, hidden)),
        w2=rng.uniform(-init_scale, init_scale, size=(hidden, num_classes)),
        b2=np.zeros((1, num_classes)),
        num_classes=num_classes,
    )


def margins_var(params: list[ad.Var], num_classes: int) -> ad.Var:
    """Graph margin vector q, shape (1, C)."""
    w1, b1, w2, b2 = params
    ones = ad.constant(np.ones((1, num_classes)))
    h = ad.relu(ad.add(ad.matmul(ones, w1), b1))
    return ad.add(ad.matmul(h, w2), b2)


def margin_softmax_loss(
    logits: np.ndarray, margins: np.ndarray, targets: np.ndarray
) -> float:
    """Soft cross-entropy on margin-shifted logits (p + q)."""
    margins = np.asarray(margins, dtype=np.float64).reshape(1, -1)
    if margins.shape[1] != logits.shape[1]:
        raise ValueError(f"margin length {margins.shape[1]} != classes {logits.shape[1]}")
    return soft_cross_entropy(logits + margins, targets)


def margin_softmax_loss_var(
    logits: ad.Var, margins: ad.Var, targets: ad.Var | np.ndarray
) -> ad.Var:
    shifted = ad.add(logits, ad.bcast_rows(margins, logits.shape[0]))
    return soft_cross_entropy_var(shifted, targets)


def balanced_softmax_margins(class_counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(class_counts, dtype=np.float64).reshape(1, -1)
    if counts.min() < 1:
        raise ValueError("balanced softmax needs every class count >= 1")
    return np.log(counts)


def balanced_softmax_loss(
    logits: np.ndarray, class_counts: np.ndarray, targets: np.ndarray
) -> float:
    """Baseline with the fixed margin q_j = log(n_j)."""
    return margin_softmax_loss(logits, balanced_softmax_margins(class_counts), targets)


# --- loss-based Gaussian mixture split (baseline) -----------------------------

def fit_loss_mixture(
    values: np.ndarray, max_iter: int = 200, tol: float = 1e-8
) -> np.ndarray:
    """Two-component 1-d Gaussian mixture via EM; returns the responsibility
    of the lower-mean component for each value.

    Means start at the 10th/90th percentiles with pooled variance and equal
    weights. A degenerate sample (all values equal) short-circuits to
    posterior 1 with a warning.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 4:
        raise ValueError("mixture fit needs at least 4 values")
    if np.all(values == values[0]):
        warnings.warn("degenerate loss cluster (all values equal); posterior 1.0")
        return np.ones(values.size)

    var_floor = 1e-12
    mu = np.percentile(values, [10.0, 90.0])
    var = np.full(2, max(values.var(), var_floor))
    pi = np.array([0.5, 0.5])

    prev_ll = -np.inf
    resp = np.empty((values.size, 2))
    for _ in range(max_iter):
        # E step in log domain to dodge underflow on tight clusters
        logp = (
            -0.5 * (values[:, None] - mu[None, :]) ** 2 / var[None, :]
            - 0.5 * np.log(2.0 * np.pi * var[None, :])
            + np.log(pi[None, :])
        )
        norm = kernels.row_logsumexp(logp)
        resp = np.exp(logp - norm)
        ll = float(norm.sum())
        # M step
        weight = resp.sum(axis=0)
        pi = weight / values.size
        mu = (resp * values[:, None]).sum(axis=0) / weight
        var = (resp * (values[:, None] - mu[None, :]) ** 2).sum(axis=0) / weight
        var = np.maximum(var, var_floor)
        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll

    low = int(np.argmin(mu))
    return resp[:, low]


def gmm_split(
    losses: np.ndarray, labels: np.ndarray, num_classes: int
) -> np.ndarray:
    """Class-specific mixture split: per class, clean posterior of each sample."""
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    posterior = np.ones(losses.shape[0])
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        posterior[idx] = fit_loss_mixture(losses[idx])
    return posterior
