"""Training loop: warmup, per-epoch refresh/split, and per-iteration
meta-updates of the adaptive loss followed by the classifier step.

Each post-warmup epoch recomputes the per-sample loss cache with the
current classifier (given labels, no margins, no correction), reassigns
loss-rank bins, and redraws the meta/train split. Each iteration then

1. builds the adaptive training loss (corrected labels + margins),
2. takes a virtual plain-GD step of the classifier on it,
3. evaluates plain CE of a meta batch at the virtual parameters,
4. Adam-updates the corrector and margin generator with the resulting
   meta-gradient, and
5. re-derives the adaptive loss under the updated meta parameters and
   applies the actual SGD-momentum step to the classifier.

Margins and label correction never touch the meta loss or evaluation.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .classifier import (
    MLP,
    forward,
    init_mlp,
    logits_var,
    onehot,
    param_vars,
    per_sample_cross_entropy,
    soft_cross_entropy_var,
)
from .datasets import LabeledDataset
from .losses import (
    LabelCorrector,
    MarginGenerator,
    RankAssignment,
    balanced_softmax_margins,
    compute_rank_bins,
    corrector_weights_var,
    correct_labels,
    correct_labels_var,
    gmm_split,
    init_corrector,
    init_margin_generator,
    margin_softmax_loss_var,
    margins_var,
)
from .sampling import EpochSplit, hierarchical_sample, naive_sample

BASELINES = ("dynamic", "ce", "balanced_softmax", "gmm_relabel")
SAMPLERS = ("hierarchical", "naive")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    meta_lr: float = 3e-3
    rank_bins: int = 100
    m0_frac: float = 0.5
    m1_frac: float = 0.25
    seed: int = 0
    baseline: str = "dynamic"
    sampler: str = "hierarchical"
    hidden: int = 64
    corrector_hidden: int = 32
    predicted_labels: str = "soft"

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            problems.append("warmup_epochs: must satisfy 0 <= warmup_epochs < epochs")
        if self.batch_size < 2:
            problems.append("batch_size: must be >= 2")
        if self.lr <= 0:
            problems.append("lr: must be > 0")
        if self.meta_lr < 0:
            problems.append("meta_lr: must be >= 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay: must be >= 0")
        if self.rank_bins < 1:
            problems.append("rank_bins: must be >= 1")
        if not 0 < self.m1_frac <= self.m0_frac <= 1:
            problems.append("m0_frac/m1_frac: need 0 < m1_frac <= m0_frac <= 1")
        if self.baseline not in BASELINES:
            problems.append(f"baseline: must be one of {BASELINES}")
        if self.sampler not in SAMPLERS:
            problems.append(f"sampler: must be one of {SAMPLERS}")
        if self.hidden < 1 or self.corrector_hidden < 1:
            problems.append("hidden/corrector_hidden: must be >= 1")
        if self.predicted_labels not in ("soft", "hard"):
            problems.append("predicted_labels: must be 'soft' or 'hard'")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def config_from_dict(payload: dict) -> TrainConfig:
    """Build a config from a flat mapping, listing every bad key by name."""
    problems = []
    values: dict = {}
    for key, raw in payload.items():
        if key not in _FIELD_TYPES:
            problems.append(f"unknown config key '{key}'")
            continue
        kind = _FIELD_TYPES[key]
        try:
            if kind == "int":
                if isinstance(raw, float) and raw != int(raw):
                    raise ValueError("not an integer")
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = str(raw)
        except (TypeError, ValueError):
            problems.append(f"{key}: cannot interpret {raw!r}")
    if problems:
        raise ConfigError("; ".join(problems))
    config = TrainConfig(**values)
    config.validate()
    return config


@dataclass
class TrainState:
    model: MLP
    corrector: LabelCorrector
    margin_gen: MarginGenerator
    momentum_buffers: list[np.ndarray]
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    adam_t: int = 0
    loss_cache: Optional[np.ndarray] = None
    ranks: Optional[RankAssignment] = None
    split: Optional[EpochSplit] = None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def meta_arrays(self) -> list[np.ndarray]:
        return self.corrector.param_arrays() + self.margin_gen.param_arrays()

    def model_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.model.weights, self.model.biases):
            out.append(w)
            out.append(b)
        return out

    def snapshot(self) -> "TrainState":
        """Copy of the learnable pieces, for best-model bookkeeping."""
        return TrainState(
            model=self.model.copy(),
            corrector=self.corrector.copy(),
            margin_gen=self.margin_gen.copy(),
            momentum_buffers=[b.copy() for b in self.momentum_buffers],
            adam_m=[m.copy() for m in self.adam_m],
            adam_v=[v.copy() for v in self.adam_v],
            adam_t=self.adam_t,
            ranks=self.ranks,
            epoch=self.epoch,
        )


@dataclass
class TrainResult:
    final_state: TrainState
    best_state: TrainState
    best_epoch: int
    history: list[dict]
    tables: list[dict] = field(default_factory=list)


def cosine_lr(base: float, t: int, total: int) -> float:
    """Cosine annealing from base at t=0 to zero at t=total."""
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return base * 0.5 * (1.0 + np.cos(np.pi * t / total))


def init_state(data: LabeledDataset, config: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = init_mlp(
        data.dims, config.hidden, data.num_classes,
        seed=int(seeds[0].generate_state(1)[0]),
    )
    corrector = init_corrector(
        data.num_classes, config.rank_bins, hidden=config.corrector_hidden,
        seed=int(seeds[1].generate_state(1)[0]),
    )
    margin_gen = init_margin_generator(
        data.num_classes, seed=int(seeds[2].generate_state(1)[0]),
    )
    state = TrainState(
        model=model,
        corrector=corrector,
        margin_gen=margin_gen,
        momentum_buffers=[],
        adam_m=[],
        adam_v=[],
    )
    state.momentum_buffers = [np.zeros_like(p) for p in state.model_arrays()]
    state.adam_m = [np.zeros_like(p) for p in state.meta_arrays()]
    state.adam_v = [np.zeros_like(p) for p in state.meta_arrays()]
    return state


def _sgd_step(state: TrainState, grads: list[np.ndarray], lr: float,
              config: TrainConfig) -> None:
    for p, g, buf in zip(state.model_arrays(), grads, state.momentum_buffers):
        kernels.sgd_momentum_update(
            p, g, buf, lr, config.momentum, config.weight_decay
        )


def _adam_step(state: TrainState, grads: list[np.ndarray], lr: float) -> None:
    state.adam_t += 1
    for p, g, m, v in zip(state.meta_arrays(), grads, state.adam_m, state.adam_v):
        kernels.adam_update(
            p, g, m, v, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, state.adam_t
        )


def _predicted_targets(logits: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Detached classifier predictions used as the relabeling target."""
    if config.predicted_labels == "hard":
        return onehot(np.argmax(logits, axis=1), logits.shape[1])
    return kernels.softmax_rows(logits)


def _plain_ce_step(state: TrainState, x: np.ndarray, targets: np.ndarray,
                   lr: float, config: TrainConfig,
                   fixed_margins: np.ndarray | None = None) -> float:
    """One SGD step on (optionally margin-shifted) CE with constant targets."""
    omega = param_vars(state.model)
    logits = logits_var(omega, ad.constant(x))
    if fixed_margins is not None:
        logits = ad.add(logits, ad.bcast_rows(ad.constant(fixed_margins), x.shape[0]))
    loss = soft_cross_entropy_var(logits, targets)
    grads = [g.value for g in ad.grad(loss, omega)]
    _sgd_step(state, grads, lr, config)
    return loss.item()


def warmup_epoch(state: TrainState, data: LabeledDataset, config: TrainConfig,
                 rng: np.random.Generator, lr: float) -> float:
    """One pass of plain mini-batch CE against given labels; meta nets untouched."""
    order = rng.permutation(data.n)
    targets = onehot(data.given_labels, data.num_classes)
    total, batches = 0.0, 0
    for start in range(0, data.n, config.batch_size):
        idx = order[start:start + config.batch_size]
        total += _plain_ce_step(state, data.features[idx], targets[idx], lr, config)
        batches += 1
    return total / max(batches, 1)


def refresh_epoch(state: TrainState, data: LabeledDataset, config: TrainConfig,
                  rng: np.random.Generator) -> None:
    """Recompute the loss cache, rank bins, and meta/train split."""
    logits = forward(state.model, data.features)
    state.loss_cache = per_sample_cross_entropy(logits, data.given_labels)
    state.ranks = compute_rank_bins(
        state.loss_cache, data.given_labels, config.rank_bins, data.num_classes
    )
    if config.sampler == "naive":
        state.split = naive_sample(data, state.loss_cache, config.m1_frac)
    else:
        split_seed = int(rng.integers(np.iinfo(np.int64).max))
        state.split = hierarchical_sample(
            data, state.loss_cache, config.m0_frac, config.m1_frac, split_seed
        )


def adaptive_loss_graphs(
    state: TrainState,
    data: LabeledDataset,
    train_idx: np.ndarray,
    meta_idx: np.ndarray,
    config: TrainConfig,
) -> tuple[ad.Var, ad.Var, list[ad.Var], list[ad.Var]]:
    """Build the per-iteration objectives at the current parameters.

    Returns (train_loss, meta_loss, omega, theta): the adaptive training
    loss (corrected labels + margins) over the train batch, plain CE over
    the meta batch sharing the same classifier leaves, and both leaf lists.
    """
    if state.ranks is None:
        raise TrainingError("adaptive loss requires a refreshed epoch state")
    x_t = data.features[train_idx]
    y_t = onehot(data.given_labels[train_idx], data.num_classes)
    bins_t = state.ranks.bins[train_idx]
    x_m = data.features[meta_idx]
    y_m = onehot(data.given_labels[meta_idx], data.num_classes)

    omega = param_vars(state.model)
    logits_t = logits_var(omega, ad.constant(x_t))
    predicted = _predicted_targets(logits_t.value, config)
    corrector_in = state.corrector.inputs_for(y_t, bins_t)

    theta_l = state.corrector.param_vars()
    theta_m = state.margin_gen.param_vars()
    g = corrector_weights_var(theta_l, corrector_in)
    y_star = correct_labels_var(g, y_t, predicted)
    q = margins_var(theta_m, data.num_classes)
    train_loss = margin_softmax_loss_var(logits_t, q, y_star)

    meta_logits = logits_var(omega, ad.constant(x_m))
    meta_loss = soft_cross_entropy_var(meta_logits, y_m)
    return train_loss, meta_loss, omega, theta_l + theta_m


def meta_step(
    state: TrainState,
    data: LabeledDataset,
    train_idx: np.ndarray,
    meta_idx: np.ndarray,
    lr: float,
    config: TrainConfig,
) -> float:
    """Joint meta update of the adaptive loss plus one classifier step."""
    if train_idx.size == 0 or meta_idx.size == 0:
        raise TrainingError("empty train or meta batch")
    try:
        train_loss, meta_loss, omega, theta = adaptive_loss_graphs(
            state, data, train_idx, meta_idx, config
        )
        theta_grads = ad.meta_gradient(train_loss, meta_loss, omega, theta, alpha=lr)
        _adam_step(state, [g.value for g in theta_grads], config.meta_lr)

        # actual classifier step, re-deriving the loss under the updated
        # meta parameters (omega itself has not changed yet)
        train_loss2, _, omega2, _ = adaptive_loss_graphs(
            state, data, train_idx, meta_idx, config
        )
        grads = [g.value for g in ad.grad(train_loss2, omega2)]
        _sgd_step(state, grads, lr, config)
        return train_loss2.item()
    except ad.NonFiniteError as exc:
        raise TrainingError(
            f"non-finite loss at epoch {state.epoch}; "
            f"train batch {train_idx.tolist()}, meta batch {meta_idx.tolist()}"
        ) from exc


class _MetaBatchCycler:
    """Cycles through the meta set in shuffled order, reshuffling on wrap."""

    def __init__(self, meta_indices: np.ndarray, batch_size: int,
                 rng: np.random.Generator):
        self._indices = meta_indices
        self._size = min(batch_size, meta_indices.size)
        self._rng = rng
        self._queue = rng.permutation(meta_indices)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self._size > self._queue.size:
            self._queue = self._rng.permutation(self._indices)
            self._pos = 0
        out = self._queue[self._pos:self._pos + self._size]
        self._pos += self._size
        return out


def _gmm_relabel_epoch(state: TrainState, data: LabeledDataset,
                       config: TrainConfig, rng: np.random.Generator,
                       lr: float) -> float:
    """Baseline: mixture-split clean posteriors as per-sample mixing weights."""
    logits_all = forward(state.model, data.features)
    state.loss_cache = per_sample_cross_entropy(logits_all, data.given_labels)
    posterior = gmm_split(state.loss_cache, data.given_labels, data.num_classes)
    given = onehot(data.given_labels, data.num_classes)
    order = rng.permutation(data.n)
    total, batches = 0.0, 0
    for start in range(0, data.n, config.batch_size):
        idx = order[start:start + config.batch_size]
        x = data.features[idx]
        logits = forward(state.model, x)
        predicted = _predicted_targets(logits, config)
        w = posterior[idx].reshape(-1, 1)
        targets = given[idx] * w + predicted * (1.0 - w)
        total += _plain_ce_step(state, x, targets, lr, config)
        batches += 1
    return total / max(batches, 1)


def _dynamic_epoch(state: TrainState, data: LabeledDataset, config: TrainConfig,
                   rng: np.random.Generator, lr: float) -> float:
    refresh_epoch(state, data, config, rng)
    assert state.split is not None
    train_indices = state.split.train_indices
    if train_indices.size == 0:
        raise TrainingError("meta split left no training samples")
    cycler = _MetaBatchCycler(state.split.meta_indices, config.batch_size, rng)
    order = rng.permutation(train_indices)
    total, batches = 0.0, 0
    for start in range(0, order.size, config.batch_size):
        idx = order[start:start + config.batch_size]
        total += meta_step(state, data, idx, cycler.next_batch(), lr, config)
        batches += 1
    return total / max(batches, 1)


def _corrected_label_accuracy(state: TrainState, data: LabeledDataset,
                              config: TrainConfig) -> float | None:
    if data.true_labels is None or state.ranks is None:
        return None
    logits = forward(state.model, data.features)
    predicted = _predicted_targets(logits, config)
    given = onehot(data.given_labels, data.num_classes)
    corrected = correct_labels(state.corrector, given, predicted, state.ranks.bins)
    return float(np.mean(np.argmax(corrected, axis=1) == data.true_labels))


def _weight_table_digest(state: TrainState) -> str:
    table = state.corrector.weight_table()
    return hashlib.sha256(table.tobytes()).hexdigest()[:16]


def evaluate(model: MLP, holdout: LabeledDataset) -> tuple[float, list[float]]:
    """Argmax accuracy of raw logits (no margins) against true labels."""
    labels = holdout.true_labels if holdout.true_labels is not None else holdout.given_labels
    pred = np.argmax(forward(model, holdout.features), axis=1)
    overall = float(np.mean(pred == labels))
    per_class = []
    for c in range(holdout.num_classes):
        mask = labels == c
        per_class.append(float(np.mean(pred[mask] == c)) if mask.any() else 0.0)
    return overall, per_class


def train(
    data: LabeledDataset,
    config: TrainConfig,
    holdout: LabeledDataset | None = None,
    record_tables: bool = False,
) -> TrainResult:
    """Run the configured training loop; returns final and best-on-holdout states.

    With ``record_tables`` the full trust-weight grid and margin vector are
    captured once per epoch (result.tables) for curve plotting.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    state = init_state(data, config)
    fixed_margins = (
        balanced_softmax_margins(data.class_counts())
        if config.baseline == "balanced_softmax"
        else None
    )
    given_targets = onehot(data.given_labels, data.num_classes)

    tables: list[dict] = []
    best_epoch, best_acc, best_state = -1, -np.inf, None
    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = cosine_lr(config.lr, epoch, config.epochs)
        if epoch < config.warmup_epochs or config.baseline == "ce":
            order = rng.permutation(data.n)
            total, batches = 0.0, 0
            for start in range(0, data.n, config.batch_size):
                idx = order[start:start + config.batch_size]
                total += _plain_ce_step(
                    state, data.features[idx], given_targets[idx], lr, config
                )
                batches += 1
            train_loss = total / max(batches, 1)
        elif config.baseline == "balanced_softmax":
            order = rng.permutation(data.n)
            total, batches = 0.0, 0
            for start in range(0, data.n, config.batch_size):
                idx = order[start:start + config.batch_size]
                total += _plain_ce_step(
                    state, data.features[idx], given_targets[idx], lr, config,
                    fixed_margins=fixed_margins,
                )
                batches += 1
            train_loss = total / max(batches, 1)
        elif config.baseline == "gmm_relabel":
            train_loss = _gmm_relabel_epoch(state, data, config, rng, lr)
        else:
            train_loss = _dynamic_epoch(state, data, config, rng, lr)

        entry: dict = {"epoch": epoch, "lr": float(lr), "train_loss": float(train_loss)}
        if holdout is not None:
            acc, per_class = evaluate(state.model, holdout)
            entry["test_acc"] = acc
            entry["per_class_acc"] = per_class
            if acc > best_acc:
                best_acc, best_epoch, best_state = acc, epoch, state.snapshot()
        else:
            entry["test_acc"] = None
            entry["per_class_acc"] = None
        if config.baseline == "dynamic" and epoch >= config.warmup_epochs:
            entry["corrected_label_acc"] = _corrected_label_accuracy(state, data, config)
            entry["margins"] = [float(v) for v in state.margin_gen.margins().ravel()]
            entry["g_digest"] = _weight_table_digest(state)
        else:
            entry["corrected_label_acc"] = None
            entry["margins"] = (
                [float(v) for v in fixed_margins.ravel()]
                if fixed_margins is not None
                else None
            )
            entry["g_digest"] = None
        state.history.append(entry)
        if record_tables:
            tables.append({
                "epoch": epoch,
                "weight_table": state.corrector.weight_table().tolist(),
                "margins": [float(v) for v in state.margin_gen.margins().ravel()],
            })

    if best_state is None:
        best_epoch, best_state = config.epochs - 1, state.snapshot()
    return TrainResult(state, best_state, best_epoch, state.history, tables)
