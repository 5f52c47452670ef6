"""Two-hidden-layer perceptron classifier and its cross-entropy losses.

The model lives as plain numpy arrays. Training code obtains graph leaves
via :func:`param_vars` and builds logits with :func:`logits_var`; the plain
:func:`forward` runs the identical kernel sequence without recording, so
both paths produce bit-identical logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels


@dataclass
class MLP:
    weights: list[np.ndarray]   # per layer, (fan_in, fan_out)
    biases: list[np.ndarray]    # per layer, (1, fan_out)
    seed: int

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MLP":
        return MLP(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
        )


def init_mlp(in_dim: int, hidden: int, out_dim: int, seed: int) -> MLP:
    """Glorot-uniform weights, zero biases, two hidden rectifier layers."""
    rng = np.random.default_rng(seed)
    dims = [in_dim, hidden, hidden, out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros((1, fan_out)))
    return MLP(weights, biases, seed)


def param_vars(model: MLP) -> list[ad.Var]:
    """Graph leaves for the current parameter values, interleaved W0,b0,W1,..."""
    out: list[ad.Var] = []
    for w, b in zip(model.weights, model.biases):
        out.append(ad.parameter(w))
        out.append(ad.parameter(b))
    return out


def logits_var(params: list[ad.Var], x: ad.Var) -> ad.Var:
    """Forward graph: affine + rectifier per hidden layer, affine output."""
    h = x
    n_layers = len(params) // 2
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        h = ad.add(ad.matmul(h, w), b)
        if layer < n_layers - 1:
            h = ad.relu(h)
    return h


def forward(model: MLP, x: np.ndarray) -> np.ndarray:
    """Plain logits, same operation order as the graph version."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"expected (N, {model.weights[0].shape[0]}) inputs, got {x.shape}"
        )
    h = x
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if layer < len(model.weights) - 1:
            h = kernels.relu(h)
    return h


def predict_proba(model: MLP, x: np.ndarray) -> np.ndarray:
    return kernels.softmax_rows(forward(model, x))


def _check_targets(targets: np.ndarray) -> None:
    if targets.min(initial=0.0) < 0 or np.abs(targets.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("each target row must be a probability vector")


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over rows of -sum_c target_c * log softmax(logits)_c."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {targets.shape}")
    _check_targets(targets)
    logp = logits - kernels.row_logsumexp(logits)
    return float(-np.sum(targets * logp) / logits.shape[0])


def soft_cross_entropy_var(logits: ad.Var, targets: ad.Var | np.ndarray) -> ad.Var:
    """Graph soft cross-entropy; targets may themselves be differentiable."""
    if isinstance(targets, np.ndarray):
        _check_targets(targets)
        targets = ad.constant(targets)
    logp = logits - ad.bcast_cols(ad.logsumexp_rows(logits), logits.shape[1])
    return ad.scale(ad.sum_all(ad.mul(targets, logp)), -1.0 / logits.shape[0])


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Plain CE of each row against its integer label (the epoch loss cache)."""
    logp = logits - kernels.row_logsumexp(logits)
    return -logp[np.arange(logits.shape[0]), labels]


# --- checkpointing -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def model_to_dict(model: MLP) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "layer_dims": model.layer_dims,
        "seed": model.seed,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(payload: dict) -> MLP:
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    weights = [np.array(w, dtype=np.float64) for w in payload["weights"]]
    biases = [np.array(b, dtype=np.float64) for b in payload["biases"]]
    model = MLP(weights, biases, int(payload["seed"]))
    if model.layer_dims != list(payload["layer_dims"]):
        raise ValueError("checkpoint layer dims do not match stored arrays")
    return model


def save_model(model: MLP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> MLP:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
