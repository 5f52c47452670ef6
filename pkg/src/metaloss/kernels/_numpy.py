"""Pure-numpy kernel backend.

Reference semantics for the compiled backend in ``_native.pyx``: every
function here must accept C-contiguous float64 arrays and agree with the
compiled version to floating-point roundoff.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def step(x: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(np.float64)


def logistic(x: np.ndarray) -> np.ndarray:
    # exp may overflow for very negative inputs; 1/(1+inf) == 0 is the
    # correct limit, so the overflow warning is suppressed rather than fixed.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def row_logsumexp(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    return np.log(np.sum(np.exp(x - m), axis=1, keepdims=True)) + m


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def sgd_momentum_update(
    param: np.ndarray,
    grad: np.ndarray,
    buf: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place SGD with momentum: buf = m*buf + (g + wd*p); p -= lr*buf."""
    g = grad + weight_decay * param
    buf *= momentum
    buf += g
    param -= lr * buf


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> None:
    """In-place Adam step with bias correction; t is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
