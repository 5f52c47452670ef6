"""Robust classifier training on long-tailed, label-noisy data.

The toolkit trains a small perceptron classifier under an adaptive loss:
a meta-learned label corrector mixes given labels with classifier
predictions per loss-rank bin, and a meta-learned margin generator shifts
per-class logits. Both are optimized by one-step-lookahead meta-gradients
against a balanced clean meta set rebuilt each epoch by hierarchical
sampling. Synthetic bias generators, reference baselines and reporting
tools round out the package.
"""

__version__ = "0.1.0"

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
