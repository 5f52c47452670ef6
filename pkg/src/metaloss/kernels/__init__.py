"""Numeric kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``_native``, built from Cython) is preferred when
importable; otherwise the numpy implementation is used. Set
``METALOSS_PURE_PYTHON=1`` to force the fallback, e.g. for benchmarking or
debugging. ``BACKEND`` names the backend actually in use.
"""

from __future__ import annotations

import os

if os.environ.get("METALOSS_PURE_PYTHON"):
    from . import _numpy as _impl
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _numpy as _impl  # type: ignore[no-redef]

BACKEND: str = _impl.NAME

relu = _impl.relu
step = _impl.step
logistic = _impl.logistic
row_logsumexp = _impl.row_logsumexp
softmax_rows = _impl.softmax_rows
sgd_momentum_update = _impl.sgd_momentum_update
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "relu",
    "step",
    "logistic",
    "row_logsumexp",
    "softmax_rows",
    "sgd_momentum_update",
    "adam_update",
]
