"""Shared test helpers: finite-difference oracles and tolerance checks."""

from __future__ import annotations

import numpy as np
import pytest


def finite_difference(f, arrays, h=1e-6):
    """Central finite differences of the scalar f() with respect to every
    entry of the given arrays, which are perturbed in place and restored.

    ``f`` must recompute the objective from the arrays' current contents on
    every call, so this oracle only exercises forward evaluations.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            orig = arr[ij]
            arr[ij] = orig + h
            fp = f()
            arr[ij] = orig - h
            fm = f()
            arr[ij] = orig
            g[ij] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol, atol=1e-9):
    """Relative-error check with a small absolute floor that absorbs the
    finite-difference roundoff on (near-)zero entries."""
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
