"""Shared oracles for the test suite: finite differences and tolerance checks."""

from __future__ import annotations

import numpy as np

from chunkcast.tensor import Tape, Tensor, backward


def finite_difference(build, leaves, eps: float = 1e-3):
    """Central finite-difference gradients of a scalar function.

    `build()` re-runs the forward pass reading the current contents of the
    leaf tensors and returns a scalar Tensor. Leaves must be float64 for the
    stated tolerances to hold.
    """
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = build().item()
            flat[i] = orig - eps
            minus = build().item()
            flat[i] = orig
            g[i] = (plus - minus) / (2.0 * eps)
        grads.append(g.reshape(leaf.data.shape))
    return grads


def analytic_gradients(build, leaves):
    """Tape-recorded gradients of the same scalar function."""
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = build()
        backward(loss, tape)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def assert_grads_close(build, leaves, rtol: float = 1e-4, eps: float = 1e-3):
    ana = analytic_gradients(build, leaves)
    num = finite_difference(build, leaves, eps=eps)
    for got, want in zip(ana, num):
        assert_rel_close(got, want, rtol)


def assert_rel_close(got, want, rtol: float = 1e-4):
    """Max relative error with a scale-aware floor on the denominator."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    assert got.shape == want.shape, f"shape {got.shape} != {want.shape}"
    scale = max(float(np.max(np.abs(want)), ), 1e-8)
    denom = np.maximum(np.abs(want), 1e-2 * scale)
    rel = np.max(np.abs(got - want) / denom)
    assert rel < rtol, f"relative error {rel:.3e} >= {rtol:.1e}"
