"""Pure-numpy implementations of the hot aggregation and distance kernels.

Semantics must match biloop.kernels._core exactly (same formulas, float64);
the compiled module is only a faster evaluation of the same arithmetic.
"""

from __future__ import annotations

import numpy as np


def vlad_aggregate_soft(
    x: np.ndarray, centers: np.ndarray, weights: np.ndarray, biases: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Soft-assignment residual aggregation.

    Returns (v, a) where a[i, k] is the softmax assignment of descriptor i to
    cluster k (max-subtracted for stability) and
    v[k, j] = sum_i a[i, k] * (x[i, j] - centers[k, j]).
    """
    logits = x @ weights.T + biases[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    v = a.T @ x - a.sum(axis=0)[:, None] * centers
    return v, a


def vlad_aggregate_soft_backward(
    x: np.ndarray,
    centers: np.ndarray,
    weights: np.ndarray,
    a: np.ndarray,
    g_v: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the soft aggregation given upstream g_v = dL/dv.

    Returns (g_x, g_centers, g_weights, g_biases).
    """
    g_a = x @ g_v.T - np.einsum("kj,kj->k", g_v, centers)[None, :]
    inner = (a * g_a).sum(axis=1, keepdims=True)
    g_logits = a * (g_a - inner)
    g_x = a @ g_v + g_logits @ weights
    g_c = -a.sum(axis=0)[:, None] * g_v
    g_w = g_logits.T @ x
    g_b = g_logits.sum(axis=0)
    return g_x, g_c, g_w, g_b


def vlad_aggregate_hard(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centre residual aggregation; ties break toward the lowest index."""
    d2 = pairwise_sqdist(x, centers)
    assign = d2.argmin(axis=1)
    k, d = centers.shape
    v = np.zeros((k, d))
    np.add.at(v, assign, x - centers[assign])
    return v, assign.astype(np.int32)


def pairwise_sqdist(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Squared Euclidean distances, accumulated per pair (no expansion trick)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], chunk):
        stop = min(start + chunk, a.shape[0])
        diff = a[start:stop, None, :] - b[None, :, :]
        out[start:stop] = np.einsum("mnd,mnd->mn", diff, diff)
    return out
