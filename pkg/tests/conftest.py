"""Shared reference implementations (oracles) for the test suite.

Everything here is deliberately naive: explicit loops and direct formula
transcriptions that are easy to audit, used to cross-check the vectorized
library code.
"""

import numpy as np
import pytest


def naive_depthwise_conv(x, weight, bias):
    """Direct 6-loop depthwise cross-correlation with same-size zero padding."""
    b, c, h, w = x.shape
    k = weight.shape[-1]
    pad = k // 2
    out = np.zeros_like(x)
    for bi in range(b):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            ii, jj = i + u - pad, j + v - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += weight[ci, 0, u, v] * x[bi, ci, ii, jj]
                    out[bi, ci, i, j] = acc + bias[ci]
    return out


def naive_softmax_attention_core(q, k, v):
    """Per-element double-loop scaled-dot-product attention for one head.

    q, k, v: [N, d]. Returns [N, d]. Transcribes the row-normalized
    exp(q_i . k_j / sqrt(d)) weighting directly.
    """
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        sims = np.array([np.exp(q[i] @ k[j] / np.sqrt(d)) for j in range(n)])
        weights = sims / sims.sum()
        for j in range(n):
            out[i] += weights[j] * v[j]
    return out


def naive_linear_attention_core(q, k, v, z_eps):
    """Explicit-similarity linear attention for one head, stabilized like the
    production path: denominator = sum_j sim_ij + N * z_eps, with magnitudes
    clamped to at least N * z_eps."""
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        sims = np.array([q[i] @ k[j] for j in range(n)])
        den = sims.sum() + n * z_eps
        if abs(den) < n * z_eps:
            den = n * z_eps if den >= 0 else -n * z_eps
        for j in range(n):
            out[i] += sims[j] / den * v[j]
    return out


def rel_err(a, b):
    """Array-level relative disagreement."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
