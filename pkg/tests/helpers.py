"""Standalone numeric oracles used by the tests.

These are deliberately independent of the package internals: a one-sided
Jacobi SVD, a dense-attention reference, and small dataclass builders.
"""

import math

import numpy as np


def jacobi_singular_values(m: np.ndarray, sweeps: int = 60, tol: float = 1e-12) -> np.ndarray:
    """Singular values via one-sided Jacobi rotations on column pairs."""
    a = np.array(m, dtype=np.float64)
    if a.shape[0] < a.shape[1]:
        a = a.T
    n = a.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p].copy(), a[:, q].copy()
                app, aqq, apq = ap @ ap, aq @ aq, ap @ aq
                if app * aqq > 0:
                    off = max(off, abs(apq) / math.sqrt(app * aqq))
                if abs(apq) < tol:
                    continue
                tau = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
        if off < tol:
            break
    sv = np.sqrt((a * a).sum(axis=0))
    return np.sort(sv)[::-1]


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Naive O(N^2) softmax attention for one head, no masking."""
    logits = q @ k.T
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v
