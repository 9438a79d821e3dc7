"""The SwiGLU fast-weight network and its chunkwise update machinery.

The fast weights are three bias-free matrices updated in the forward pass
from key-value statistics of each chunk. Everything here is built from
taped primitives, so the pseudo-gradient is itself differentiable with
respect to whatever produced the keys, values and rates (needed to train
the slow weights through the in-forward update).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape
from .tape import Tensor, matmul, reshape, sigmoid, silu, softplus, sqrt, transpose, tsum

NORM_EPS = 1e-12

# Quintic Newton-Schulz coefficients, standard Muon constants.
_NS_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass(frozen=True)
class FastWeights:
    """Per-sequence adaptable parameters: w1 (h,d), w2 (d,h), w3 (h,d)."""

    w1: Tensor
    w2: Tensor
    w3: Tensor

    def __post_init__(self):
        h, d = self.w1.shape
        if self.w2.shape != (d, h) or self.w3.shape != (h, d):
            raise ValueError(
                f"inconsistent fast-weight shapes {self.w1.shape} {self.w2.shape} {self.w3.shape}")

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1.data, self.w2.data, self.w3.data


def fw_map(fn: Callable[..., Tensor], *fws: FastWeights) -> FastWeights:
    """Apply fn across corresponding matrices of one or more triples."""
    return FastWeights(fn(*(f.w1 for f in fws)),
                       fn(*(f.w2 for f in fws)),
                       fn(*(f.w3 for f in fws)))


def fw_zeros_like(fw: FastWeights) -> FastWeights:
    return fw_map(lambda w: Tensor(np.zeros_like(w.data)), fw)


@dataclass(frozen=True)
class ChunkBatch:
    """Keys (b,d), values (b,d) and non-negative per-token rates (b,)."""

    keys: Tensor
    values: Tensor
    rates: Tensor

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ValueError("keys and values must share shape")
        if self.rates.shape != (self.keys.shape[0],):
            raise ValueError("rates must be one scalar per token")
        if np.any(self.rates.data < 0):
            raise ValueError("rates must be non-negative")

    @property
    def size(self) -> int:
        return self.keys.shape[0]


def forward_f(theta: FastWeights, k: Tensor) -> Tensor:
    """w2 @ (SiLU(w1 k) * (w3 k)); accepts a single key (d,) or a batch (b,d)."""
    single = k.ndim == 1
    kk = reshape(k, (1, -1)) if single else k
    hidden = silu(matmul(kk, transpose(theta.w1))) * matmul(kk, transpose(theta.w3))
    out = matmul(hidden, transpose(theta.w2))
    return reshape(out, (-1,)) if single else out


def chunk_loss(theta: FastWeights, c: ChunkBatch) -> Tensor:
    """Rate-weighted negative dot product between f(k_i) and v_i, summed."""
    f = forward_f(theta, c.keys)
    per_token = tsum(f * c.values, axis=1)
    return -tsum(c.rates * per_token)


def _silu_prime(a: Tensor) -> Tensor:
    s = sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def pseudo_grad(theta: FastWeights, c: ChunkBatch) -> FastWeights:
    """Exact gradient of chunk_loss w.r.t. the fast weights, in closed form.

    Built from taped primitives so it stays differentiable upstream.
    """
    k, v = c.keys, c.values
    eta = reshape(c.rates, (-1, 1))
    a = matmul(k, transpose(theta.w1))        # (b,h)
    bt = matmul(k, transpose(theta.w3))       # (b,h)
    s = silu(a)
    hidden = s * bt
    g = -matmul(v, theta.w2)                  # (b,h) rows are -w2^T v_i
    d_w2 = -matmul(transpose(eta * v), hidden)
    d_w1 = matmul(transpose(eta * g * bt * _silu_prime(a)), k)
    d_w3 = matmul(transpose(eta * g * s), k)
    return FastWeights(d_w1, d_w2, d_w3)


def normalize_rows(w: Tensor) -> Tensor:
    """Unit L2 norm along the input dimension (last axis), eps-guarded."""
    return w / sqrt(tsum(w * w, axis=-1, keepdims=True) + NORM_EPS)


def newton_schulz(m: Tensor, iters: int = 5) -> Tensor:
    """Odd-polynomial iteration driving singular values toward one.

    The input is rescaled internally to Frobenius norm <= 1; with
    iters=0 the rescaled matrix is returned unchanged. The final
    iteration uses the monotone cubic map, which contracts the quintic's
    oscillation band to well inside [0.7, 1.3] for full-rank inputs whose
    normalized singular values are not vanishingly small.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    tall = m.shape[0] > m.shape[1]
    x = transpose(m) if tall else m
    fro = sqrt(tsum(x * x)) + 1e-7
    x = x / fro
    a, b, c = _NS_COEFFS
    for i in range(iters):
        xxt = matmul(x, transpose(x))
        if i == iters - 1:
            x = 1.5 * x - 0.5 * matmul(xxt, x)
        else:
            x = a * x + matmul(b * xxt + c * matmul(xxt, xxt), x)
    return transpose(x) if tall else x


def apply_update(theta: FastWeights, delta: FastWeights,
                 use_muon: bool = False, ns_iters: int = 5) -> FastWeights:
    """Subtract the update and renormalize every row along the input dim."""
    if use_muon:
        delta = fw_map(lambda w: newton_schulz(w, ns_iters), delta)
    return fw_map(lambda w, d: normalize_rows(w - d), theta, delta)


def per_token_lr(token_embedding: Tensor, lr_head: Tensor, base_lr: float) -> Tensor:
    """base_lr * softplus(lr_head . embedding); strictly positive.

    A 1-D embedding yields a scalar; a (n,D) batch yields an (n,) vector.
    """
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    return base_lr * softplus(matmul(token_embedding, lr_head))
