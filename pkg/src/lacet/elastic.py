"""Elastic consolidation of the fast-weight trajectory.

After each chunk update the fast weights are softly pulled back toward an
anchor state, weighted by a running per-parameter importance estimate.
Importance is an EMA over update statistics (three estimator variants);
the anchor follows one of three policies. Setting the consolidation
strength to zero recovers the plain chunked test-time-training update
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fastweight import ChunkBatch, FastWeights, apply_update, fw_map, fw_zeros_like, pseudo_grad
from .tape import Tensor, absolute, tmean

ESTIMATORS = ("mas", "ewc", "si")
POLICIES = ("global", "streaming", "streaming_ema")


@dataclass(frozen=True)
class ElasticState:
    """Per-sequence consolidation state.

    anchor: reference weights the consolidation pulls toward.
    importance: non-negative per-parameter drift cost, EMA-updated.
    alpha: importance EMA decay in [0,1); beta: anchor EMA decay in [0,1];
    lam: consolidation strength >= 0.
    """

    anchor: FastWeights
    importance: FastWeights
    estimator: str = "si"
    policy: str = "streaming_ema"
    alpha: float = 0.5
    beta: float = 0.5
    lam: float = 0.5

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0,1)")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0,1]")
        if self.lam < 0.0:
            raise ValueError("lam must be non-negative")


def fresh_state(theta0: FastWeights, estimator: str = "si",
                policy: str = "streaming_ema", alpha: float = 0.5,
                beta: float = 0.5, lam: float = 0.5) -> ElasticState:
    """State at sequence start: anchor at the initial weights, importance zero."""
    return ElasticState(anchor=theta0, importance=fw_zeros_like(theta0),
                        estimator=estimator, policy=policy,
                        alpha=alpha, beta=beta, lam=lam)


def importance_statistic(theta_before: FastWeights, theta_after: FastWeights,
                         anchor: FastWeights, estimator: str) -> FastWeights:
    """Elementwise update statistic phi(S) for one chunk.

    S is the raw update for mas/ewc and the update times the anchor-relative
    drift for si; phi is |S| for mas/si and S^2 for ewc.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")

    def stat(before: Tensor, after: Tensor, anc: Tensor) -> Tensor:
        step = after - before
        if estimator == "si":
            s = step * (after - anc)
        else:
            s = step
        if estimator == "ewc":
            return s * s
        return absolute(s)

    return fw_map(stat, theta_before, theta_after, anchor)


def update_importance(imp: Tensor, phi: Tensor, alpha: float) -> Tensor:
    """EMA of the importance: alpha * imp + (1 - alpha) * phi.

    A statistic with a leading batch axis is averaged over it first.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0,1)")
    if phi.ndim == imp.ndim + 1:
        phi = tmean(phi, axis=0)
    return alpha * imp + (1.0 - alpha) * phi


def consolidate(theta_updated: FastWeights, anchor: FastWeights,
                imp: FastWeights, lam: float) -> FastWeights:
    """Pull important parameters back toward their anchors."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    return fw_map(lambda w, a, f: w - lam * f * (w - a),
                  theta_updated, anchor, imp)


def update_anchor(anchor: FastWeights, theta: FastWeights, policy: str,
                  beta: float) -> FastWeights:
    """global: keep; streaming: jump to theta; streaming_ema: low-pass."""
    if policy == "global":
        return anchor
    if policy == "streaming":
        return theta
    if policy == "streaming_ema":
        return fw_map(lambda a, t: beta * a + (1.0 - beta) * t, anchor, theta)
    raise ValueError(f"unknown policy {policy!r}")


def advance_with_delta(theta: FastWeights, state: ElasticState, delta: FastWeights,
                       use_muon: bool = False, ns_iters: int = 5
                       ) -> tuple[FastWeights, ElasticState]:
    """Advance one chunk given a precomputed update direction: apply,
    measure, consolidate with the pre-chunk importance, then advance
    importance and anchor."""
    theta_updated = apply_update(theta, delta, use_muon, ns_iters)
    phi = importance_statistic(theta, theta_updated, state.anchor, state.estimator)
    theta_next = consolidate(theta_updated, state.anchor, state.importance, state.lam)
    imp_next = fw_map(lambda f, p: update_importance(f, p, state.alpha),
                      state.importance, phi)
    anchor_next = update_anchor(state.anchor, theta_next, state.policy, state.beta)
    return theta_next, replace(state, anchor=anchor_next, importance=imp_next)


def chunk_step(theta: FastWeights, state: ElasticState, c: ChunkBatch,
               use_muon: bool = False, ns_iters: int = 5
               ) -> tuple[FastWeights, ElasticState]:
    """One chunk of the elastic trajectory."""
    return advance_with_delta(theta, state, pseudo_grad(theta, c), use_muon, ns_iters)


def plain_chunk_step(theta: FastWeights, c: ChunkBatch,
                     use_muon: bool = False, ns_iters: int = 5) -> FastWeights:
    """The consolidation-free chunk update (the baseline trajectory)."""
    return apply_update(theta, pseudo_grad(theta, c), use_muon, ns_iters)


def batched_pseudo_grad(theta: FastWeights, chunks: list[ChunkBatch]) -> FastWeights:
    """Average of per-example pseudo-gradients for batched inference."""
    if not chunks:
        raise ValueError("empty batch")
    deltas = [pseudo_grad(theta, c) for c in chunks]
    inv = 1.0 / len(chunks)
    acc = deltas[0]
    for d in deltas[1:]:
        acc = fw_map(lambda a, b: a + b, acc, d)
    return fw_map(lambda a: a * inv, acc)
