"""Sequence blocks: windowed attention, the fast-weight memory layer,
and the feed-forward, wired with pre-norm residuals.

Information flows between views only through the fast-weight memory:
window attention mixes tokens locally (input frames may share a window,
every target frame is its own window), and only input tokens feed the
memory updates. Target tokens therefore never influence input tokens or
each other, which is what makes per-view decoding exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .elastic import ElasticState, advance_with_delta, batched_pseudo_grad, chunk_step
from .fastweight import ChunkBatch, FastWeights, forward_f, per_token_lr
from .tape import Tensor, concat, l2_normalize, layer_norm, matmul, reshape, silu, softmax, transpose


@dataclass(frozen=True)
class ChunkSchedule:
    """Chunk boundaries as half-open index pairs over the input tokens."""

    chunk_size: int
    boundaries: tuple[tuple[int, int], ...]

    @property
    def n_tokens(self) -> int:
        return self.boundaries[-1][1] if self.boundaries else 0


def make_schedule(n_input_tokens: int, size: int | None = None,
                  count: int | None = None) -> ChunkSchedule:
    """Fixed chunk size (last chunk may be smaller) or fixed chunk count
    (equal split, remainder spread over the first chunks)."""
    if n_input_tokens < 1:
        raise ValueError("need at least one input token")
    if (size is None) == (count is None):
        raise ValueError("give exactly one of size or count")
    bounds = []
    if size is not None:
        if size < 1:
            raise ValueError("chunk size must be positive")
        pos = 0
        while pos < n_input_tokens:
            nxt = min(pos + size, n_input_tokens)
            bounds.append((pos, nxt))
            pos = nxt
    else:
        if count < 1:
            raise ValueError("chunk count must be positive")
        if count > n_input_tokens:
            raise ValueError("more chunks than tokens")
        base, rem = divmod(n_input_tokens, count)
        pos = 0
        for i in range(count):
            step = base + (1 if i < rem else 0)
            bounds.append((pos, pos + step))
            pos += step
    return ChunkSchedule(chunk_size=max(b - a for a, b in bounds),
                         boundaries=tuple(bounds))


@dataclass
class TokenSequence:
    """Embedded tokens plus per-token role, frame id and chunk assignment."""

    embeddings: Tensor  # (N, D)
    roles: np.ndarray  # (N,) 0 = input, 1 = target
    frame_index: np.ndarray  # (N,)
    chunk_id: np.ndarray  # (N,), -1 on target tokens

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not (len(self.roles) == len(self.frame_index) == len(self.chunk_id) == n):
            raise ValueError("per-token metadata length mismatch")
        cid = self.chunk_id[self.roles == 0]
        if len(cid) and (np.any(cid < 0) or np.any(np.diff(cid) < 0)):
            raise ValueError("input chunk ids must be assigned and ordered")
        if np.any(self.chunk_id[self.roles == 1] != -1):
            raise ValueError("target tokens carry no chunk id")

    def with_embeddings(self, emb: Tensor) -> "TokenSequence":
        return TokenSequence(emb, self.roles, self.frame_index, self.chunk_id)

    @property
    def input_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == 0)

    @property
    def target_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == 1)


def assign_chunks(roles: np.ndarray, schedule: ChunkSchedule) -> np.ndarray:
    """Chunk id per token (-1 for targets) from a schedule over inputs."""
    n_inputs = int((roles == 0).sum())
    if schedule.n_tokens != n_inputs:
        raise ValueError("schedule does not cover the input tokens")
    per_input = np.empty(n_inputs, dtype=np.int64)
    for i, (a, b) in enumerate(schedule.boundaries):
        per_input[a:b] = i
    out = np.full(len(roles), -1, dtype=np.int64)
    out[roles == 0] = per_input
    return out


@dataclass
class BlockParams:
    """Slow weights of one block."""

    ln_attn_gain: Tensor
    ln_attn_bias: Tensor
    ln_ttt_gain: Tensor
    ln_ttt_bias: Tensor
    ln_ffn_gain: Tensor
    ln_ffn_bias: Tensor
    attn_wq: Tensor  # (D, A)
    attn_wk: Tensor
    attn_wv: Tensor
    attn_wo: Tensor  # (A, D)
    attn_qgain: Tensor  # (heads,)
    attn_kgain: Tensor
    ttt_wq: Tensor  # (D, d)
    ttt_wk: Tensor
    ttt_wv: Tensor
    ttt_wo: Tensor  # (d, D)
    lr_head: Tensor  # (D,)
    fw0: FastWeights
    ffn_win: Tensor  # (D, 2f)
    ffn_wout: Tensor  # (f, D)
    n_heads: int
    head_dim: int
    window_tokens: int
    base_lr: float
    use_muon: bool = False
    ns_iters: int = 5

    def __post_init__(self):
        if self.attn_wq.shape[1] != self.n_heads * self.head_dim:
            raise ValueError("head count times head width must equal attention width")


def window_groups(roles: np.ndarray, frame_index: np.ndarray,
                  window_tokens: int) -> list[tuple[int, int]]:
    """Contiguous attention groups. Consecutive input frames merge while
    the group stays within the token budget; each target frame stands
    alone so views never interact."""
    if window_tokens < 1:
        raise ValueError("window must be at least one token")
    # frame runs must be contiguous
    runs: list[tuple[int, int, int]] = []  # (start, stop, role)
    start = 0
    for i in range(1, len(roles) + 1):
        if i == len(roles) or roles[i] != roles[start] or frame_index[i] != frame_index[start]:
            runs.append((start, i, int(roles[start])))
            start = i
    seen = set()
    for a, _, _ in runs:
        key = (int(roles[a]), int(frame_index[a]))
        if key in seen:
            raise ValueError("tokens of one frame must be contiguous")
        seen.add(key)

    groups: list[tuple[int, int]] = []
    cur: tuple[int, int] | None = None
    for a, b, role in runs:
        if role == 1:
            if cur is not None:
                groups.append(cur)
                cur = None
            groups.append((a, b))
        elif cur is None:
            cur = (a, b)
        elif (b - cur[0]) <= window_tokens:
            cur = (cur[0], b)
        else:
            groups.append(cur)
            cur = (a, b)
    if cur is not None:
        groups.append(cur)
    return groups


def window_attention(tokens: TokenSequence, params: BlockParams,
                     window: int | None = None) -> Tensor:
    """Multi-head attention restricted to frame-aligned windows, with
    per-head L2 query/key normalization scaled by learned gains."""
    x = tokens.embeddings
    n, _ = x.shape
    heads, hd = params.n_heads, params.head_dim
    window = params.window_tokens if window is None else window

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, heads, hd)), (1, 0, 2))

    q = split_heads(matmul(x, params.attn_wq))
    k = split_heads(matmul(x, params.attn_wk))
    v = split_heads(matmul(x, params.attn_wv))
    qg = reshape(params.attn_qgain, (heads, 1, 1))
    kg = reshape(params.attn_kgain, (heads, 1, 1))
    q = l2_normalize(q) * qg
    k = l2_normalize(k) * kg

    outs = []
    for a, b in window_groups(tokens.roles, tokens.frame_index, window):
        sl = (slice(None), slice(a, b))
        logits = matmul(q[sl], transpose(k[sl], (0, 2, 1)))
        ctx = matmul(softmax(logits, axis=-1), v[sl])  # (heads, g, hd)
        outs.append(reshape(transpose(ctx, (1, 0, 2)), (b - a, heads * hd)))
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=0)
    return matmul(merged, params.attn_wo)


def project_qkv(tokens: TokenSequence, params: BlockParams
                ) -> tuple[Tensor, Tensor, Tensor]:
    """Memory-layer projections: unit-norm queries for every token,
    unit-norm keys and raw values for input tokens only."""
    x = tokens.embeddings
    q = l2_normalize(matmul(x, params.ttt_wq))
    xi = x[tokens.input_positions]
    k = l2_normalize(matmul(xi, params.ttt_wk))
    v = matmul(xi, params.ttt_wv)
    return q, k, v


def ttt_layer(tokens: TokenSequence, params: BlockParams,
              schedule: ChunkSchedule, elastic: ElasticState) -> Tensor:
    """Chunked fast-weight memory: update on each chunk's keys/values,
    read that chunk's queries with the post-step weights, read target
    queries with the final weights."""
    in_pos = tokens.input_positions
    tgt_pos = tokens.target_positions
    if schedule.n_tokens != len(in_pos):
        raise ValueError("schedule does not cover the input tokens")

    q, k, v = project_qkv(tokens, params)
    eta = per_token_lr(tokens.embeddings[in_pos], params.lr_head, params.base_lr)

    theta = params.fw0
    state = elastic
    reads = []
    q_in = q[in_pos]
    for a, b in schedule.boundaries:
        batch = ChunkBatch(k[a:b], v[a:b], eta[a:b])
        theta, state = chunk_step(theta, state, batch,
                                  params.use_muon, params.ns_iters)
        reads.append(forward_f(theta, q_in[a:b]))
    if len(tgt_pos):
        reads.append(forward_f(theta, q[tgt_pos]))

    stacked = reads[0] if len(reads) == 1 else concat(reads, axis=0)
    order = np.concatenate([in_pos, tgt_pos])
    if not np.array_equal(order, np.arange(len(order))):
        stacked = stacked[np.argsort(order)]
    return matmul(stacked, params.ttt_wo)


def feed_forward(x: Tensor, params: BlockParams) -> Tensor:
    u = matmul(x, params.ffn_win)
    f = params.ffn_wout.shape[0]
    return matmul(silu(u[:, :f]) * u[:, f:], params.ffn_wout)


def block_forward(tokens: TokenSequence, params: BlockParams,
                  schedule: ChunkSchedule, elastic: ElasticState) -> TokenSequence:
    """Pre-norm residual wiring: attention, memory, feed-forward."""
    x = tokens.embeddings
    h = layer_norm(x, params.ln_attn_gain, params.ln_attn_bias)
    x = x + window_attention(tokens.with_embeddings(h), params)
    h = layer_norm(x, params.ln_ttt_gain, params.ln_ttt_bias)
    x = x + ttt_layer(tokens.with_embeddings(h), params, schedule, elastic)
    h = layer_norm(x, params.ln_ffn_gain, params.ln_ffn_bias)
    x = x + feed_forward(h, params)
    return tokens.with_embeddings(x)


def backbone_forward(tokens: TokenSequence, layer_stack: list[BlockParams],
                     schedule: ChunkSchedule,
                     elastic_per_layer: list[ElasticState]) -> TokenSequence:
    """Sequential blocks, each with its own fast weights and elastic state."""
    if len(layer_stack) != len(elastic_per_layer):
        raise ValueError("one elastic state per layer")
    for params, state in zip(layer_stack, elastic_per_layer):
        tokens = block_forward(tokens, params, schedule, state)
    return tokens


def batched_update(theta: FastWeights, state: ElasticState,
                   chunks: list[ChunkBatch], use_muon: bool = False,
                   ns_iters: int = 5) -> tuple[FastWeights, ElasticState]:
    """Batched inference semantics: per-example pseudo-gradients averaged,
    one step applied to the shared state."""
    delta = batched_pseudo_grad(theta, chunks)
    return advance_with_delta(theta, state, delta, use_muon, ns_iters)
