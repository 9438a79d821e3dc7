"""Model assembly: tokenizer embedding, block stack, decoder head, and the
episode forward pass that ties scene conditioning to the backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    BlockParams,
    ChunkSchedule,
    TokenSequence,
    assign_chunks,
    backbone_forward,
    make_schedule,
)
from .config import RunConfig
from .elastic import ElasticState, fresh_state
from .fastweight import FastWeights
from .rendering import DecoderHead, decode_tokens, get_perceptual, photometric_loss
from .sceneio import assemble_features, build_target_query, patchify, pluecker_map, rope_time, unpatchify
from .scenes import Episode
from .tape import Tensor, concat, constant, reshape, tmean, transpose


@dataclass
class Model:
    cfg: RunConfig
    embed: Tensor  # (10 p^2, D)
    blocks: list[BlockParams]
    head: DecoderHead

    @property
    def tokens_per_frame(self) -> int:
        s, p = self.cfg.image_size, self.cfg.patch
        return (s // p) * (s // p)


def _normal(rng, shape, scale) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale)


def _init_fast_weights(rng, d: int, h: int) -> FastWeights:
    def rows(shape):
        w = rng.normal(size=shape)
        return Tensor(w / np.sqrt((w ** 2).sum(-1, keepdims=True)))

    return FastWeights(rows((h, d)), rows((d, h)), rows((h, d)))


def init_model(cfg: RunConfig, rng: np.random.Generator | None = None) -> Model:
    """Fresh slow weights; residual output projections are scaled down by
    sqrt(2L) so a deep stack starts near the identity."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    d_model = cfg.dim
    attn_width = cfg.attn_heads * cfg.head_dim
    res = 1.0 / np.sqrt(2.0 * max(cfg.blocks, 1))

    blocks = []
    for _ in range(cfg.blocks):
        blocks.append(BlockParams(
            ln_attn_gain=Tensor(np.ones(d_model)), ln_attn_bias=Tensor(np.zeros(d_model)),
            ln_ttt_gain=Tensor(np.ones(d_model)), ln_ttt_bias=Tensor(np.zeros(d_model)),
            ln_ffn_gain=Tensor(np.ones(d_model)), ln_ffn_bias=Tensor(np.zeros(d_model)),
            attn_wq=_normal(rng, (d_model, attn_width), d_model ** -0.5),
            attn_wk=_normal(rng, (d_model, attn_width), d_model ** -0.5),
            attn_wv=_normal(rng, (d_model, attn_width), d_model ** -0.5),
            attn_wo=_normal(rng, (attn_width, d_model), attn_width ** -0.5 * res),
            attn_qgain=Tensor(np.full(cfg.attn_heads, 2.0)),
            attn_kgain=Tensor(np.full(cfg.attn_heads, 2.0)),
            ttt_wq=_normal(rng, (d_model, cfg.fw_dim), d_model ** -0.5),
            ttt_wk=_normal(rng, (d_model, cfg.fw_dim), d_model ** -0.5),
            ttt_wv=_normal(rng, (d_model, cfg.fw_dim), d_model ** -0.5),
            ttt_wo=_normal(rng, (cfg.fw_dim, d_model), cfg.fw_dim ** -0.5 * res),
            lr_head=Tensor(np.zeros(d_model)),
            fw0=_init_fast_weights(rng, cfg.fw_dim, cfg.fw_hidden),
            ffn_win=_normal(rng, (d_model, 2 * cfg.ffn_hidden), d_model ** -0.5),
            ffn_wout=_normal(rng, (cfg.ffn_hidden, d_model), cfg.ffn_hidden ** -0.5 * res),
            n_heads=cfg.attn_heads, head_dim=cfg.head_dim,
            window_tokens=cfg.window_tokens, base_lr=cfg.fw_base_lr,
            use_muon=cfg.use_muon, ns_iters=cfg.ns_iters))

    token_width = 10 * cfg.patch * cfg.patch
    head = DecoderHead(
        ln_gain=Tensor(np.ones(d_model)), ln_bias=Tensor(np.zeros(d_model)),
        proj=_normal(rng, (d_model, 3 * cfg.patch * cfg.patch), d_model ** -0.5))
    return Model(cfg=cfg,
                 embed=_normal(rng, (token_width, d_model), token_width ** -0.5),
                 blocks=blocks, head=head)


def named_parameters(model: Model) -> list[tuple[str, Tensor]]:
    """All trainable slow weights in a stable order."""
    out = [("embed", model.embed)]
    for i, b in enumerate(model.blocks):
        pre = f"blocks.{i}."
        out.extend([
            (pre + "ln_attn_gain", b.ln_attn_gain), (pre + "ln_attn_bias", b.ln_attn_bias),
            (pre + "ln_ttt_gain", b.ln_ttt_gain), (pre + "ln_ttt_bias", b.ln_ttt_bias),
            (pre + "ln_ffn_gain", b.ln_ffn_gain), (pre + "ln_ffn_bias", b.ln_ffn_bias),
            (pre + "attn_wq", b.attn_wq), (pre + "attn_wk", b.attn_wk),
            (pre + "attn_wv", b.attn_wv), (pre + "attn_wo", b.attn_wo),
            (pre + "attn_qgain", b.attn_qgain), (pre + "attn_kgain", b.attn_kgain),
            (pre + "ttt_wq", b.ttt_wq), (pre + "ttt_wk", b.ttt_wk),
            (pre + "ttt_wv", b.ttt_wv), (pre + "ttt_wo", b.ttt_wo),
            (pre + "lr_head", b.lr_head),
            (pre + "fw0.w1", b.fw0.w1), (pre + "fw0.w2", b.fw0.w2), (pre + "fw0.w3", b.fw0.w3),
            (pre + "ffn_win", b.ffn_win), (pre + "ffn_wout", b.ffn_wout),
        ])
    out.extend([("head.ln_gain", model.head.ln_gain),
                ("head.ln_bias", model.head.ln_bias),
                ("head.proj", model.head.proj)])
    return out


def state_arrays(model: Model) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in named_parameters(model)}


def load_state_arrays(model: Model, arrays: dict[str, np.ndarray]) -> None:
    for name, t in named_parameters(model):
        src = arrays[name]
        if src.shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data = np.asarray(src, dtype=t.data.dtype)


def episode_schedule(model: Model, n_input_tokens: int) -> ChunkSchedule:
    cfg = model.cfg
    if cfg.chunk_size > 0:
        return make_schedule(n_input_tokens, size=cfg.chunk_size)
    return make_schedule(n_input_tokens, count=cfg.chunk_count)


def episode_token_sequence(model: Model, episode: Episode) -> TokenSequence:
    """Tokenize an episode: inputs first, then target queries."""
    cfg = model.cfg
    s, p = cfg.image_size, cfg.patch
    use_rope = cfg.time_encoding == "rope"

    raw, roles, frame_ids = [], [], []
    frames = list(episode.inputs) + list(episode.targets)
    for fid, fb in enumerate(frames):
        t_chan = 0.0 if use_rope else fb.t
        if fb.role == "input":
            pm = pluecker_map(fb.pose, s, s)
            toks = patchify(assemble_features(fb.image, pm, t_chan, s, s), p)
        else:
            toks = build_target_query(fb.pose, t_chan, s, s, p)
        raw.append(toks)
        roles.extend([0 if fb.role == "input" else 1] * toks.shape[0])
        frame_ids.extend([fid] * toks.shape[0])

    emb = constant(np.concatenate(raw, axis=0)) @ model.embed
    if use_rope:
        tpf = model.tokens_per_frame
        parts = [rope_time(emb[i * tpf:(i + 1) * tpf], fb.t, cfg.rope_channels)
                 for i, fb in enumerate(frames)]
        emb = concat(parts, axis=0)

    roles = np.asarray(roles)
    schedule = episode_schedule(model, int((roles == 0).sum()))
    return TokenSequence(emb, roles, np.asarray(frame_ids),
                         assign_chunks(roles, schedule))


def fresh_states(model: Model) -> list[ElasticState]:
    cfg = model.cfg
    return [fresh_state(b.fw0, estimator=cfg.estimator, policy=cfg.policy,
                        alpha=cfg.alpha, beta=cfg.beta, lam=cfg.lam)
            for b in model.blocks]


@dataclass
class EpisodeOutput:
    patches: Tensor  # (n_target_tokens, p, p, 3)
    pred_images: list[np.ndarray]  # one (H,W,3) array per target frame


def forward_episode(model: Model, episode: Episode) -> EpisodeOutput:
    """Backbone over the episode tokens, then decode every target frame."""
    cfg = model.cfg
    tokens = episode_token_sequence(model, episode)
    schedule = episode_schedule(model, len(tokens.input_positions))
    out = backbone_forward(tokens, model.blocks, schedule, fresh_states(model))
    tgt = out.embeddings[tokens.target_positions]
    patches = decode_tokens(tgt, model.head, cfg.patch)

    s, p, tpf = cfg.image_size, cfg.patch, model.tokens_per_frame
    imgs = []
    flat = patches.data.reshape(-1, p * p * 3)
    for f in range(len(episode.targets)):
        imgs.append(unpatchify(flat[f * tpf:(f + 1) * tpf], s, s, p))
    return EpisodeOutput(patches=patches, pred_images=imgs)


def tensor_unpatchify(patches: Tensor, h: int, w: int, p: int) -> Tensor:
    """Taped counterpart of sceneio.unpatchify for (n,p,p,3) patch stacks."""
    gh, gw = h // p, w // p
    x = reshape(patches, (gh, gw, p, p, 3))
    return reshape(transpose(x, (0, 2, 1, 3, 4)), (h, w, 3))


def episode_loss(model: Model, episode: Episode, mu: float | None = None,
                 perceptual_name: str | None = None, l2_weight: float = 1.0
                 ) -> tuple[Tensor, EpisodeOutput]:
    """Photometric objective averaged over target views. `l2_weight`
    scales the squared-error term (the training ramp); the perceptual
    term, when a plug-in is registered, keeps its own weight `mu`."""
    cfg = model.cfg
    mu = cfg.mu if mu is None else mu
    perceptual = get_perceptual(perceptual_name or (cfg.perceptual or None))
    out = forward_episode(model, episode)
    s, p, tpf = cfg.image_size, cfg.patch, model.tokens_per_frame

    per_frame = []
    for f, fb in enumerate(episode.targets):
        pred = out.patches[f * tpf:(f + 1) * tpf]
        gt = patchify(fb.image, p).reshape(tpf, p, p, 3)
        term = photometric_loss(pred, gt, 0.0)  # patch MSE == image MSE
        if l2_weight != 1.0:
            term = term * l2_weight
        if perceptual is not None:
            img = tensor_unpatchify(pred, s, s, p)
            term = term + mu * perceptual(img, fb.image)
        per_frame.append(term)
    total = per_frame[0]
    for term in per_frame[1:]:
        total = total + term
    return total * (1.0 / len(per_frame)), out
