import numpy as np
import pytest

from helpers import dense_attention
from lacet import elastic as elastic_mod
from lacet.blocks import (
    BlockParams,
    TokenSequence,
    assign_chunks,
    backbone_forward,
    batched_update,
    block_forward,
    make_schedule,
    project_qkv,
    ttt_layer,
    window_attention,
    window_groups,
)
from lacet.config import RunConfig
from lacet.elastic import chunk_step, fresh_state, plain_chunk_step
from lacet.fastweight import ChunkBatch
from lacet.model import init_model
from lacet.tape import Tensor


def tiny_cfg(**kw) -> RunConfig:
    base = dict(blocks=2, dim=16, attn_heads=2, head_dim=8, ffn_hidden=24,
                fw_dim=8, fw_hidden=12, patch=8, window_tokens=8,
                chunk_size=4, image_size=16, n_input=3, n_target=2)
    base.update(kw)
    return RunConfig(**base)


def make_tokens(rng, n_in_frames=3, n_tgt_frames=2, tpf=4, dim=16) -> TokenSequence:
    n = (n_in_frames + n_tgt_frames) * tpf
    roles = np.repeat([0] * n_in_frames + [1] * n_tgt_frames, tpf)
    frames = np.repeat(np.arange(n_in_frames + n_tgt_frames), tpf)
    sched = make_schedule(n_in_frames * tpf, size=tpf)
    return TokenSequence(Tensor(rng.normal(size=(n, dim))), roles, frames,
                         assign_chunks(roles, sched))


def block_of(cfg, seed=0) -> BlockParams:
    return init_model(cfg, np.random.default_rng(seed)).blocks[0]


def test_make_schedule_fixed_size():
    s = make_schedule(8192, size=2048)
    assert len(s.boundaries) == 4
    assert s.boundaries[0] == (0, 2048) and s.boundaries[-1] == (6144, 8192)
    s = make_schedule(5, size=8)
    assert s.boundaries == ((0, 5),)
    s = make_schedule(10, size=4)
    assert s.boundaries == ((0, 4), (4, 8), (8, 10))


def test_make_schedule_fixed_count():
    s = make_schedule(10, count=4)
    sizes = [b - a for a, b in s.boundaries]
    assert sizes == [3, 3, 2, 2]
    with pytest.raises(ValueError):
        make_schedule(10, count=0)
    with pytest.raises(ValueError):
        make_schedule(10)
    with pytest.raises(ValueError):
        make_schedule(10, size=4, count=2)
    with pytest.raises(ValueError):
        make_schedule(0, size=4)


def test_token_sequence_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        TokenSequence(Tensor(rng.normal(size=(4, 8))), np.array([0, 0, 1, 1]),
                      np.zeros(4, dtype=int), np.array([0, 0, 0, -1]))
    with pytest.raises(ValueError):
        TokenSequence(Tensor(rng.normal(size=(4, 8))), np.array([0, 0, 1, 1]),
                      np.zeros(4, dtype=int), np.array([0, -1, -1, -1]))


def test_window_groups_roles_and_budget():
    roles = np.repeat([0, 0, 0, 1, 1], 4)
    frames = np.repeat(np.arange(5), 4)
    groups = window_groups(roles, frames, 8)
    assert groups == [(0, 8), (8, 12), (12, 16), (16, 20)]
    # full-window merges all inputs, targets still isolated
    groups = window_groups(roles, frames, 1000)
    assert groups == [(0, 12), (12, 16), (16, 20)]


def test_project_qkv_contracts():
    rng = np.random.default_rng(1)
    cfg = tiny_cfg()
    params = block_of(cfg)
    tokens = make_tokens(rng)
    q, k, v = project_qkv(tokens, params)
    np.testing.assert_allclose((q.data ** 2).sum(-1), 1.0, atol=1e-9)
    np.testing.assert_allclose((k.data ** 2).sum(-1), 1.0, atol=1e-9)
    assert k.shape[0] == v.shape[0] == 12  # input tokens only

    zero = BlockParams(**{**params.__dict__,
                          "ttt_wq": Tensor(np.zeros_like(params.ttt_wq.data)),
                          "ttt_wv": Tensor(np.zeros_like(params.ttt_wv.data))})
    q0, _, v0 = project_qkv(tokens, zero)
    np.testing.assert_array_equal(q0.data, 0.0)  # eps guard keeps zeros
    np.testing.assert_array_equal(v0.data, 0.0)


def test_window_attention_uniform_when_identical():
    rng = np.random.default_rng(2)
    cfg = tiny_cfg()
    params = block_of(cfg)
    row = rng.normal(size=16)
    tokens = make_tokens(rng)
    tokens = tokens.with_embeddings(Tensor(np.tile(row, (tokens.embeddings.shape[0], 1))))
    out = window_attention(tokens, params)
    expect = (row @ params.attn_wv.data) @ params.attn_wo.data
    np.testing.assert_allclose(out.data, np.tile(expect, (out.shape[0], 1)), atol=1e-10)


def test_window_attention_matches_dense_oracle():
    # all-input sequence, window covering everything -> plain dense attention
    rng = np.random.default_rng(3)
    cfg = tiny_cfg()
    params = block_of(cfg)
    n, tpf = 12, 4
    roles = np.zeros(n, dtype=int)
    frames = np.repeat(np.arange(3), tpf)
    sched = make_schedule(n, size=n)
    tokens = TokenSequence(Tensor(rng.normal(size=(n, 16))), roles, frames,
                           assign_chunks(roles, sched))
    out = window_attention(tokens, params, window=10_000)

    x = tokens.embeddings.data
    heads, hd = params.n_heads, params.head_dim
    q = (x @ params.attn_wq.data).reshape(n, heads, hd)
    k = (x @ params.attn_wk.data).reshape(n, heads, hd)
    v = (x @ params.attn_wv.data).reshape(n, heads, hd)
    ctx = np.empty_like(v)
    for h in range(heads):
        qh = q[:, h] / np.sqrt((q[:, h] ** 2).sum(-1, keepdims=True) + 1e-12)
        kh = k[:, h] / np.sqrt((k[:, h] ** 2).sum(-1, keepdims=True) + 1e-12)
        qh = qh * params.attn_qgain.data[h]
        kh = kh * params.attn_kgain.data[h]
        ctx[:, h] = dense_attention(qh, kh, v[:, h])
    expect = ctx.reshape(n, heads * hd) @ params.attn_wo.data
    np.testing.assert_allclose(out.data, expect, atol=1e-10)


def test_window_attention_out_of_window_no_influence():
    rng = np.random.default_rng(4)
    cfg = tiny_cfg()
    params = block_of(cfg)
    tokens = make_tokens(rng)
    out1 = window_attention(tokens, params, window=4).data
    # perturb the last input frame; first frame's window (tokens 0..3) unchanged
    x2 = tokens.embeddings.data.copy()
    x2[8:12] += rng.normal(size=(4, 16))
    out2 = window_attention(tokens.with_embeddings(Tensor(x2)), params, window=4).data
    np.testing.assert_array_equal(out1[:4], out2[:4])
    assert np.abs(out1[8:12] - out2[8:12]).max() > 0


def test_ttt_layer_target_independence():
    rng = np.random.default_rng(5)
    cfg = tiny_cfg()
    params = block_of(cfg)
    tokens = make_tokens(rng, n_tgt_frames=2)
    state = fresh_state(params.fw0)
    joint = ttt_layer(tokens, params, make_schedule(12, size=4), state).data

    # decode each target frame alone
    for f in range(2):
        keep = np.concatenate([np.arange(12), 12 + 4 * f + np.arange(4)])
        sub = TokenSequence(Tensor(tokens.embeddings.data[keep]),
                            tokens.roles[keep], tokens.frame_index[keep],
                            tokens.chunk_id[keep])
        solo = ttt_layer(sub, params, make_schedule(12, size=4),
                         fresh_state(params.fw0)).data
        np.testing.assert_allclose(solo[12:], joint[12 + 4 * f: 16 + 4 * f], atol=1e-10)


def test_ttt_layer_lam_zero_matches_plain():
    rng = np.random.default_rng(6)
    cfg = tiny_cfg()
    params = block_of(cfg)
    tokens = make_tokens(rng)
    sched = make_schedule(12, size=4)
    out = ttt_layer(tokens, params, sched, fresh_state(params.fw0, lam=0.0)).data

    # consolidation-free oracle path
    q, k, v = project_qkv(tokens, params)
    from lacet.fastweight import forward_f, per_token_lr
    eta = per_token_lr(tokens.embeddings[tokens.input_positions], params.lr_head,
                       params.base_lr)
    theta = params.fw0
    reads = []
    for a, b in sched.boundaries:
        theta = plain_chunk_step(theta, ChunkBatch(k[a:b], v[a:b], eta[a:b]))
        reads.append(forward_f(theta, q[tokens.input_positions][a:b]).data)
    reads.append(forward_f(theta, q[tokens.target_positions]).data)
    expect = np.concatenate(reads, axis=0) @ params.ttt_wo.data
    np.testing.assert_array_equal(out, expect)


def test_ttt_layer_permuting_targets_permutes_outputs():
    rng = np.random.default_rng(7)
    cfg = tiny_cfg()
    params = block_of(cfg)
    tokens = make_tokens(rng)
    sched = make_schedule(12, size=4)
    base = ttt_layer(tokens, params, sched, fresh_state(params.fw0)).data

    perm = 12 + rng.permutation(8)
    keep = np.concatenate([np.arange(12), perm])
    swapped = TokenSequence(Tensor(tokens.embeddings.data[keep]), tokens.roles[keep],
                            tokens.frame_index[keep], tokens.chunk_id[keep])
    out = ttt_layer(swapped, params, sched, fresh_state(params.fw0)).data
    np.testing.assert_array_equal(out[12:], base[perm])


def test_block_identity_with_zero_output_projections():
    rng = np.random.default_rng(8)
    cfg = tiny_cfg()
    params = block_of(cfg)
    zp = BlockParams(**{**params.__dict__,
                        "attn_wo": Tensor(np.zeros_like(params.attn_wo.data)),
                        "ttt_wo": Tensor(np.zeros_like(params.ttt_wo.data)),
                        "ffn_wout": Tensor(np.zeros_like(params.ffn_wout.data))})
    tokens = make_tokens(rng)
    out = block_forward(tokens, zp, make_schedule(12, size=4), fresh_state(zp.fw0))
    np.testing.assert_array_equal(out.embeddings.data, tokens.embeddings.data)


def test_block_forward_shape_and_determinism():
    rng = np.random.default_rng(9)
    cfg = tiny_cfg()
    params = block_of(cfg)
    tokens = make_tokens(rng)
    sched = make_schedule(12, size=4)
    a = block_forward(tokens, params, sched, fresh_state(params.fw0)).embeddings.data
    b = block_forward(tokens, params, sched, fresh_state(params.fw0)).embeddings.data
    assert a.shape == tokens.embeddings.data.shape
    np.testing.assert_array_equal(a, b)


def test_backbone_zero_layers_is_identity():
    rng = np.random.default_rng(10)
    tokens = make_tokens(rng)
    out = backbone_forward(tokens, [], make_schedule(12, size=4), [])
    np.testing.assert_array_equal(out.embeddings.data, tokens.embeddings.data)


def test_backbone_input_tokens_ignore_target_noise():
    rng = np.random.default_rng(11)
    cfg = tiny_cfg()
    model = init_model(cfg, np.random.default_rng(1))
    tokens = make_tokens(rng)
    sched = make_schedule(12, size=4)

    def run(tok):
        states = [fresh_state(b.fw0, lam=0.5) for b in model.blocks]
        return backbone_forward(tok, model.blocks, sched, states).embeddings.data

    base = run(tokens)
    noisy = tokens.embeddings.data.copy()
    noisy[12:] = rng.normal(size=(8, 16)) * 10
    out = run(tokens.with_embeddings(Tensor(noisy)))
    np.testing.assert_allclose(out[:12], base[:12], atol=1e-12)


def test_backbone_lam_zero_equals_consolidation_free_code_path(monkeypatch):
    rng = np.random.default_rng(12)
    cfg = tiny_cfg(lam=0.0)
    model = init_model(cfg, np.random.default_rng(2))
    tokens = make_tokens(rng)
    sched = make_schedule(12, size=4)

    states = [fresh_state(b.fw0, lam=0.0) for b in model.blocks]
    base = backbone_forward(tokens, model.blocks, sched, states).embeddings.data

    def stripped(theta, state, c, use_muon=False, ns_iters=5):
        return plain_chunk_step(theta, c, use_muon, ns_iters), state

    monkeypatch.setattr("lacet.blocks.chunk_step", stripped)
    states = [fresh_state(b.fw0, lam=0.0) for b in model.blocks]
    plain = backbone_forward(tokens, model.blocks, sched, states).embeddings.data
    np.testing.assert_array_equal(base, plain)


def test_batched_update_semantics():
    rng = np.random.default_rng(13)
    cfg = tiny_cfg()
    params = block_of(cfg)
    theta0 = params.fw0

    def chunk():
        return ChunkBatch(Tensor(rng.normal(size=(5, 8))),
                          Tensor(rng.normal(size=(5, 8))),
                          Tensor(rng.uniform(0.1, 1, size=5)))

    c = chunk()
    t_single, s_single = chunk_step(theta0, fresh_state(theta0), c)
    t_b1, s_b1 = batched_update(theta0, fresh_state(theta0), [c])
    for a, b in zip(t_single.arrays(), t_b1.arrays()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(s_single.importance.arrays(), s_b1.importance.arrays()):
        np.testing.assert_array_equal(a, b)

    t_rep, _ = batched_update(theta0, fresh_state(theta0), [c] * 5)
    for a, b in zip(t_rep.arrays(), t_single.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-10)

    with pytest.raises(ValueError):
        batched_update(theta0, fresh_state(theta0), [])
