import numpy as np
import pytest

from lacet.config import RunConfig
from lacet.model import init_model
from lacet.scenes import EpisodeSpec, random_scene, sample_episode
from lacet.tape import Tensor
from lacet.training import (
    TrainConfig,
    adam_step,
    grad_check_end_to_end,
    lr_at,
    model_ema,
    train_config_from,
    train_loop,
)


def tiny_cfg(**kw) -> RunConfig:
    base = dict(blocks=1, dim=16, attn_heads=2, head_dim=8, ffn_hidden=24,
                fw_dim=8, fw_hidden=16, patch=8, window_tokens=8,
                chunk_size=4, image_size=16, n_input=2, n_target=1,
                total_frames=16, window_len=8, total_steps=3,
                warmup_steps=2, base_lr=1e-3, seed=0)
    base.update(kw)
    return RunConfig(**base)


def make_sampler(cfg, scene_seed=0):
    scene = random_scene(scene_seed, n_blobs=2)
    spec = EpisodeSpec(total_frames=cfg.total_frames, window_len=cfg.window_len,
                       n_input=cfg.n_input, n_target=cfg.n_target)

    def sampler(rng):
        return sample_episode(scene, spec, cfg.image_size, cfg.image_size, rng)

    return sampler


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def test_lr_warmup_shape():
    cfg = TrainConfig(base_lr=1.0, warmup_steps=4)
    assert lr_at(cfg, 1) == 0.25
    assert lr_at(cfg, 4) == 1.0
    assert lr_at(cfg, 50) == 1.0
    assert lr_at(TrainConfig(base_lr=0.3, warmup_steps=0), 1) == 0.3


def test_adam_zero_grads_no_decay():
    p = [("w", Tensor(np.array([1.0, -2.0])))]
    before = p[0][1].data.copy()
    cfg = TrainConfig(base_lr=0.1, warmup_steps=0, weight_decay=0.0)
    adam_step(p, [np.zeros(2)], {}, cfg, 1)
    np.testing.assert_array_equal(p[0][1].data, before)


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -4.0, 1e-3])
    p = [("w", Tensor(np.zeros(3)))]
    cfg = TrainConfig(base_lr=0.01, warmup_steps=0, weight_decay=0.0, eps=1e-16)
    adam_step(p, [g.copy()], {}, cfg, 1)
    np.testing.assert_allclose(p[0][1].data, -0.01 * np.sign(g), rtol=1e-10)


def test_adam_decoupled_decay_only():
    p = [("w", Tensor(np.array([2.0, -1.0])))]
    cfg = TrainConfig(base_lr=0.1, warmup_steps=0, weight_decay=0.5)
    adam_step(p, [np.zeros(2)], {}, cfg, 1)
    np.testing.assert_allclose(p[0][1].data, np.array([2.0, -1.0]) * (1 - 0.1 * 0.5),
                               atol=1e-15)


def test_adam_rejects_step_zero():
    with pytest.raises(ValueError):
        adam_step([("w", Tensor(np.zeros(1)))], [np.zeros(1)], {}, TrainConfig(), 0)


def test_model_ema():
    assert model_ema(1.0, 1.0, 0.1) == 1.0
    assert model_ema(0.0, 5.0, 1.0) == 5.0
    x = 0.0
    for _ in range(200):
        x = model_ema(x, 3.0, 0.1)
    assert abs(x - 3.0) < 1e-8
    d = model_ema({"a": np.array([0.0])}, {"a": np.array([10.0])}, 0.1)
    np.testing.assert_allclose(d["a"], 1.0)
    with pytest.raises(ValueError):
        model_ema(0.0, 1.0, 0.0)


def test_train_loop_zero_steps_writes_initial_checkpoint(tmp_path):
    cfg = tiny_cfg(total_steps=0)
    model = init_model(cfg)
    rows = train_loop(model, make_sampler(cfg), train_config_from(cfg), str(tmp_path))
    assert rows == []
    assert (tmp_path / "checkpoints" / "step_000000.fsm").exists()
    assert (tmp_path / "checkpoints" / "final.fsm").exists()
    assert (tmp_path / "log.csv").read_text().strip() == "step,loss,loss_ema,psnr,ssim,lr"


def test_train_loop_deterministic_logs(tmp_path):
    cfg = tiny_cfg(total_steps=3)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        model = init_model(cfg, np.random.default_rng(cfg.seed))
        train_loop(model, make_sampler(cfg), train_config_from(cfg), str(out))
    assert (out1 / "log.csv").read_bytes() == (out2 / "log.csv").read_bytes()
    assert (out1 / "checkpoints" / "final.fsm").read_bytes() == \
        (out2 / "checkpoints" / "final.fsm").read_bytes()


def test_train_loop_reduces_loss():
    cfg = tiny_cfg(total_steps=30, base_lr=5e-3, warmup_steps=5, seed=1)
    model = init_model(cfg, np.random.default_rng(1))
    rows = train_loop(model, make_sampler(cfg), train_config_from(cfg))
    first = np.mean([r["loss"] for r in rows[:5]])
    last = np.mean([r["loss"] for r in rows[-5:]])
    assert last < first


def test_train_loop_aborts_on_nonfinite(tmp_path):
    cfg = tiny_cfg(total_steps=2, base_lr=1e-3)
    model = init_model(cfg)
    model.embed.data[:] = np.nan
    with pytest.raises(RuntimeError):
        train_loop(model, make_sampler(cfg), train_config_from(cfg), str(tmp_path))
    assert (tmp_path / "diagnostic_dump.txt").exists()


def test_grad_check_zero_at_minimum():
    # identical pred/gt means exactly zero gradients everywhere
    from lacet.model import episode_loss, named_parameters
    from lacet.rendering import photometric_loss
    from lacet.tape import reverse_gradients

    cfg = tiny_cfg()
    model = init_model(cfg)
    ep = make_sampler(cfg)(np.random.default_rng(0))
    from lacet.model import forward_episode
    out = forward_episode(model, ep)
    gt = out.patches.data.copy()
    loss = photometric_loss(out.patches, gt, 0.0)
    grads = reverse_gradients(loss, [t for _, t in named_parameters(model)])
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)


@pytest.mark.slow
def test_grad_check_end_to_end_both_configs():
    assert grad_check_end_to_end(lam=0.0, n_coords=48) <= 1e-4
    assert grad_check_end_to_end(lam=0.5, policy="streaming_ema",
                                 estimator="si", n_coords=48) <= 1e-4
