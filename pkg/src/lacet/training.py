"""Slow-weight training: Adam with decoupled decay and linear warmup, the
reporting EMA, the training loop, and the end-to-end gradient check."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, format_config
from .model import Model, episode_loss, named_parameters, state_arrays
from .rendering import psnr, ssim
from .tape import Tensor, reverse_gradients


@dataclass
class TrainConfig:
    base_lr: float = 3e-3
    warmup_steps: int = 100
    total_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    mu: float = 0.5
    l2_warmup: int = 0
    batch_size: int = 1
    seed: int = 0
    report_ema_decay: float = 0.1
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.base_lr, self.weight_decay, self.mu) < 0:
            raise ValueError("rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0,1)")


def train_config_from(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps,
                       total_steps=cfg.total_steps, beta1=cfg.adam_beta1,
                       beta2=cfg.adam_beta2, weight_decay=cfg.weight_decay,
                       mu=cfg.mu, l2_warmup=cfg.l2_warmup,
                       batch_size=cfg.batch_size, seed=cfg.seed,
                       report_ema_decay=cfg.report_ema_decay)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to base_lr, constant afterwards."""
    if cfg.warmup_steps > 0:
        return cfg.base_lr * min(1.0, step / cfg.warmup_steps)
    return cfg.base_lr


def adam_step(params: list[tuple[str, Tensor]], grads: list[np.ndarray],
              state: dict, cfg: TrainConfig, step: int):
    """Bias-corrected Adam with decoupled weight decay, in place."""
    if step < 1:
        raise ValueError("step counts from 1")
    lr = lr_at(cfg, step)
    c1 = 1.0 - cfg.beta1 ** step
    c2 = 1.0 - cfg.beta2 ** step
    for (name, p), g in zip(params, grads):
        if name not in state:
            state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state[name]
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state[name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps) \
            - lr * cfg.weight_decay * p.data
    return params, state


def model_ema(report, current, decay: float = 0.1):
    """report <- (1-decay)*report + decay*current, for reporting only.

    Works on scalars and on name->array dicts (parameter snapshots).
    """
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must lie in (0,1]")
    if isinstance(report, dict):
        return {k: (1.0 - decay) * report[k] + decay * current[k] for k in report}
    return (1.0 - decay) * report + decay * current


def _format_row(row: dict) -> str:
    return ",".join([str(row["step"])] + [repr(float(row[k]))
                    for k in ("loss", "loss_ema", "psnr", "ssim", "lr")])


LOG_HEADER = "step,loss,loss_ema,psnr,ssim,lr"


def write_log(path: str, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in rows:
            fh.write(_format_row(row) + "\n")


def train_loop(model: Model, data_sampler: Callable, cfg: TrainConfig,
               out_dir: str | None = None) -> list[dict]:
    """Optimize the slow weights; returns one metric row per step.

    data_sampler(rng) -> Episode. With out_dir set, writes the initial and
    final checkpoints plus log.csv. Fixed seeds reproduce the log
    byte-for-byte. A non-finite loss aborts with a diagnostic dump.
    """
    rng = np.random.default_rng(cfg.seed)
    params = named_parameters(model)
    tensors = [t for _, t in params]
    opt_state: dict = {}
    rows: list[dict] = []
    run_cfg = model.cfg

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        save_checkpoint(os.path.join(ckpt_dir, "step_000000.fsm"),
                        state_arrays(model), format_config(run_cfg))

    loss_ema = 0.0
    for step in range(1, cfg.total_steps + 1):
        episodes = [data_sampler(rng) for _ in range(cfg.batch_size)]
        l2w = min(1.0, step / cfg.l2_warmup) if cfg.l2_warmup > 0 else 1.0
        losses, outs = [], []
        for ep in episodes:
            loss_ep, out = episode_loss(model, ep, mu=cfg.mu, l2_weight=l2w)
            losses.append(loss_ep)
            outs.append((ep, out))
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        if cfg.batch_size > 1:
            loss = loss * (1.0 / cfg.batch_size)

        loss_val = loss.item()
        if not np.isfinite(loss_val):
            if out_dir is not None:
                _diagnostic_dump(out_dir, step, loss_val, params)
            raise RuntimeError(f"non-finite loss {loss_val} at step {step}")

        grads = reverse_gradients(loss, tensors)
        adam_step(params, grads, opt_state, cfg, step)

        loss_ema = loss_val if step == 1 else model_ema(loss_ema, loss_val,
                                                        cfg.report_ema_decay)
        ps, ss = [], []
        for ep, out in outs:
            for fb, pred in zip(ep.targets, out.pred_images):
                ps.append(psnr(pred, fb.image))
                ss.append(ssim(pred, fb.image))
        rows.append({"step": step, "loss": loss_val, "loss_ema": loss_ema,
                     "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
                     "lr": lr_at(cfg, step)})

        if ckpt_dir and run_cfg.checkpoint_every > 0 and step % run_cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(ckpt_dir, f"step_{step:06d}.fsm"),
                            state_arrays(model), format_config(run_cfg))

    if out_dir is not None:
        save_checkpoint(os.path.join(ckpt_dir, "final.fsm"),
                        state_arrays(model), format_config(run_cfg))
        write_log(os.path.join(out_dir, "log.csv"), rows)
    return rows


def _diagnostic_dump(out_dir: str, step: int, loss_val: float,
                     params: list[tuple[str, Tensor]]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "diagnostic_dump.txt"), "w") as fh:
        fh.write(f"step {step} loss {loss_val!r}\n")
        for name, t in params:
            a = t.data
            fh.write(f"{name} shape {a.shape} min {a.min()!r} max {a.max()!r} "
                     f"finite {bool(np.isfinite(a).all())}\n")


def grad_check_end_to_end(lam: float = 0.5, policy: str = "streaming_ema",
                          estimator: str = "si", seed: int = 0,
                          n_coords: int = 64, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of the photometric loss, over a random subsample of slow
    weights of a 2-block width-16 model on a tiny scene."""
    from .config import RunConfig
    from .model import init_model
    from .scenes import EpisodeSpec, random_scene, sample_episode

    cfg = RunConfig(blocks=2, dim=16, attn_heads=2, head_dim=8, ffn_hidden=24,
                    fw_dim=8, fw_hidden=16, patch=8, window_tokens=8,
                    chunk_size=4, image_size=16, n_input=2, n_target=1,
                    total_frames=16, window_len=8,
                    lam=lam, policy=policy, estimator=estimator, seed=seed)
    rng = np.random.default_rng(seed)
    model = init_model(cfg, rng)
    scene = random_scene(seed, n_blobs=2)
    spec = EpisodeSpec(total_frames=cfg.total_frames, window_len=cfg.window_len,
                       n_input=cfg.n_input, n_target=cfg.n_target)
    episode = sample_episode(scene, spec, cfg.image_size, cfg.image_size,
                             np.random.default_rng(seed + 1))

    params = named_parameters(model)
    tensors = [t for _, t in params]
    loss, _ = episode_loss(model, episode)
    grads = reverse_gradients(loss, tensors)

    flat_sizes = [t.data.size for t in tensors]
    total = sum(flat_sizes)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)

    def loss_value() -> float:
        val, _ = episode_loss(model, episode)
        return val.item()

    worst = 0.0
    offsets = np.cumsum([0] + flat_sizes)
    for pick in picks:
        which = int(np.searchsorted(offsets, pick, side="right") - 1)
        local = int(pick - offsets[which])
        t = tensors[which]
        flat = t.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        fp = loss_value()
        flat[local] = orig - h
        fm = loss_value()
        flat[local] = orig
        fd = (fp - fm) / (2.0 * h)
        ad = grads[which].reshape(-1)[local]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-7)
        worst = max(worst, rel)
    return worst
