"""Evaluation protocols, the ablation runner, and metrics export.

Evaluation always runs without the tape. Scenes come either from the
procedural generator or from a frame manifest on disk; both feed the same
episode sampler so the sparse and continuous protocols apply to each.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np

from .config import RunConfig, load_config
from .model import Model, forward_episode, init_model, load_state_arrays
from .rendering import psnr, ssim
from .scenes import Episode, EpisodeSpec, SyntheticScene, random_scene, sample_episode, sample_indices
from .sceneio import FrameBundle, load_frame_manifest, normalize_timestamps
from .tape import no_grad
from .training import train_config_from, train_loop

SWEEP_COLUMNS = ["mode", "n_input", "tokens", "psnr", "ssim", "lpips"]
ABLATION_COLUMNS = ["config", "seed", "lambda", "policy", "estimator", "chunks",
                    "train_l2_ema", "test_psnr", "test_ssim", "lpips"]


def spec_from_config(cfg: RunConfig, mode: str | None = None,
                     n_input: int | None = None) -> EpisodeSpec:
    mode = cfg.mode if mode is None else mode
    n_input = cfg.n_input if n_input is None else n_input
    if mode == "continuous":
        window = n_input + cfg.n_target
    elif n_input == cfg.n_input:
        window = cfg.window_len
    else:
        window = cfg.total_frames  # off-protocol input counts sample the full span
    return EpisodeSpec(total_frames=cfg.total_frames, window_len=window,
                       n_input=n_input, n_target=cfg.n_target, mode=mode,
                       orbit_radius=cfg.orbit_radius, orbit_height=cfg.orbit_height,
                       orbit_turns=cfg.orbit_turns, jitter=cfg.jitter,
                       seed=cfg.scene_seed)


def manifest_episode(frames: list, spec: EpisodeSpec,
                     rng: np.random.Generator) -> Episode:
    """Episode over stored frames: same index sampler, images from disk."""
    if spec.total_frames != len(frames):
        raise ValueError("spec.total_frames must match the manifest length")
    start, input_idx, target_idx = sample_indices(spec, rng)
    by_pos = {i: fr for i, fr in enumerate(frames)}

    def bundles(indices, role):
        ts = normalize_timestamps(indices, start, spec.window_len)
        out = []
        for idx, t in zip(indices, ts):
            _, pose, image = by_pos[int(idx)]
            out.append(FrameBundle(image, pose, float(t), role))
        return out

    return Episode(inputs=bundles(input_idx, "input"),
                   targets=bundles(target_idx, "target"),
                   window_start=start, input_indices=input_idx,
                   target_indices=target_idx)


def evaluate_model(model: Model, episodes: list[Episode]) -> dict:
    """Mean PSNR/SSIM over all target views of the given episodes."""
    ps, ss = [], []
    with no_grad():
        for ep in episodes:
            out = forward_episode(model, ep)
            for fb, pred in zip(ep.targets, out.pred_images):
                ps.append(psnr(pred, fb.image))
                ss.append(ssim(pred, fb.image))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "lpips": ""}


def procedural_episodes(model_cfg: RunConfig, scene: SyntheticScene, n: int,
                        rng: np.random.Generator, mode: str | None = None,
                        n_input: int | None = None) -> list[Episode]:
    spec = spec_from_config(model_cfg, mode=mode, n_input=n_input)
    s = model_cfg.image_size
    return [sample_episode(scene, spec, s, s, rng) for _ in range(n)]


def testtime_scaling_sweep(model: Model, scene: SyntheticScene,
                           n_inputs: list[int], modes: list[str],
                           episodes_per_point: int,
                           rng_seed: int) -> list[dict]:
    """Metric rows over input counts for the sparse and continuous probes."""
    cfg = model.cfg
    tpf = model.tokens_per_frame
    rows = []
    for mode in modes:
        for n in n_inputs:
            rng = np.random.default_rng(rng_seed)  # same draws per point
            eps = procedural_episodes(cfg, scene, episodes_per_point, rng,
                                      mode=mode, n_input=n)
            row = {"mode": mode, "n_input": n, "tokens": n * tpf}
            row.update(evaluate_model(model, eps))
            rows.append(row)
    return rows


# -- metrics export ---------------------------------------------------------

def _format_cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_export(rows: list[dict], csv_path: str,
                   json_path: str | None = None,
                   columns: list[str] | None = None) -> None:
    """CSV plus a JSON mirror, stable column order, reproducible bytes."""
    if columns is None:
        if not rows:
            raise ValueError("columns are required when exporting zero rows")
        columns = list(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_cell(row[c]) for c in columns))
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if json_path is not None:
        payload = [{c: row[c] for c in columns} for row in rows]
        with open(json_path, "w") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")


def parse_metrics_csv(path: str) -> tuple[list[str], list[dict]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    columns = lines[0].split(",")
    rows = [dict(zip(columns, ln.split(","))) for ln in lines[1:]]
    return columns, rows


# -- ablation runner --------------------------------------------------------

def _is_single_chunk(cfg: RunConfig) -> bool:
    tokens_per_frame = (cfg.image_size // cfg.patch) ** 2
    n_input_tokens = cfg.n_input * tokens_per_frame
    if cfg.chunk_count > 0:
        return cfg.chunk_count == 1
    return cfg.chunk_size >= n_input_tokens


def _chunks_label(cfg: RunConfig) -> str:
    return f"count:{cfg.chunk_count}" if cfg.chunk_count > 0 else f"size:{cfg.chunk_size}"


def ensure_controls(grid: list[tuple[str, RunConfig]]) -> list[tuple[str, RunConfig]]:
    """Every elastic config gets a matched lambda=0 control row."""
    out = list(grid)
    have = {(c.lam == 0.0, _chunks_label(c), c.chunk_count, c.chunk_size) for _, c in grid}
    for name, cfg in grid:
        if cfg.lam > 0 and (True, _chunks_label(cfg), cfg.chunk_count, cfg.chunk_size) not in have:
            out.append((name + "+control", replace(cfg, lam=0.0)))
            have.add((True, _chunks_label(cfg), cfg.chunk_count, cfg.chunk_size))
    return out


def _assert_policy_invariance(model: Model, scene: SyntheticScene,
                              rng_seed: int) -> None:
    """Single-chunk runs must be identical under every anchor policy."""
    preds = []
    for policy in ("global", "streaming", "streaming_ema"):
        swapped = Model(cfg=replace(model.cfg, policy=policy),
                        embed=model.embed, blocks=model.blocks, head=model.head)
        eps = procedural_episodes(swapped.cfg, scene, 1,
                                  np.random.default_rng(rng_seed))
        with no_grad():
            out = forward_episode(swapped, eps[0])
        preds.append(np.stack(out.pred_images))
    for other in preds[1:]:
        if np.abs(preds[0] - other).max() > 1e-12:
            raise RuntimeError("single-chunk policy invariance violated")


def ablation_runner(grid: list[tuple[str, RunConfig]], seeds: list[int],
                    out_dir: str | None = None,
                    eval_episodes: int | None = None) -> list[dict]:
    """Train each config on each seed under a shared budget; report the
    EMA-smoothed train loss plus held-out PSNR/SSIM, one row per run and a
    seed-averaged row per config. Elastic rows always get a paired
    lambda=0 control; single-chunk rows assert policy invariance."""
    grid = ensure_controls(grid)
    rows: list[dict] = []
    for name, cfg in grid:
        per_seed = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            model = init_model(run_cfg, np.random.default_rng(seed))
            scene = random_scene(run_cfg.scene_seed, run_cfg.n_blobs)
            spec = spec_from_config(run_cfg)
            s = run_cfg.image_size

            def sampler(rng, _scene=scene, _spec=spec, _s=s):
                return sample_episode(_scene, _spec, _s, _s, rng)

            log = train_loop(model, sampler, train_config_from(run_cfg))
            train_l2 = log[-1]["loss_ema"] if log else float("nan")

            n_eval = run_cfg.eval_episodes if eval_episodes is None else eval_episodes
            eval_eps = procedural_episodes(run_cfg, scene, n_eval,
                                           np.random.default_rng(seed + 7777))
            metrics = evaluate_model(model, eval_eps)
            if _is_single_chunk(run_cfg):
                _assert_policy_invariance(model, scene, seed + 4321)

            row = {"config": name, "seed": seed, "lambda": run_cfg.lam,
                   "policy": run_cfg.policy, "estimator": run_cfg.estimator,
                   "chunks": _chunks_label(run_cfg), "train_l2_ema": train_l2,
                   "test_psnr": metrics["psnr"], "test_ssim": metrics["ssim"],
                   "lpips": ""}
            rows.append(row)
            per_seed.append(row)
        if per_seed:
            rows.append({"config": name, "seed": "mean",
                         "lambda": cfg.lam, "policy": cfg.policy,
                         "estimator": cfg.estimator, "chunks": _chunks_label(cfg),
                         "train_l2_ema": float(np.mean([r["train_l2_ema"] for r in per_seed])),
                         "test_psnr": float(np.mean([r["test_psnr"] for r in per_seed])),
                         "test_ssim": float(np.mean([r["test_ssim"] for r in per_seed])),
                         "lpips": ""})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_export(rows, os.path.join(out_dir, "results.csv"),
                       os.path.join(out_dir, "results.json"),
                       columns=ABLATION_COLUMNS)
    return rows


def load_grid_configs(grid_path: str) -> list[tuple[str, RunConfig]]:
    from .config import parse_grid
    with open(grid_path) as fh:
        entries = parse_grid(fh.read())
    base = os.path.dirname(os.path.abspath(grid_path))
    out = []
    for i, (cfg_path, overrides) in enumerate(entries):
        full = cfg_path if os.path.isabs(cfg_path) else os.path.join(base, cfg_path)
        cfg = load_config(full, overrides)
        label = os.path.splitext(os.path.basename(cfg_path))[0]
        if overrides:
            label = f"{label}#{i}"
        out.append((label, cfg))
    return out


# -- scene/checkpoint loading for the CLI ------------------------------------

def load_model_checkpoint(path: str, overrides: list[str] | None = None) -> Model:
    from .checkpoint import load_checkpoint
    from .config import parse_config_text

    arrays, cfg_text = load_checkpoint(path)
    if cfg_text is None:
        raise ValueError("checkpoint carries no config; cannot rebuild the model")
    cfg = parse_config_text(cfg_text, overrides)
    model = init_model(cfg, np.random.default_rng(cfg.seed))
    load_state_arrays(model, arrays)
    return model


def is_frame_manifest(path: str) -> bool:
    with open(path) as fh:
        first = fh.readline().split()
    return bool(first) and first[0] == "frames"


def episodes_from_scene_file(path: str, model_cfg: RunConfig, n: int,
                             rng: np.random.Generator) -> list[Episode]:
    """Procedural scene config or frame manifest, sniffed by content.
    Frames must match the model's resolution."""
    if is_frame_manifest(path):
        frames = load_frame_manifest(path)
        h, w, _ = frames[0][2].shape
        if h != model_cfg.image_size or w != model_cfg.image_size:
            raise ValueError("manifest resolution differs from the model's")
        window = min(model_cfg.window_len, len(frames))
        spec = replace(spec_from_config(model_cfg),
                       total_frames=len(frames), window_len=window)
        return [manifest_episode(frames, spec, rng) for _ in range(n)]
    data_cfg = load_config(path)
    if data_cfg.image_size != model_cfg.image_size:
        raise ValueError("scene resolution differs from the model's")
    scene = random_scene(data_cfg.scene_seed, data_cfg.n_blobs)
    return procedural_episodes(data_cfg, scene, n, rng)
