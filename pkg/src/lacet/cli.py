"""Command line front end.

Subcommands: train, eval, ablate, sweep, gradcheck, bench. Every command
takes --seed; fixed seeds reproduce all output files byte for byte. Exit
codes: 0 success, 1 failed checks, 2 usage or config errors.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import kernels
from .config import ConfigError, load_config
from .harness import (
    ABLATION_COLUMNS,
    SWEEP_COLUMNS,
    ablation_runner,
    episodes_from_scene_file,
    evaluate_model,
    load_grid_configs,
    load_model_checkpoint,
    metrics_export,
    procedural_episodes,
    testtime_scaling_sweep,
)
from .model import init_model
from .scenes import random_scene, sample_episode
from .training import grad_check_end_to_end, train_config_from, train_loop

USAGE_EXIT = 2


def _int_list(raw: str) -> list[int]:
    return [int(v) for v in raw.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lacet",
                                 description="chunked elastic test-time-training at desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", default=None,
                   help="procedural scene config or frame manifest; defaults to the training scene")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", dest="overrides", action="append", default=[])

    p = sub.add_parser("ablate", help="train and evaluate a grid of configs")
    p.add_argument("--grid", required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int, default=None, help="single seed shortcut")

    p = sub.add_parser("sweep", help="test-time scaling over input counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-inputs", type=_int_list, default=[2, 4, 8, 16])
    p.add_argument("--modes", default="sparse,continuous")
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="run the gradient and invariant oracles")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="tokens/sec per chunk size and kernel backends")
    p.add_argument("--chunk-sizes", type=_int_list, default=[8, 16, 32, 64])
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    return ap


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    model = init_model(cfg, np.random.default_rng(cfg.seed))
    scene = random_scene(cfg.scene_seed, cfg.n_blobs)
    from .harness import spec_from_config
    spec = spec_from_config(cfg)

    def sampler(rng):
        return sample_episode(scene, spec, cfg.image_size, cfg.image_size, rng)

    os.makedirs(args.out, exist_ok=True)
    rows = train_loop(model, sampler, train_config_from(cfg), args.out)
    if rows:
        last = rows[-1]
        print(f"trained {len(rows)} steps: loss {last['loss']:.6f} "
              f"psnr {last['psnr']:.2f} ssim {last['ssim']:.4f}")
    else:
        print("trained 0 steps: wrote initial checkpoint")
    print(f"outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model_checkpoint(args.checkpoint, args.overrides)
    cfg = model.cfg
    n = args.episodes if args.episodes is not None else cfg.eval_episodes
    rng = np.random.default_rng(args.seed)
    if args.scene is None:
        scene = random_scene(cfg.scene_seed, cfg.n_blobs)
        episodes = procedural_episodes(cfg, scene, n, rng)
    else:
        episodes = episodes_from_scene_file(args.scene, cfg, n, rng)
    row = evaluate_model(model, episodes)
    row.update({"episodes": n, "seed": args.seed})
    print(f"psnr {row['psnr']:.4f} ssim {row['ssim']:.4f} over {n} episodes")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        cols = ["seed", "episodes", "psnr", "ssim", "lpips"]
        metrics_export([row], os.path.join(args.out, "results.csv"),
                       os.path.join(args.out, "results.json"), columns=cols)
    return 0


def cmd_ablate(args) -> int:
    grid = load_grid_configs(args.grid)
    seeds = [args.seed] if args.seed is not None else args.seeds
    if not grid:
        print("warning: empty grid, writing header-only table")
        os.makedirs(args.out, exist_ok=True)
        metrics_export([], os.path.join(args.out, "results.csv"),
                       os.path.join(args.out, "results.json"),
                       columns=ABLATION_COLUMNS)
        return 0
    rows = ablation_runner(grid, seeds, args.out)
    for row in rows:
        if row["seed"] == "mean":
            print(f"{row['config']}: test psnr {row['test_psnr']:.3f} "
                  f"ssim {row['test_ssim']:.4f}")
    print(f"results in {args.out}")
    return 0


def cmd_sweep(args) -> int:
    model = load_model_checkpoint(args.checkpoint)
    modes = [m for m in args.modes.split(",") if m]
    scene = random_scene(model.cfg.scene_seed, model.cfg.n_blobs)
    rows = testtime_scaling_sweep(model, scene, args.n_inputs, modes,
                                  args.episodes, args.seed)
    for row in rows:
        print(f"{row['mode']:>10} n={row['n_input']:<3} tokens={row['tokens']:<6} "
              f"psnr {row['psnr']:.3f} ssim {row['ssim']:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metrics_export(rows, os.path.join(args.out, "results.csv"),
                       os.path.join(args.out, "results.json"),
                       columns=SWEEP_COLUMNS)
    return 0


def cmd_gradcheck(args) -> int:
    import math

    from .fastweight import ChunkBatch, FastWeights, newton_schulz, pseudo_grad, chunk_loss
    from .sceneio import look_at_pose, pluecker_map, patchify, unpatchify
    from .tape import Tensor, finite_diff_oracle, reverse_gradients

    rng = np.random.default_rng(args.seed)
    failures = []

    def check(name: str, ok: bool, detail: str = "") -> None:
        print(f"{'PASS' if ok else 'FAIL'}  {name}{'  ' + detail if detail else ''}")
        if not ok:
            failures.append(name)

    n_coords = 16 if args.quick else 64

    # pseudo-gradient vs both oracles
    theta = FastWeights(Tensor(rng.normal(size=(8, 8))),
                        Tensor(rng.normal(size=(8, 8))),
                        Tensor(rng.normal(size=(8, 8))))
    batch = ChunkBatch(Tensor(rng.normal(size=(6, 8))),
                       Tensor(rng.normal(size=(6, 8))),
                       Tensor(rng.uniform(0.1, 1.0, size=6)))
    delta = pseudo_grad(theta, batch)
    taped = reverse_gradients(chunk_loss(theta, batch),
                              [theta.w1, theta.w2, theta.w3])
    exact = max(np.abs(c - t).max() for c, t in zip(delta.arrays(), taped))
    check("pseudo-gradient matches reverse mode", exact <= 1e-12, f"max abs {exact:.2e}")

    def loss_w1(w):
        return chunk_loss(FastWeights(Tensor(w), theta.w2, theta.w3), batch).item()

    fd = finite_diff_oracle(loss_w1, theta.w1.data)
    rel = np.abs(delta.w1.data - fd) / np.maximum(np.abs(fd), 1e-8)
    check("pseudo-gradient matches finite differences", rel.max() <= 1e-6,
          f"max rel {rel.max():.2e}")

    # end-to-end slow-weight gradients
    e0 = grad_check_end_to_end(lam=0.0, seed=args.seed, n_coords=n_coords)
    check("end-to-end gradients (lambda=0)", e0 <= 1e-4, f"max rel {e0:.2e}")
    e1 = grad_check_end_to_end(lam=0.5, policy="streaming_ema", estimator="si",
                               seed=args.seed, n_coords=n_coords)
    check("end-to-end gradients (lambda=0.5, streaming-ema, si)", e1 <= 1e-4,
          f"max rel {e1:.2e}")

    # newton-schulz band on conditioned full-rank inputs
    worst_lo, worst_hi = 1.0, 1.0
    for _ in range(10 if args.quick else 50):
        u, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        v, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        m = u @ np.diag(rng.uniform(0.25, 1.0, size=8)) @ v.T
        sv = np.linalg.svd(newton_schulz(Tensor(m), 5).data, compute_uv=False)
        worst_lo = min(worst_lo, sv.min())
        worst_hi = max(worst_hi, sv.max())
    check("newton-schulz singular band", 0.7 <= worst_lo and worst_hi <= 1.3,
          f"[{worst_lo:.3f}, {worst_hi:.3f}]")

    # geometry invariants
    ok = True
    for _ in range(50 if args.quick else 200):
        eye = rng.normal(size=3)
        eye = 3.0 * eye / np.linalg.norm(eye)
        pose = look_at_pose(eye, rng.normal(size=3) * 0.2, (16.0, 16.0, 8.0, 8.0))
        pm = pluecker_map(pose, 4, 4)
        d, mm = pm[..., :3], pm[..., 3:]
        ok &= bool(np.abs((d * mm).sum(-1)).max() <= 1e-12)
        ok &= bool(np.abs((d ** 2).sum(-1) - 1).max() <= 1e-12)
    check("pluecker identities", ok)

    fmap = rng.normal(size=(16, 16, 10))
    ok = bool(np.array_equal(unpatchify(patchify(fmap, 8), 16, 16, 8), fmap))
    check("patchify bijection", ok)

    from .rendering import psnr as _psnr, ssim as _ssim
    base = np.full((16, 16, 3), 0.5)
    check("psnr/ssim sanity",
          abs(_psnr(base + 0.1, base) - 20.0) < 1e-12
          and _psnr(base, base) == 99.0
          and abs(_ssim(base, base) - 1.0) < 1e-12)

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


def cmd_bench(args) -> int:
    from .elastic import fresh_state
    from .fastweight import ChunkBatch
    from .blocks import make_schedule
    from .config import RunConfig
    from .model import episode_loss, init_model
    from .scenes import EpisodeSpec
    from .tape import no_grad

    rng = np.random.default_rng(args.seed)
    cfg = RunConfig()
    model = init_model(cfg, rng)
    scene = random_scene(cfg.scene_seed, cfg.n_blobs)
    print("tokens/sec of the memory layer by chunk size "
          f"({args.tokens} input tokens, width {cfg.fw_dim}):")
    from .elastic import chunk_step

    for size in args.chunk_sizes:
        k = rng.normal(size=(args.tokens, cfg.fw_dim))
        v = rng.normal(size=(args.tokens, cfg.fw_dim))
        eta = rng.uniform(0.2, 1.0, size=args.tokens)
        sched = make_schedule(args.tokens, size=size)
        best = np.inf
        for _ in range(3):
            theta = model.blocks[0].fw0
            state = fresh_state(theta)
            t0 = time.perf_counter()
            with no_grad():
                from .tape import Tensor
                for a, b in sched.boundaries:
                    batch = ChunkBatch(Tensor(k[a:b]), Tensor(v[a:b]), Tensor(eta[a:b]))
                    theta, state = chunk_step(theta, state, batch)
            best = min(best, time.perf_counter() - t0)
        print(f"  chunk {size:>5}: {args.tokens / best:12.0f} tokens/sec")

    print("kernel backends (analytic renderer, 64x64, 6 blobs):")
    scene6 = random_scene(args.seed, 6)
    from .sceneio import look_at_pose
    pose = look_at_pose((3.0, 0.5, 1.2), (0, 0, 0), (64.0, 64.0, 32.0, 32.0))
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    for backend in backends:
        arglist = (scene6.blob_centers(0.5), scene6.radii, scene6.albedos,
                   scene6.bg_bottom, scene6.bg_top, scene6.sky_axis,
                   scene6.light, scene6.ambient, pose.camera_to_world,
                   64.0, 64.0, 32.0, 32.0, 64, 64)
        kernels.render_frame(*arglist, backend=backend)  # warm up / compile
        best = np.inf
        for _ in range(5):
            t0 = time.perf_counter()
            for _ in range(10):
                kernels.render_frame(*arglist, backend=backend)
            best = min(best, (time.perf_counter() - t0) / 10)
        print(f"  {backend:>6}: {best * 1e3:8.3f} ms/frame")
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
                "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "bench": cmd_bench}
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
