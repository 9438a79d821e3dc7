"""Procedural 4D scenes and episode sampling.

A scene is a handful of spheres moving along quadratic trajectories inside
a bounded box, over a vertical background gradient, lit by one directional
light. Rendering is analytic (nearest ray-sphere hit + Lambert), pure in
(scene, pose, t), and runs on either kernel backend.

Episodes reproduce the two evaluation protocols: `sparse` samples input
and target frames anywhere in a temporal window, `continuous` takes a
contiguous run of frames and masks the targets inside it (the frame
interpolation probe).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .sceneio import CameraPose, FrameBundle, look_at_pose, normalize_timestamps

WORLD_BOUND = 1.0


@dataclass(frozen=True)
class SyntheticScene:
    """Moving spheres: center(t) = c0 + c1 t + c2 t^2, t in [0,1]."""

    c0: np.ndarray  # (n,3)
    c1: np.ndarray  # (n,3)
    c2: np.ndarray  # (n,3)
    radii: np.ndarray  # (n,)
    albedos: np.ndarray  # (n,3)
    bg_bottom: np.ndarray  # (3,)
    bg_top: np.ndarray  # (3,)
    sky_axis: np.ndarray  # (3,) unit
    light: np.ndarray  # (3,) unit, direction toward the light
    ambient: float
    seed: int

    def __post_init__(self):
        if self.c0.shape[0] == 0:
            return
        for t in np.linspace(0.0, 1.0, 17):
            if np.abs(self.blob_centers(t)).max() > WORLD_BOUND:
                raise ValueError("trajectory leaves the world box")

    def blob_centers(self, t: float) -> np.ndarray:
        return self.c0 + self.c1 * t + self.c2 * (t * t)


def random_scene(seed: int, n_blobs: int = 3) -> SyntheticScene:
    """Deterministic scene from a seed; blobs stay inside the world box."""
    rng = np.random.default_rng(seed)
    start = rng.uniform(-0.7, 0.7, size=(n_blobs, 3))
    end = rng.uniform(-0.7, 0.7, size=(n_blobs, 3))
    bend = rng.uniform(-0.3, 0.3, size=(n_blobs, 3))
    # c(t) = (1-t) start + t end + t(1-t) bend
    c0 = start
    c1 = end - start + bend
    c2 = -bend
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 0.5
    light /= np.linalg.norm(light)
    return SyntheticScene(
        c0=c0, c1=c1, c2=c2,
        radii=rng.uniform(0.15, 0.3, size=n_blobs),
        albedos=rng.uniform(0.2, 1.0, size=(n_blobs, 3)),
        bg_bottom=rng.uniform(0.0, 0.4, size=3),
        bg_top=rng.uniform(0.5, 1.0, size=3),
        sky_axis=np.array([0.0, 0.0, 1.0]),
        light=light,
        ambient=0.25,
        seed=seed)


def render_gt(scene: SyntheticScene, pose: CameraPose, t: float,
              h: int, w: int) -> np.ndarray:
    """Analytic ground-truth image in [0,1], deterministic in its inputs."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0,1]")
    fx, fy, cx, cy = pose.intrinsics
    img = kernels.render_frame(
        scene.blob_centers(t), scene.radii, scene.albedos,
        scene.bg_bottom, scene.bg_top, scene.sky_axis, scene.light,
        scene.ambient, pose.camera_to_world, fx, fy, cx, cy, h, w)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class EpisodeSpec:
    """How to draw one episode from a scene's frame sequence."""

    total_frames: int = 64
    window_len: int = 32
    n_input: int = 8
    n_target: int = 8
    mode: str = "sparse"  # or "continuous"
    orbit_radius: float = 3.0
    orbit_height: float = 1.2
    orbit_turns: float = 1.0
    jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("sparse", "continuous"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_input < 1 or self.n_target < 1:
            raise ValueError("need at least one input and one target frame")
        if self.n_input + self.n_target > self.window_len:
            raise ValueError("window shorter than requested frames")
        if self.window_len > self.total_frames:
            raise ValueError("window longer than the sequence")
        if self.mode == "continuous" and self.window_len != self.n_input + self.n_target:
            raise ValueError("continuous mode uses a window of exactly n_input + n_target frames")


@dataclass(frozen=True)
class Episode:
    inputs: list[FrameBundle]
    targets: list[FrameBundle]
    window_start: int
    input_indices: np.ndarray
    target_indices: np.ndarray
    trajectory: dict = field(default_factory=dict)


def _frame_pose(spec: EpisodeSpec, idx: int, h: int, w: int,
                radius: float, height: float, phase: float) -> CameraPose:
    angle = 2.0 * np.pi * spec.orbit_turns * idx / spec.total_frames + phase
    eye = (radius * np.cos(angle), radius * np.sin(angle), height)
    intr = (float(w), float(h), w / 2.0, h / 2.0)
    return look_at_pose(eye, (0.0, 0.0, 0.0), intr)


def sample_indices(spec: EpisodeSpec, rng: np.random.Generator
                   ) -> tuple[int, np.ndarray, np.ndarray]:
    """Window start plus disjoint sorted input/target frame indices."""
    k = spec.n_input + spec.n_target
    start = int(rng.integers(0, spec.total_frames - spec.window_len + 1))
    if spec.mode == "sparse":
        chosen = rng.choice(spec.window_len, size=k, replace=False) + start
        chosen = rng.permutation(chosen)
    else:
        chosen = rng.permutation(np.arange(start, start + k))
    input_idx = np.sort(chosen[: spec.n_input])
    target_idx = np.sort(chosen[spec.n_input:])
    return start, input_idx, target_idx


def sample_episode(scene: SyntheticScene, spec: EpisodeSpec, h: int, w: int,
                   rng: np.random.Generator | None = None) -> Episode:
    """Draw frames for one episode and render their ground truth."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    radius = spec.orbit_radius * (1.0 + spec.jitter * rng.uniform(-1, 1))
    height = spec.orbit_height * (1.0 + spec.jitter * rng.uniform(-1, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    start, input_idx, target_idx = sample_indices(spec, rng)

    def bundles(indices: np.ndarray, role: str) -> list[FrameBundle]:
        ts = normalize_timestamps(indices, start, spec.window_len)
        out = []
        for idx, t_tok in zip(indices, ts):
            pose = _frame_pose(spec, int(idx), h, w, radius, height, phase)
            t_scene = idx / max(spec.total_frames - 1, 1)
            img = render_gt(scene, pose, float(t_scene), h, w)
            out.append(FrameBundle(img, pose, float(t_tok), role))
        return out

    return Episode(inputs=bundles(input_idx, "input"),
                   targets=bundles(target_idx, "target"),
                   window_start=start,
                   input_indices=input_idx,
                   target_indices=target_idx,
                   trajectory={"radius": radius, "height": height, "phase": phase})
