"""Camera and time conditioning plus on-disk frame exchange.

Per-view conditioning is a 10-channel feature map: RGB (3), Plucker ray
map (6), normalized timestamp (1), patchified into flat tokens and then
linearly embedded. Conventions fixed here: rays pass through pixel
centers, camera frame is x-right / y-down / z-forward, poses are
camera-to-world.

The frame manifest format (one scene capture) is a text file

    frames <count> <H> <W>
    frame <index> pose <16 floats, row-major camera-to-world> intr <fx> <fy> <cx> <cy> rgb <relpath>

with each rgb file holding H*W*3 bytes, 8-bit, row-major.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor, matmul

POSE_TOL = 1e-8


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-world transform plus pinhole intrinsics in pixels."""

    camera_to_world: np.ndarray  # (4,4)
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        object.__setattr__(self, "camera_to_world", m)
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > POSE_TOL:
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > POSE_TOL:
            raise ValueError("rotation block must have determinant +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]


@dataclass(frozen=True)
class FrameBundle:
    """One posed frame: image in [0,1], pose, normalized timestamp, role."""

    image: np.ndarray  # (H,W,3)
    pose: CameraPose
    t: float
    role: str  # "input" | "target"

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("image must be HxWx3")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("pixel values must lie in [0,1]")
        object.__setattr__(self, "image", img)
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("timestamp must lie in [0,1]")
        if self.role not in ("input", "target"):
            raise ValueError(f"unknown role {self.role!r}")


def look_at_pose(eye, target, intrinsics, world_up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at `eye` looking at `target`; x-right, y-down, z-forward."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(world_up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("view direction parallel to world up")
    right /= nr
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return CameraPose(m, intrinsics)


def _pixel_dirs(pose: CameraPose, h: int, w: int) -> np.ndarray:
    """Unit world-frame ray directions through pixel centers, (H,W,3)."""
    fx, fy, cx, cy = pose.intrinsics
    if fx == 0 or fy == 0:
        raise ValueError("degenerate intrinsics")
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    dx = (jj + 0.5 - cx) / fx
    dy = (ii + 0.5 - cy) / fy
    r = pose.rotation
    dirs = r[:, 0] * dx[..., None] + r[:, 1] * dy[..., None] + r[:, 2]
    return dirs / np.sqrt((dirs ** 2).sum(-1, keepdims=True))


def pluecker_map(pose: CameraPose, h: int, w: int) -> np.ndarray:
    """Per-pixel ray as (direction, origin x direction), shape (H,W,6)."""
    if h < 1 or w < 1:
        raise ValueError("empty image plane")
    d = _pixel_dirs(pose, h, w)
    m = np.cross(np.broadcast_to(pose.translation, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def assemble_features(image: np.ndarray, pmap: np.ndarray, t: float,
                      h: int, w: int) -> np.ndarray:
    """Concatenate (RGB, Plucker, timestamp) into an (H,W,10) map."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (h, w, 3) or pmap.shape != (h, w, 6):
        raise ValueError("inconsistent feature shapes")
    tmap = np.full((h, w, 1), float(t))
    return np.concatenate([image, pmap, tmap], axis=-1)


def patchify(fmap: np.ndarray, p: int) -> np.ndarray:
    """Non-overlapping p x p patches, row-major patch order, flattened
    channel-last: (H/p * W/p, C * p^2)."""
    h, w, c = fmap.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    x = fmap.reshape(h // p, p, w // p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    """Inverse of patchify."""
    n, width = tokens.shape
    c = width // (p * p)
    if n != (h // p) * (w // p) or width != p * p * c:
        raise ValueError("token grid does not match image size")
    x = tokens.reshape(h // p, w // p, p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, c)


def embed_tokens(tokens, projection: Tensor) -> Tensor:
    """Bias-free linear embedding of flat patch tokens."""
    tokens = tokens if isinstance(tokens, Tensor) else tape.constant(tokens)
    return matmul(tokens, projection)


def normalize_poses(poses: list[CameraPose]) -> list[CameraPose]:
    """Shift translations so their mean is the origin; rotations unchanged."""
    if not poses:
        raise ValueError("no poses")
    mean = np.mean([p.translation for p in poses], axis=0)
    out = []
    for p in poses:
        m = p.camera_to_world.copy()
        m[:3, 3] -= mean
        out.append(CameraPose(m, p.intrinsics))
    return out


def normalize_timestamps(frame_indices, window_start: int, window_len: int) -> np.ndarray:
    """Linear rescale of frame indices to [0,1] within the sampled window;
    a single-frame window maps to 0."""
    idx = np.asarray(frame_indices, dtype=np.float64)
    if np.any(idx < window_start) or np.any(idx >= window_start + window_len):
        raise ValueError("frame index outside the window")
    if window_len <= 1:
        return np.zeros_like(idx)
    return (idx - window_start) / (window_len - 1)


def build_target_query(pose: CameraPose, t: float, h: int, w: int, p: int) -> np.ndarray:
    """Flat patch tokens for a view-time query: appearance channels zero,
    camera and time channels populated."""
    pmap = pluecker_map(pose, h, w)
    feat = assemble_features(np.zeros((h, w, 3)), pmap, t, h, w)
    return patchify(feat, p)


def rope_rotation(dim: int, n_rot: int, t: float,
                  freq_lo: float = 1.0, freq_hi: float = 100.0) -> np.ndarray:
    """Block-diagonal rotation over the first n_rot channels, angle w_j * t
    with geometric frequencies."""
    if n_rot % 2 or n_rot > dim:
        raise ValueError("n_rot must be even and at most dim")
    rot = np.eye(dim)
    m = n_rot // 2
    if m == 0:
        return rot
    freqs = freq_lo * (freq_hi / freq_lo) ** (np.arange(m) / max(m - 1, 1))
    ang = freqs * t
    c, s = np.cos(ang), np.sin(ang)
    for j in range(m):
        rot[2 * j, 2 * j] = c[j]
        rot[2 * j, 2 * j + 1] = -s[j]
        rot[2 * j + 1, 2 * j] = s[j]
        rot[2 * j + 1, 2 * j + 1] = c[j]
    return rot


def rope_time(tokens, t: float, n_rot: int,
              freq_lo: float = 1.0, freq_hi: float = 100.0):
    """Rotate the first n_rot channels of every token by the frame time."""
    rot = rope_rotation(
        tokens.shape[-1], n_rot, t, freq_lo, freq_hi)
    if isinstance(tokens, Tensor):
        return matmul(tokens, tape.constant(rot.T))
    return tokens @ rot.T


# -- frame manifest ---------------------------------------------------------

def save_frame_manifest(path: str, frames: list[tuple[int, CameraPose, np.ndarray]]) -> None:
    """Write a manifest plus raw 8-bit RGB files next to it."""
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    if not frames:
        raise ValueError("no frames")
    h, w, _ = frames[0][2].shape
    lines = [f"frames {len(frames)} {h} {w}"]
    for idx, pose, image in frames:
        if image.shape != (h, w, 3):
            raise ValueError("all frames must share a resolution")
        rel = f"frame_{idx:05d}.rgb"
        q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        with open(os.path.join(root, rel), "wb") as fh:
            fh.write(q.tobytes())
        posestr = " ".join(repr(float(v)) for v in pose.camera_to_world.reshape(-1))
        intr = " ".join(repr(float(v)) for v in pose.intrinsics)
        lines.append(f"frame {idx} pose {posestr} intr {intr} rgb {rel}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_frame_manifest(path: str) -> list[tuple[int, CameraPose, np.ndarray]]:
    """Read a manifest written by save_frame_manifest."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if head[0] != "frames" or len(head) != 4:
        raise ValueError("not a frame manifest")
    count, h, w = (int(v) for v in head[1:])
    frames = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "frame" or parts[2] != "pose" or parts[19] != "intr" or parts[24] != "rgb":
            raise ValueError(f"malformed manifest line: {ln[:60]}...")
        idx = int(parts[1])
        m = np.array([float(v) for v in parts[3:19]]).reshape(4, 4)
        intr = tuple(float(v) for v in parts[20:24])
        with open(os.path.join(root, parts[25]), "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype=np.uint8)
        image = raw.reshape(h, w, 3).astype(np.float64) / 255.0
        frames.append((idx, CameraPose(m, intr), image))
    if len(frames) != count:
        raise ValueError("frame count mismatch")
    return frames
