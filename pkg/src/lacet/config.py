"""Run configuration: a flat text key-value format plus typed defaults.

Config files hold `key = value` lines (# starts a comment). Grid files for
the ablation runner hold one config path per line followed by optional
`key=value` overrides. Unknown keys and malformed values raise
ConfigError, which the CLI maps to a usage error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model.*
    blocks: int = 2
    dim: int = 64
    attn_heads: int = 2
    head_dim: int = 32
    ffn_hidden: int = 128
    fw_dim: int = 64
    fw_hidden: int = 128
    patch: int = 8
    window_tokens: int = 32
    time_encoding: str = "timestamp"  # or "rope"
    rope_channels: int = 16
    fw_base_lr: float = 1.0
    use_muon: bool = False
    ns_iters: int = 5
    # elastic.*
    lam: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5
    policy: str = "streaming_ema"
    estimator: str = "si"
    # chunks.* (exactly one of size/count may be positive)
    chunk_size: int = 32
    chunk_count: int = 0
    # train.*
    base_lr: float = 3e-3
    warmup_steps: int = 100
    total_steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.05
    mu: float = 0.5
    l2_warmup: int = 0
    batch_size: int = 1
    seed: int = 0
    report_ema_decay: float = 0.1
    checkpoint_every: int = 0
    perceptual: str = ""  # name of a registered perceptual plug-in, or empty
    # data.*
    image_size: int = 32
    n_input: int = 8
    n_target: int = 8
    total_frames: int = 64
    window_len: int = 32
    mode: str = "sparse"
    n_blobs: int = 3
    scene_seed: int = 0
    orbit_radius: float = 3.0
    orbit_height: float = 1.2
    orbit_turns: float = 1.0
    jitter: float = 0.1
    eval_episodes: int = 4

    def __post_init__(self):
        if (self.chunk_size > 0) == (self.chunk_count > 0):
            raise ConfigError("set exactly one of chunks.size and chunks.count")
        if self.time_encoding not in ("timestamp", "rope"):
            raise ConfigError(f"unknown time encoding {self.time_encoding!r}")
        if self.image_size % self.patch:
            raise ConfigError("patch must divide the image size")


KEY_MAP = {
    "model.blocks": "blocks",
    "model.dim": "dim",
    "model.attn_heads": "attn_heads",
    "model.head_dim": "head_dim",
    "model.ffn_hidden": "ffn_hidden",
    "model.fw_dim": "fw_dim",
    "model.fw_hidden": "fw_hidden",
    "model.patch": "patch",
    "model.window_tokens": "window_tokens",
    "model.time_encoding": "time_encoding",
    "model.rope_channels": "rope_channels",
    "model.fw_base_lr": "fw_base_lr",
    "model.use_muon": "use_muon",
    "model.ns_iters": "ns_iters",
    "elastic.lambda": "lam",
    "elastic.alpha": "alpha",
    "elastic.beta": "beta",
    "elastic.policy": "policy",
    "elastic.estimator": "estimator",
    "chunks.size": "chunk_size",
    "chunks.count": "chunk_count",
    "train.base_lr": "base_lr",
    "train.warmup_steps": "warmup_steps",
    "train.total_steps": "total_steps",
    "train.beta1": "adam_beta1",
    "train.beta2": "adam_beta2",
    "train.weight_decay": "weight_decay",
    "train.mu": "mu",
    "train.l2_warmup": "l2_warmup",
    "train.batch_size": "batch_size",
    "train.seed": "seed",
    "train.report_ema_decay": "report_ema_decay",
    "train.checkpoint_every": "checkpoint_every",
    "train.perceptual": "perceptual",
    "data.image_size": "image_size",
    "data.n_input": "n_input",
    "data.n_target": "n_target",
    "data.total_frames": "total_frames",
    "data.window_len": "window_len",
    "data.mode": "mode",
    "data.n_blobs": "n_blobs",
    "data.scene_seed": "scene_seed",
    "data.orbit_radius": "orbit_radius",
    "data.orbit_height": "orbit_height",
    "data.orbit_turns": "orbit_turns",
    "data.jitter": "jitter",
    "data.eval_episodes": "eval_episodes",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(attr: str, raw: str):
    kind = _FIELD_TYPES[attr]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {attr}") from None


def parse_assignments(pairs: list[str]) -> dict:
    """key=value strings (dotted keys) to attribute updates."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = (s.strip() for s in pair.split("=", 1))
        if key not in KEY_MAP:
            raise ConfigError(f"unknown config key {key!r}")
        attr = KEY_MAP[key]
        out[attr] = _coerce(attr, raw)
    return out


def parse_config_text(text: str, overrides: list[str] | None = None) -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        pairs.append(line)
    updates = parse_assignments(pairs)
    if overrides:
        updates.update(parse_assignments(list(overrides)))
    return RunConfig(**updates)


def load_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), overrides)


def format_config(cfg: RunConfig) -> str:
    """Render a config back to the flat file format (stable key order)."""
    lines = []
    for key, attr in KEY_MAP.items():
        val = getattr(cfg, attr)
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> list[tuple[str, list[str]]]:
    """Grid file: one `config-path [key=value ...]` per non-comment line."""
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        rows.append((parts[0], parts[1:]))
    return rows
