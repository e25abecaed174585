"""Line-oriented ``key = value`` configuration with typed defaults."""

from __future__ import annotations

from pathlib import Path

DEFAULTS = {
    "z_dim": 64,
    "w_dim": 64,
    "mapping_layers": 3,
    "resolution": 64,
    "img_channels": 3,
    "seed": 0,
    "iterations": 2000,
    "finetune_iterations": 500,
    "batch_size": 8,
    "learning_rate": 0.002,
    "finetune_learning_rate": 0.002,
    "log_every": 50,
    "style_mixing": 0.9,
    "freeze_d_blocks": 0,
    "r1_gamma": 0.5,
    "swap_depth": 0,
    "distance_samples": 256,
    "inversion_steps": 1000,
    "inversion_learning_rate": 0.05,
    "noise_seed": 0,
    "top_k": 0,
    "split_index": -1,
    "styles": 5,
    "toy_images": 2000,
}


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    return type(default)(raw)


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in DEFAULTS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the file (if any), then non-None ``overrides``."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in DEFAULTS)
