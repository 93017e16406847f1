"""Flat key = value run configuration.

One namespace drives every command: a config file (optional), CLI overrides
on top, and defaults for everything else. Unknown keys are rejected so typos
fail loudly, and the fully resolved mapping is echoed into each run directory
to make runs self-describing.
"""

from __future__ import annotations

import os

from .errors import ConfigError

SEED_ENV_VAR = "DIFFINSPECT_SEED"

DEFAULTS: dict = {
    "data.dir": "",
    "schedule.kind": "linear",
    "schedule.T": 1000,
    "schedule.beta_start": 1.0e-4,
    "schedule.beta_end": 0.02,
    "signal.scale": 2.0,
    "boxes.train": 100,
    "boxes.infer": 500,
    "sampler.steps": 1,
    "sampler.eta": 0.0,
    "sampler.balanced": True,
    "backbone.name": "tiny-cnn",
    "backbone.weights": "",
    "model.channels": 64,
    "model.head_dim": 256,
    "model.pool_size": 7,
    "mask.channels": 8,
    "mask.layers": 3,
    "mask.threshold": 0.5,
    "mask.stride": 8,
    "train.iterations": 30000,
    "train.batch_size": 8,
    "train.lr": 2.5e-5,
    "train.weight_decay": 1.0e-4,
    "train.eval_period": 1000,
    "train.seed": 0,
    "loss.w_cls": 2.0,
    "loss.w_l1": 5.0,
    "loss.w_giou": 2.0,
    "loss.w_mask": 5.0,
    "loss.focal_alpha": 0.25,
    "loss.focal_gamma": 2.0,
    "eval.confidence": 0.5,
    "eval.suppress": True,
    "eval.suppress_iou": 0.6,
    "out.dir": "out",
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    text = raw.strip().strip('"').strip("'")
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return text


def _set(cfg: dict, key: str, raw: str) -> None:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _coerce(key, raw)


def parse_config_text(text: str, cfg: dict, source: str = "<config>") -> set:
    """Apply `key = value` lines to cfg; returns the set of keys seen."""
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        _set(cfg, key, raw)
        seen.add(key)
    return seen


def load_config(path: str | None = None, overrides=()) -> dict:
    """Resolve defaults, optional config file, then CLI overrides.

    The DIFFINSPECT_SEED environment variable supplies train.seed when
    neither file nor overrides set it.
    """
    cfg = dict(DEFAULTS)
    seen: set = set()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        seen |= parse_config_text(text, cfg, source=path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), raw)
        seen.add(key.strip())
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None and "train.seed" not in seen:
        _set(cfg, "train.seed", env_seed)
    return cfg


def echo_config(cfg: dict) -> str:
    """Render the resolved config as sorted `key = value` lines."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(echo_config(cfg))
