"""Flat key-value engine configuration.

Config files are plain ``key = value`` lines (``#`` comments allowed);
keys use the dotted names listed in ``KEY_TO_FIELD``.  CLI flags and
``--set`` overrides funnel through the same mapping.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .tensor import ConfigError

KEY_TO_FIELD = {
    "encoder.seed": "encoder_seed",
    "encoder.ck": "ck",
    "encoder.cv": "cv",
    "decoder.seed": "decoder_seed",
    "decoder.hidden": "decoder_hidden",
    "memory.pattern": "pattern",
    "memory.theta": "theta",
    "memory.strategy": "strategy",
    "memory.lambda": "ema_lambda",
    "sam.seed": "sam_seed",
    "sam.pool": "sam_pool",
    "sam.aspp_rates": "aspp_rates",
    "readout.topk": "topk",
    "loss.mu": "mu",
    "loss.gamma": "gamma",
    "loss.bootstrap_ratio": "bootstrap_ratio",
    "perturb.radius_max": "radius_max",
    "train.lr": "lr",
    "train.steps": "steps",
    "train.seed": "train_seed",
    "output.mask_format": "mask_format",
}


@dataclass(frozen=True)
class EngineConfig:
    encoder_seed: int = 11
    ck: int = 64
    cv: int = 512
    decoder_seed: int = 17
    decoder_hidden: int = 32
    pattern: str = "sam"
    theta: int = 3
    strategy: str = "2F & L & RDE"
    ema_lambda: float = 0.5
    sam_seed: int = 13
    sam_pool: int = 2
    aspp_rates: tuple = (1, 2, 4)
    topk: int = 40
    mu: float = 10.0
    gamma: float = 10.0
    bootstrap_ratio: float = 1.0
    radius_max: int = 5
    lr: float = 1e-2
    steps: int = 200
    train_seed: int = 3
    mask_format: str = "text"

    def override(self, items: dict) -> "EngineConfig":
        """New config with dotted-key overrides applied."""
        updates = {}
        types = {f.name: f.type for f in fields(self)}
        for key, raw in items.items():
            if key not in KEY_TO_FIELD:
                raise ConfigError(f"unknown config key {key!r}")
            name = KEY_TO_FIELD[key]
            updates[name] = _coerce(name, raw, types[name], getattr(self, name))
        return replace(self, **updates)


def _coerce(name, raw, _annot, current):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(part) for part in raw.replace("(", "").replace(")", "").split(","))
    return raw


def parse_config_text(text: str) -> dict:
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def load_config(path=None, overrides: dict | None = None) -> EngineConfig:
    """Defaults, then file values, then explicit overrides."""
    cfg = EngineConfig()
    if path is not None:
        with open(path) as fh:
            cfg = cfg.override(parse_config_text(fh.read()))
    if overrides:
        cfg = cfg.override(overrides)
    return cfg
