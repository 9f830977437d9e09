"""Nested run configuration: defaults < JSON file < command-line overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "classifier": {
        "backend": "stub",
        "temperature": 100.0,
        "adapter_lr": 3e-3,
        "adapter_epochs": 400,
        "adapter_weight_decay": 1e-2,
    },
    "restorer": {
        "base_channels": 16,
        "blocks": [2, 2, 2, 2],
        "heads": [1, 2, 4, 8],
        "ffn_expansion": 2.0,
        "text_guidance": "on",
        "attn_normalize": True,
    },
    "loss": {
        "gamma1": 0.6,
        "gamma2": 0.3,
        "gamma3": 0.1,
        "lambda1": 1.0,
        "lambda2": 1.0,
        # 5 needs 176px inputs; desk crops of 64px use the 3-scale variant
        "msssim_scales": 3,
        "msssim_weights": [0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        "vgg_taps": [3, 8, 15],
        "vgg_weights": "random",
        "negatives": 2,
    },
    "train": {
        "epochs": 30,
        "max_steps": None,
        "batch_size": 8,
        "lr": 1e-3,
        "lr_min": 1e-6,
        "beta1": 0.9,
        "beta2": 0.999,
        "crop": 64,
        "checkpoint_every": 0,
        "deterministic": True,
    },
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} expects a mapping")
            out[k] = merge(out[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = merge(cfg, raw)
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    return cfg


def get_dotted(cfg: dict, key: str):
    node = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    return node


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_value(text: str):
    """Interpret a ``--set`` value as JSON when possible, else as a plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("on", "true", "yes", "1"):
        return True
    if isinstance(value, str) and value.lower() in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def restorer_config(cfg: dict):
    from .restorer import RestorerConfig

    r = cfg["restorer"]
    return RestorerConfig(
        base_channels=int(r["base_channels"]),
        blocks=tuple(r["blocks"]),
        heads=tuple(r["heads"]),
        ffn_expansion=float(r["ffn_expansion"]),
        text_guidance=as_bool(r["text_guidance"]),
        attn_normalize=as_bool(r["attn_normalize"]),
    )


def loss_weights(cfg: dict):
    from .losses import LossWeights

    lo = cfg["loss"]
    return LossWeights(
        gamma1=float(lo["gamma1"]), gamma2=float(lo["gamma2"]), gamma3=float(lo["gamma3"]),
        lambda1=float(lo["lambda1"]), lambda2=float(lo["lambda2"]),
        msssim_weights=tuple(lo["msssim_weights"]), msssim_scales=int(lo["msssim_scales"]),
    )
