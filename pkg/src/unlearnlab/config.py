"""Run configuration: nested defaults, strict validation, hashing, presets.

A run config is one nested JSON document covering the world, model geometry,
schedule, training, unlearning, and evaluation.  User files are partial
overlays on the defaults; unknown keys anywhere in the tree are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import pathlib

__all__ = ["ConfigError", "CONFIG_ENV_VAR", "default_config", "load_config",
           "merge_config", "apply_paper_hparams", "config_hash", "config_to_json"]

CONFIG_ENV_VAR = "UNLEARNLAB_CONFIG"
FORMAT_VERSION = 1

# Table-1 preset: the reference hyperparameters verbatim.  The default lr
# below is recalibrated for this stack (see eval thresholds note); the preset
# restores the published numbers exactly.
PAPER_HPARAMS = {
    "epochs": 5,
    "batch_size": 2,
    "k": 4,
    "lr": 1e-5,
    "weight_decay": 1e-8,
    "beta1": 0.9,
    "beta2": 0.98,
}


class ConfigError(ValueError):
    """A config document that cannot be accepted as-is."""


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


_DEFAULTS = {
    "format_version": FORMAT_VERSION,
    "seed": 0,
    "world": {
        "resolution": 16,
        "frames": 8,
        "image_corpus": 1536,
        "video_corpus": 256,
        "corpus_seed": 11,
    },
    "model": {
        "d_text": 64,
        "n_blocks": 2,
        "n_heads": 4,
        "widths": [32, 64, 64],
        "d_time": 64,
        "codec": "identity",
        "init_seed": 0,
    },
    "schedule": {
        "T": 80,
        "kind": "linear_beta",
    },
    "training": {
        "image": {
            "epochs": 48,
            "batch_size": 8,
            "lr": 2e-3,
            "lr_final": 2e-4,
            "p_uncond": 0.1,
            "seed": 0,
        },
        "video": {
            "epochs": 8,
            "batch_size": 4,
            "lr": 2e-3,
            "lr_final": None,
            "p_uncond": 0.1,
            "seed": 0,
        },
        "probe": {
            "corpus_seed": 0,
            "seed": 0,
            "epochs": 30,
            "batch_size": 128,
            "lr": 3e-3,
        },
    },
    "unlearn": {
        "epochs": 5,
        "batch_size": 2,
        "k": 4,
        "lr": 1e-3,
        "weight_decay": 1e-8,
        "beta1": 0.9,
        "beta2": 0.98,
        "seed": 0,
        "max_drift": 0.5,
        "source": "model_generated",
    },
    "eval": {
        "efficacy_drop": 0.5,      # required relative drop on target prompts
        "retention_tol": 0.1,      # allowed absolute change on unrelated prompts
        "seeds": [0, 1, 2],
        "ablation_seeds": [0, 1, 2, 3, 4],
        "batteries_version": 1,
        "sampling": {
            "guidance": 3.0,
            "clip_x0": True,
        },
    },
    "paths": {
        "workspace": "runs",
    },
}


def merge_config(base: dict, overlay: dict, _path: str = "") -> dict:
    """Deep-merge ``overlay`` onto ``base``, rejecting keys base doesn't have."""
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{_path}.{key}" if _path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = merge_config(current, value, where)
        else:
            if current is not None and value is not None:
                same_kind = isinstance(value, type(current))
                numeric = (isinstance(current, (int, float)) and
                           isinstance(value, (int, float)) and
                           not isinstance(value, bool) and
                           not isinstance(current, bool))
                if not (same_kind or numeric):
                    raise ConfigError(
                        f"config key {where!r} expects {type(current).__name__}, "
                        f"got {type(value).__name__}")
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | os.PathLike | None = None) -> dict:
    """Defaults overlaid with a user file (explicit path, else the env var)."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    cfg = default_config()
    if path is not None:
        p = pathlib.Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        version = doc.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        cfg = merge_config(cfg, doc)
    return cfg


def apply_paper_hparams(config: dict) -> dict:
    """Overlay the Table-1 unlearning hyperparameters onto a config."""
    return merge_config(config, {"unlearn": copy.deepcopy(PAPER_HPARAMS)})


def config_to_json(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True)


def config_hash(config: dict) -> str:
    """Stable short hash of the canonical JSON form (run-directory naming)."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
