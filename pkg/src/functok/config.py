"""Run configuration: defaults, then a JSON/TOML file, then command-line
overrides (flags win). The resolved configuration is embedded in every
artifact the CLI writes."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any

from . import __version__
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

OUT_ENV = "FUNCTOK_OUT"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "deterministic": True,
    "corpus": {
        "path": None,
        "kind": "toy",  # generator used by make-corpus: toy | trait
        "n_docs": 12500,
        "tokenizer": {"mode": "bpe", "vocab_size": 4096},
        "threshold": 0.40,
        "zipf_fit_range": None,
        "burstiness_tokens": [],
        "burstiness_bins": 10,
    },
    "model": {"preset": "desk"},
    "train": {
        "batch_size": 8, "seq_len": 256, "steps": 5000, "warmup": 200, "peak_lr": 3e-3, "floor_lr": 3e-5,
        "weight_decay": 0.1, "grad_clip": 1.0, "log_every": 50,
        "checkpoints": [100, 2000, 5000],
    },
    "acts": {"n_docs": 300, "max_tokens": 256, "layers": [1]},
    "sae": {
        "layer": 1, "width_multiplier": 16, "steps": 3000, "batch_size": 1024, "lr": 1e-3, "bandwidth": 0.02,
        "theta_init": 0.01, "dead_window": 1000, "lambda_warmup": 500, "penalty": "l0",
        "lambda": {"early": 10.0, "intermediate": 4.0, "late": 2.5},
        # presets are quoted for a host of this width; they are scaled by d / width
        "lambda_reference_width": 4096, "threshold_lr": 1e-2,
        "match_tolerance": 0.05, "eval_docs": 64,
    },
    "graph": {"top_k": 10, "random_subsets": 100},
    "steer": {"trait": None, "alphas": [1.0, 2.0, 4.0, 8.0], "raw_alpha": 1.0},
    "prediction": {"prompt": None},
}

FULL_SCALE_SCHEDULE = {"train": {"checkpoints": [3000, 50000, 130000], "steps": 130000, "warmup": 8000,
                            "batch_size": 1024, "seq_len": 4095, "peak_lr": 8e-5, "floor_lr": 8e-7}}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def apply_set(cfg: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value``; the value is read as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)
    return cfg


def resolve(file: str | Path | None = None, sets: list[str] = (), flags: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if file:
        user = load_file(file)
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    for s in sets:
        apply_set(cfg, s)
    for k, v in (flags or {}).items():
        if v is not None:
            apply_set(cfg, f"{k}={json.dumps(v)}")
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    t = cfg["corpus"]["threshold"]
    if not isinstance(t, (int, float)) or not 0 < t <= 1:
        raise ConfigError(f"corpus.threshold must be in (0, 1], got {t!r}")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    ck = cfg["train"]["checkpoints"]
    if sorted(ck) != list(ck) or any(c < 1 for c in ck):
        raise ConfigError("train.checkpoints must be increasing positive step counts")
    if ck and ck[-1] > cfg["train"]["steps"]:
        raise ConfigError("last checkpoint lies beyond train.steps")


def sub_seed(seed: int, stream: str) -> int:
    """Independent seed for a named stage (corpus-sampling, init, batching,
    sae, ...)."""
    h = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def output_root(flag: str | None) -> Path:
    root = flag or os.environ.get(OUT_ENV) or "functok_out"
    return Path(root)


def provenance(cfg: dict) -> dict:
    return {"version": __version__, "config": cfg}


def preamble(cfg: dict, **extra) -> list[str]:
    """CSV comment lines embedding version and configuration."""
    lines = [f"version={__version__}", "config=" + json.dumps(cfg, sort_keys=True, separators=(",", ":"))]
    lines += [f"{k}={v}" for k, v in extra.items()]
    return lines
