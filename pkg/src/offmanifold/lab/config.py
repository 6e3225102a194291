"""Experiment configuration: TOML files with [world] [model] [objective] [schedule] [grid] [metrics] [regimes]."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("world", "model", "objective", "schedule", "grid", "metrics", "regimes")
OBJECTIVES = ("ce", "gradnorm", "smoothness", "randsmooth", "pgd", "mse")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "world": {"preset": "subspace-2of8", "n_train": 2000, "n_test": 1000, "train_seed": 1, "test_seed": 2,
              "params": {}},
    "model": {"hidden": [64, 64], "activation": "softplus"},
    "objective": {},
    "schedule": {"epochs": 20, "batch_size": 64, "lr": 0.02, "decay_epochs": [15], "decay_factor": 0.1,
                 "momentum": 0.9, "weight_decay": 0.0},
    "grid": {"seeds": [0]},
    "metrics": {"n_points": 50, "radius": 4.0, "n_draws": 50, "output": "probs", "rho_sigma": 1e-3,
                "rho_n": 10000, "rho_points": 20, "n_dump": 5, "seed": 0},
    "regimes": {"delta_acc": 0.05},
}


# world keys that only apply to the MNIST distractor data
MNIST_WORLD = {"images": "", "labels": "", "n_digits": 5000, "placement_seed": 0, "n_test": 1000, "test_seed": 1}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def grid_points(cfg: dict) -> list[tuple[str, float]]:
    """(objective, value) pairs in config order; seeds are the inner loop."""
    return [(name, float(v)) for name, vals in cfg["grid"].items() if name != "seeds" for v in vals]


def validate(cfg: dict) -> dict:
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    defaults = DEFAULTS
    if cfg.get("world", {}).get("preset") == "mnist-distractor":
        defaults = _merge(DEFAULTS, {"world": MNIST_WORLD})
    cfg = _merge(defaults, cfg)
    for name in cfg["grid"]:
        if name != "seeds" and name not in OBJECTIVES:
            raise ConfigError(f"unknown objective '{name}' in [grid]")
        if not isinstance(cfg["grid"][name], list):
            raise ConfigError(f"[grid] {name} must be a list")
    for name in cfg["objective"]:
        if name not in OBJECTIVES:
            raise ConfigError(f"unknown objective '{name}' in [objective]")
    from ..training import make_objective

    for name, value in grid_points(cfg):
        kw = {k: v for k, v in cfg["objective"].get(name, {}).items() if k != "eps_scale"}
        try:
            make_objective(name, value, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[grid] {name} = {value}: {exc}") from exc
    if not cfg["grid"]["seeds"]:
        raise ConfigError("[grid] seeds must not be empty")
    if cfg["metrics"]["output"] not in ("probs", "logits"):
        raise ConfigError("[metrics] output must be 'probs' or 'logits'")
    if not 0 <= cfg["regimes"]["delta_acc"] < 1:
        raise ConfigError("[regimes] delta_acc must lie in [0, 1)")
    return cfg


def parse(text: str) -> dict:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return validate(raw)


def load(path=None, preset: str | None = None, overrides: dict | None = None) -> dict:
    """Config from a preset, a file, or both (file values override the preset)."""
    from .presets import PRESETS

    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
        raw = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            raw = _merge(raw, tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
    if preset is None and path is None:
        raise ConfigError("need --config or --preset")
    return validate(_merge(raw, overrides or {}))


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps(cfg: dict) -> str:
    """Write a config back out as TOML (tables nested one level at most below a section)."""
    lines = []
    for section in SECTIONS:
        body = cfg.get(section, {})
        flat = {k: v for k, v in body.items() if not isinstance(v, dict)}
        nested = {k: v for k, v in body.items() if isinstance(v, dict)}
        lines.append(f"[{section}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in flat.items()]
        lines.append("")
        for k, sub in nested.items():
            lines.append(f"[{section}.{json.dumps(k) if '+' in k or '-' in k else k}]")
            lines += [f"{kk} = {_toml_value(vv)}" for kk, vv in sub.items()]
            lines.append("")
    return "\n".join(lines)
