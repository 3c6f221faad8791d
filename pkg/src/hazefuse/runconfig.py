"""Declarative run configuration: JSON file + CLI overrides -> resolved echo.

A resolved config is self-contained; re-running any command from the echo
written into the output directory reproduces the run byte-for-byte. The
schema id is versioned so stale configs fail loudly.
"""

from __future__ import annotations

import copy
import json
import os

from .errors import ConfigError

SCHEMA_ID = "hazefuse/runconfig-v1"

DEFAULTS = {
    "schema": SCHEMA_ID,
    "out": "runs/out",
    "scenes": {
        "count": 512,
        "height": 32,
        "width": 32,
        "difficulty": 1.0,
        "seed": 1000,
        "val_count": 32,
    },
    "haze": {
        "betas": [0.04, 0.0704, 0.1008, 0.1312, 0.1616, 0.20],
        "atmospheric_light": 0.9,
    },
    "net": {
        "base_channels": 8,
        "levels": 2,
        "blocks_per_level": 1,
        "global_residual": True,
        "fusion_attach": 0,
    },
    "fusion": {
        "depth_channels": 4,
        "heads": 2,
        "use_pre_zc": True,
        "use_post_zc": True,
        "asg_layers": 2,
        "hgdf_blocks": 1,
        "dai_mode": "channel",
    },
    "depth": {
        "provider": "oracle",
        "sigma": 0.5,
        "blur_k": 1,
        "seed": 7,
        "file": None,
    },
    "train": {
        "lr_max": 4e-4,
        "lr_min": 1e-8,
        "cycle_steps": 150,
        "cycle_mult": 1,
        "total_steps": 300,
        "batch_size": 8,
        "seed": 0,
        "freeze_backbone_in_stage2": False,
        "loss": "l1",
        "grad_accum": 1,
    },
}

_BOOL_STRINGS = {"true": True, "false": False}


def load_config(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON: {exc}")


def _coerce(value):
    low = value.lower()
    if low in _BOOL_STRINGS:
        return _BOOL_STRINGS[low]
    if low in ("null", "none"):
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    if value.startswith("["):
        return json.loads(value)
    return value


def apply_overrides(cfg, overrides):
    """Apply 'section.key=value' strings on top of a config dict."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
        node[keys[-1]] = _coerce(value)
    return cfg


def _merge(defaults, user, path, violations):
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if not isinstance(uval, dict):
                    violations.append(f"{path}{key}: expected a section, got {type(uval).__name__}")
                    out[key] = copy.deepcopy(dval)
                else:
                    out[key] = _merge(dval, uval, f"{path}{key}.", violations)
            else:
                out[key] = uval
        else:
            out[key] = copy.deepcopy(dval)
    for key in user:
        if key not in defaults:
            violations.append(f"{path}{key}: unknown key")
    return out


def _check(cond, msg, violations):
    if not cond:
        violations.append(msg)


def validate(cfg):
    """All schema violations of a fully merged config (empty when valid)."""
    v = []
    _check(cfg.get("schema") == SCHEMA_ID,
           f"schema: expected {SCHEMA_ID!r}, got {cfg.get('schema')!r}", v)
    sc = cfg["scenes"]
    _check(isinstance(sc["count"], int) and sc["count"] >= 1,
           f"scenes.count: must be int >= 1, got {sc['count']}", v)
    for dim in ("height", "width"):
        val = sc[dim]
        _check(isinstance(val, int) and val >= 16 and val % 2 == 0,
               f"scenes.{dim}: must be even int >= 16, got {val}", v)
    _check(isinstance(sc["difficulty"], (int, float)) and sc["difficulty"] >= 0,
           f"scenes.difficulty: must be a number >= 0, got {sc['difficulty']}", v)
    _check(isinstance(sc["val_count"], int) and 0 <= sc["val_count"] < sc["count"],
           f"scenes.val_count: must be int in [0, count), got {sc['val_count']}", v)

    hz = cfg["haze"]
    betas = hz["betas"]
    _check(isinstance(betas, list) and len(betas) >= 1,
           f"haze.betas: must be a non-empty list, got {betas}", v)
    if isinstance(betas, list) and betas:
        _check(all(isinstance(b, (int, float)) and b >= 0 for b in betas),
               f"haze.betas: entries must be numbers >= 0, got {betas}", v)
        _check(all(b1 < b2 for b1, b2 in zip(betas, betas[1:])),
               f"haze.betas: must be strictly ascending, got {betas}", v)
    a = hz["atmospheric_light"]
    _check(isinstance(a, (int, float)) and 0 < a <= 1,
           f"haze.atmospheric_light: must lie in (0, 1], got {a}", v)

    net = cfg["net"]
    _check(isinstance(net["levels"], int) and net["levels"] >= 1,
           f"net.levels: must be int >= 1, got {net['levels']}", v)
    _check(isinstance(net["base_channels"], int) and net["base_channels"] >= 1,
           f"net.base_channels: must be int >= 1, got {net['base_channels']}", v)
    _check(isinstance(net["blocks_per_level"], int) and net["blocks_per_level"] >= 1,
           f"net.blocks_per_level: must be int >= 1, got {net['blocks_per_level']}", v)
    if isinstance(net["levels"], int) and net["levels"] >= 1:
        _check(isinstance(net["fusion_attach"], int) and 0 <= net["fusion_attach"] < net["levels"],
               f"net.fusion_attach: must be in [0, levels), got {net['fusion_attach']}", v)
        div = 1 << (net["levels"] - 1)
        for dim in ("height", "width"):
            if isinstance(sc[dim], int):
                _check(sc[dim] % div == 0,
                       f"scenes.{dim}: must be divisible by 2^(levels-1)={div}, got {sc[dim]}", v)

    fu = cfg["fusion"]
    _check(isinstance(fu["heads"], int) and fu["heads"] >= 1,
           f"fusion.heads: must be int >= 1, got {fu['heads']}", v)
    _check(isinstance(fu["depth_channels"], int) and fu["depth_channels"] >= 1,
           f"fusion.depth_channels: must be int >= 1, got {fu['depth_channels']}", v)
    _check(isinstance(fu["hgdf_blocks"], int) and fu["hgdf_blocks"] >= 1,
           f"fusion.hgdf_blocks: must be int >= 1, got {fu['hgdf_blocks']}", v)
    _check(isinstance(fu["asg_layers"], int) and fu["asg_layers"] >= 1,
           f"fusion.asg_layers: must be int >= 1, got {fu['asg_layers']}", v)
    _check(fu["dai_mode"] in ("channel", "spatial"),
           f"fusion.dai_mode: must be channel|spatial, got {fu['dai_mode']!r}", v)
    if all(isinstance(x, int) for x in (net["base_channels"], net["fusion_attach"], fu["heads"])):
        attach_c = net["base_channels"] * (1 << net["fusion_attach"])
        _check(attach_c % fu["heads"] == 0,
               f"fusion.heads: attach channels {attach_c} not divisible by {fu['heads']}", v)

    dp = cfg["depth"]
    _check(dp["provider"] in ("oracle", "degraded", "file"),
           f"depth.provider: must be oracle|degraded|file, got {dp['provider']!r}", v)
    _check(isinstance(dp["sigma"], (int, float)) and dp["sigma"] >= 0,
           f"depth.sigma: must be a number >= 0, got {dp['sigma']}", v)
    _check(isinstance(dp["blur_k"], int) and dp["blur_k"] >= 1 and dp["blur_k"] % 2 == 1,
           f"depth.blur_k: must be odd int >= 1, got {dp['blur_k']}", v)

    tr = cfg["train"]
    _check(all(isinstance(tr[k], (int, float)) for k in ("lr_min", "lr_max"))
           and tr["lr_min"] < tr["lr_max"],
           f"train: need numeric lr_min < lr_max, got {tr['lr_min']} vs {tr['lr_max']}", v)
    _check(isinstance(tr["cycle_steps"], int) and tr["cycle_steps"] >= 1,
           f"train.cycle_steps: must be int >= 1, got {tr['cycle_steps']}", v)
    _check(isinstance(tr["cycle_mult"], int) and tr["cycle_mult"] >= 1,
           f"train.cycle_mult: must be int >= 1, got {tr['cycle_mult']}", v)
    _check(isinstance(tr["total_steps"], int) and tr["total_steps"] >= 1,
           f"train.total_steps: must be int >= 1, got {tr['total_steps']}", v)
    _check(isinstance(tr["batch_size"], int) and tr["batch_size"] >= 1,
           f"train.batch_size: must be int >= 1, got {tr['batch_size']}", v)
    _check(tr["loss"] in ("l1", "l2"),
           f"train.loss: must be 'l1' or 'l2', got {tr['loss']!r}", v)
    if isinstance(tr["batch_size"], int) and isinstance(tr["grad_accum"], int):
        _check(tr["grad_accum"] >= 1 and tr["batch_size"] % tr["grad_accum"] == 0,
               f"train.grad_accum: must divide batch_size, got {tr['grad_accum']}", v)
    return v


def resolve(raw=None, overrides=None):
    """Merge user config over defaults, apply overrides, validate."""
    raw = copy.deepcopy(raw) if raw else {}
    apply_overrides(raw, overrides)
    violations = []
    merged = _merge(DEFAULTS, raw, "", violations)
    violations += validate(merged)
    if violations:
        raise ConfigError("config invalid: " + "; ".join(violations), violations)
    return merged


def dump(cfg, path):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def config_bytes(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()


def worker_count():
    """Worker cap from HAZEFUSE_THREADS (default 1)."""
    raw = os.environ.get("HAZEFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HAZEFUSE_THREADS must be an integer, got {raw!r}")
    return max(1, n)
