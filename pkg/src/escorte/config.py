"""Plain-text ``key = value`` config files (``#`` starts a comment).

Recognized keys per file kind:

reid      dims (in,hidden,out), margin, lr, steps, batch, seed
action    w, d, heads, ff_width, lr, steps, batch, seed, input (embed|raw), reid
corpus    sequences, fps, min_duration, max_duration, max_distractors, sigma,
          occlusion, identities, dim, robot_speed, splits (train,dev,test)
control   cruise_speed, slowed_speed, lag_confirm, stop_confirm,
          prompt_timeout, abort_timeout
"""

from __future__ import annotations

import configparser
import os
from dataclasses import fields
from pathlib import Path

from .action import ActionConfig
from .escortctl import ControlConfig
from .reid import ReidConfig
from .simworld import CorpusSpec


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string("[_]\n" + text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    return dict(cp["_"])


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    p = Path(path)
    try:
        return parse_kv(p.read_text(encoding="utf-8"), str(p))
    except FileNotFoundError:
        raise ConfigError(f"{p}: no such config file") from None


def _build(cls, kv: dict[str, str], extra: dict, source: str):
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in kv.items():
        if key in extra:
            continue
        if key not in types:
            raise ConfigError(f"{source}: unknown key {key!r}")
        default = getattr(cls(), key)
        try:
            if isinstance(default, tuple):
                out[key] = tuple(float(v) for v in raw.split(","))
            elif isinstance(default, bool):
                out[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[key] = int(raw)
            elif isinstance(default, float):
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r}") from None
    return cls(**out)


def reid_config(kv: dict[str, str], source: str = "<config>") -> ReidConfig:
    kv = dict(kv)
    if "dims" in kv:
        try:
            i, h, o = (int(v) for v in kv.pop("dims").split(","))
        except ValueError:
            raise ConfigError(f"{source}: dims must be in,hidden,out") from None
        kv.update(in_dim=str(i), hidden=str(h), out_dim=str(o))
    return _build(ReidConfig, kv, {}, source)


def action_config(kv: dict[str, str], d_in: int, source: str = "<config>") -> ActionConfig:
    cfg = _build(ActionConfig, kv, {"reid": None}, source)
    if "d_in" in kv and int(kv["d_in"]) != d_in:
        raise ConfigError(f"{source}: d_in={kv['d_in']} but the pipeline produces {d_in}")
    if cfg.input not in ("embed", "raw"):
        raise ConfigError(f"{source}: input must be 'embed' or 'raw'")
    if cfg.d % cfg.heads:
        raise ConfigError(f"{source}: d={cfg.d} not divisible by heads={cfg.heads}")
    return ActionConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "d_in": d_in})


def corpus_spec(kv: dict[str, str], source: str = "<config>") -> CorpusSpec:
    spec = _build(CorpusSpec, kv, {}, source)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    return spec


def control_config(kv: dict[str, str], source: str = "<config>") -> ControlConfig:
    cfg = _build(ControlConfig, kv, {}, source)
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg
