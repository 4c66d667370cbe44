"""Flat ``key = value`` configuration covering every tunable dataclass.

Keys are ``section.field``; sections map to the config dataclasses below.
Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
unparsable values are errors that carry ``path:line``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .evaluation import EvalConfig
from .head import OptimConfig
from .loss import LossConfig
from .postproc import PostprocConfig
from .synth import SceneConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "scene": SceneConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "post": PostprocConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    post: PostprocConfig = field(default_factory=PostprocConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{lo:g}-{hi:g}" for lo, hi in v)
        return ",".join(str(int(x)) for x in v)
    return str(v)


def _parse(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [t.strip() for t in raw.split(",") if t.strip()]
        if default and isinstance(default[0], tuple):
            out = []
            for it in items:
                lo, sep, hi = it.partition("-")
                if not sep:
                    raise ValueError(f"bucket {it!r} is not of the form min-max")
                out.append((float(lo), float(hi)))
            return tuple(out)
        return tuple(int(x) for x in items)
    return raw


def dump_config(cfg: Config = Config()) -> str:
    lines = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"# {name}")
        for f in dataclasses.fields(sec):
            lines.append(f"{name}.{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: Config, items, where: str = "<override>") -> Config:
    """Apply ``(key, value, location)`` triples; locations label any error."""
    values = {name: {} for name in SECTIONS}
    seen = {}
    for key, raw, loc in items:
        section, _, fname = key.partition(".")
        if section not in SECTIONS or fname not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigError(f"{loc}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{loc}: duplicate key {key!r} (first set at {seen[key]})")
        seen[key] = loc
        default = getattr(getattr(cfg, section), fname)
        try:
            values[section][fname] = _parse(raw, default)
        except ValueError as e:
            raise ConfigError(f"{loc}: bad value for {key}: {e}") from e
    out = {}
    for name in SECTIONS:
        try:
            out[name] = dataclasses.replace(getattr(cfg, name), **values[name])
        except (ValueError, TypeError) as e:
            locs = ", ".join(seen[f"{name}.{k}"] for k in values[name]) or where
            raise ConfigError(f"{locs}: invalid {name} settings: {e}") from e
    return Config(**out)


def parse_config_text(text: str, where: str = "<config>", base: Config = Config()) -> Config:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        if not sep:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {line.strip()!r}")
        items.append((key.strip(), raw.strip(), f"{where}:{lineno}"))
    return apply_overrides(base, items, where)


def load_config(path, overrides=()) -> Config:
    """Read a config file (or defaults when ``path`` is None) then apply ``key=value`` overrides."""
    cfg = Config()
    if path is not None:
        with open(path) as f:
            cfg = parse_config_text(f.read(), str(path))
    items = []
    for i, ov in enumerate(overrides, 1):
        key, sep, raw = ov.partition("=")
        if not sep:
            raise ConfigError(f"--set #{i}: expected key=value, got {ov!r}")
        items.append((key.strip(), raw.strip(), f"--set {key.strip()}"))
    return apply_overrides(cfg, items) if items else cfg
