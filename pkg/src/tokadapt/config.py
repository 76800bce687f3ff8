"""Flat key=value configuration files.

Blank lines and `#` comments are ignored.  Values are coerced by the target
dataclass's field types; tuples use comma separators and granularity lists
use `m,n` pairs separated by semicolons (e.g. `3,8;5,12`).
"""

from __future__ import annotations

import dataclasses

from .adaptation import AdaptationConfig
from .errors import ConfigError
from .frontend import FrontendConfig
from .hmm import GranularityConfig
from .network import LossWeights
from .synthetic import SyntheticLanguageSpec


def parse_kv_file(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value, typ, key):
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse {value!r} as bool")
    if typ is str:
        return value
    raise ConfigError(f"{key}: unsupported config type {typ}")


def parse_granularities(value):
    grid = []
    for part in value.split(";"):
        part = part.strip()
        if not part:
            continue
        m, n = part.split(",")
        grid.append(GranularityConfig(int(m), int(n)))
    if not grid:
        raise ConfigError("empty granularity list")
    return grid


def _parse_tuple(value, elem_type):
    items = [p.strip() for p in value.split(",") if p.strip()]
    return tuple(elem_type(p) for p in items)


_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type_name(f):
    t = f.type
    return t if isinstance(t, str) else getattr(t, "__name__", str(t))


def load_dataclass(cls, values, prefix=""):
    """Build a dataclass from string key/values, coercing by field type."""
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in names:
            continue
        tname = _field_type_name(names[key])
        if tname in _SCALARS:
            kwargs[key] = _coerce(value, _SCALARS[tname], key)
        elif key == "granularity":
            kwargs[key] = parse_granularities(value)[0]
        elif key == "multi_granularities":
            kwargs[key] = tuple(parse_granularities(value))
        elif key == "methods":
            kwargs[key] = _parse_tuple(value, str)
        elif key == "seeds":
            kwargs[key] = _parse_tuple(value, int)
        elif key in ("fusion_alpha_grid", "si_hidden"):
            elem = float if key == "fusion_alpha_grid" else int
            kwargs[key] = _parse_tuple(value, elem)
        else:
            raise ConfigError(f"don't know how to parse key {key!r}")
    return cls(**kwargs)


def load_adaptation_config(values):
    cfg = load_dataclass(AdaptationConfig, values)
    w_phoneme = float(values.get("w_phoneme", cfg.weights.w_phoneme))
    w_token = float(values.get("w_token", cfg.weights.w_token))
    return dataclasses.replace(cfg, weights=LossWeights(w_phoneme, w_token))


def load_experiment_config(values):
    from .experiment import ExperimentConfig

    cfg = load_dataclass(ExperimentConfig, values)
    return dataclasses.replace(cfg, adaptation=load_adaptation_config(values))


def load_frontend_config(values):
    return load_dataclass(FrontendConfig, values)


def load_language_spec(values):
    return load_dataclass(SyntheticLanguageSpec, values)


def dump_defaults(cls, extras=None):
    """Printable key=value block of a config dataclass's defaults."""
    lines = []
    obj = cls()
    for f in dataclasses.fields(cls):
        value = getattr(obj, f.name)
        if isinstance(value, LossWeights):
            lines.append(f"w_phoneme={value.w_phoneme}")
            lines.append(f"w_token={value.w_token}")
        elif isinstance(value, GranularityConfig):
            lines.append(f"{f.name}={value.m},{value.n}")
        elif isinstance(value, tuple) and value and isinstance(
            value[0], GranularityConfig
        ):
            lines.append(f"{f.name}=" + ";".join(f"{g.m},{g.n}" for g in value))
        elif isinstance(value, tuple):
            lines.append(f"{f.name}=" + ",".join(str(v) for v in value))
        elif isinstance(value, AdaptationConfig):
            continue  # flattened separately by the caller
        else:
            lines.append(f"{f.name}={value}")
    for key, value in (extras or {}).items():
        lines.append(f"{key}={value}")
    return "\n".join(lines)
