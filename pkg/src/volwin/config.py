"""Run configuration: INI-style file with [model], [data], and [train]
sections, flag overrides, documented defaults, and strict key validation.

Precedence is flag > file > default. Unknown keys are rejected with the
nearest valid key named; the effective configuration can be echoed line by
line for reproducibility.
"""

from __future__ import annotations

import configparser
import difflib
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticSpec
from .encoder import DECODER_KINDS, FF_KINDS, MERGE_KINDS, ModelConfig
from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    return tuple(int(p) for p in s.replace(",", " ").split())


def _parse_float_tuple(s: str) -> tuple:
    return tuple(float(p) for p in s.replace(",", " ").split())


def _parse_str(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"":
        s = s[1:-1]
    return s


def _parse_str_tuple(s: str) -> tuple:
    return tuple(_parse_str(p) for p in s.replace(",", " ").split())


def _choice(options):
    def parse(s: str) -> str:
        v = _parse_str(s)
        if v not in options:
            raise ValueError(f"must be one of {options}, got {v!r}")
        return v

    parse.type_name = f"one of {options}"
    return parse


# key -> (parser, default). Types double as documentation; see README.
SCHEMA = {
    "model": {
        "in_channels": (int, 1),
        "base_dim": (int, 48),
        "depths": (_parse_int_tuple, (2, 2, 2, 2)),
        "heads": (_parse_int_tuple, (3, 6, 12, 24)),
        "window": (int, 4),
        "ff_kind": (_choice(FF_KINDS), "inception"),
        "branch_weights": (_parse_float_tuple, (1.0, 1.0, 1.0, 1.0)),
        "bottleneck_ratio": (float, 0.125),
        "mlp_ratio": (float, 4.0),
        "merge_kind": (_choice(MERGE_KINDS), "conv"),
        "decoder_kind": (_choice(DECODER_KINDS), "premerge"),
        "num_classes": (int, 14),
        "use_rel_bias": (_parse_bool, True),
    },
    "data": {
        "edge": (int, 32),
        "num_train": (int, 24),
        "num_val": (int, 8),
        "shapes_min": (int, 2),
        "shapes_max": (int, 4),
        "kinds": (_parse_str_tuple, ("sphere", "box")),
        "noise_sigma": (float, 0.05),
    },
    "train": {
        "lr": (float, 1e-3),
        "weight_decay": (float, 1e-4),
        "batch_size": (int, 2),
        "steps": (int, 500),
        "eval_every": (int, 25),
        "seed": (int, 0),
        "dtype": (_choice(("float32", "float64")), "float32"),
    },
}


@dataclass
class TrainSettings:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 2
    steps: int = 500
    eval_every: int = 25
    seed: int = 0
    dtype: str = "float32"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    num_train: int = 24
    num_val: int = 8

    def echo_lines(self):
        """Effective configuration, one `section.key = value` line per field."""
        values = {
            "model": self.model,
            "data": self.data,
            "train": self.train,
        }
        for section, keys in SCHEMA.items():
            obj = values[section]
            for key in keys:
                val = getattr(obj, key)
                if isinstance(val, tuple):
                    val = ", ".join(str(v) for v in val)
                yield f"{section}.{key} = {val}"


def _all_keys():
    return [f"{section}.{key}" for section, keys in SCHEMA.items() for key in keys]


def _reject_unknown(dotted: str):
    suggestion = difflib.get_close_matches(dotted, _all_keys(), n=1)
    hint = f"; did you mean {suggestion[0]!r}?" if suggestion else ""
    raise ConfigError(f"unknown config key {dotted!r}{hint}")


def _parse_value(section: str, key: str, raw: str):
    parser, _default = SCHEMA[section][key]
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        type_name = getattr(parser, "type_name", getattr(parser, "__name__", str(parser)))
        raise ConfigError(f"{section}.{key}: expected {type_name}, got {raw!r} ({exc})") from None


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional file and dotted-key overrides."""
    values = {section: {key: default for key, (_, default) in keys.items()} for section, keys in SCHEMA.items()}
    if path is not None:
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in cp.sections():
            if section not in SCHEMA:
                _reject_unknown(f"{section}.*")
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    _reject_unknown(f"{section}.{key}")
                values[section][key] = _parse_value(section, key, raw)
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            _reject_unknown(dotted)
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            _reject_unknown(dotted)
        values[section][key] = _parse_value(section, key, raw) if isinstance(raw, str) else raw
    model = ModelConfig(**values["model"], dtype=values["train"]["dtype"])
    data = SyntheticSpec(num_classes=model.num_classes, seed=values["train"]["seed"], **values["data"])
    train = TrainSettings(**values["train"])
    return RunConfig(model=model, data=data, train=train)
