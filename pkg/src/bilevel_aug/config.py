"""Experiment configuration: INI-style ``key = value`` sections.

Parsed with a purpose-built reader that tracks line numbers so invalid
configs are rejected with a precise location. Unknown sections or keys are
errors; every field is schema-validated before any job runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ARMS = ("none", "predefined", "randaugment", "learned")
SCENARIOS = ("color", "affine", "color+affine")
HUE_TURNS_TO_RAD = 2.0 * np.pi


class ConfigError(ValueError):
    """Invalid configuration; carries a line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _parse_sections(text):
    """-> {section: {key: (raw_value, line_no)}} with duplicate detection."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", lineno)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if current is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno)
        sections[current][key] = (value.strip(), lineno)
    return sections


def _to_bool(raw, line):
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}", line)


def _convert(raw, kind, line):
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _to_bool(raw, line)
        if kind == "list_str":
            return [v.strip() for v in raw.split(",") if v.strip()]
        if kind == "list_int":
            return [int(v) for v in raw.split(",") if v.strip()]
        if kind == "list_float":
            return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw!r} as {kind}: {e}", line) from None
    raise AssertionError(f"unknown kind {kind}")


# section -> key -> (kind, default); REQUIRED means no default
REQUIRED = object()

SCHEMA = {
    "experiment": {
        "name": ("str", REQUIRED),
        "arms": ("list_str", ["learned"]),
        "scenarios": ("list_str", ["color+affine"]),
        "folds": ("int", 5),
        "seeds": ("list_int", [0]),
        "output": ("str", ""),
        "jobs": ("int", 1),
    },
    "dataset": {
        "source": ("str", "synthetic"),
        "num_classes": ("int", 4),
        "samples_per_class": ("int", 100),
        "image_size": ("int", 32),
        "shift": ("float", 1.0),
        "noise_std": ("float", 0.015),
        "seed": ("int", 7),
        "fractions": ("list_float", [0.4, 0.1, 0.5]),
    },
    "training": {
        "epochs": ("int", 24),
        "batch_size": ("int", 8),
        "lr_inner": ("float", 0.05),
        "momentum": ("float", 0.8),
    },
    "bilevel": {
        "k": ("int", 1),
        "j": ("int", 1),
        "lr_outer": ("float", 0.0015),
        "outer_optimizer": ("str", "adam"),
        "hvp_mode": ("str", "exact"),
        "eps_hvp": ("float", 1e-2),
    },
    "predefined": {
        "cells": ("str", ""),
    },
    "randaugment": {
        "m_values": ("list_int", [1, 2, 3, 4, 5]),
        "n_values": ("list_int", [1, 2, 3, 4, 5]),
    },
}


@dataclass
class ExperimentConfig:
    values: dict
    text: str
    config_hash: str
    predefined_cells: list = field(default_factory=list)

    def __getitem__(self, pair):
        section, key = pair
        return self.values[section][key]


def _parse_predefined_cells(raw, line):
    """'brightness=0.5,contrast=0.5 | hue=0.4' -> list of kwargs dicts.

    Hue is written in the transform pool's [-0.5, 0.5] turn units and
    converted to radians here.
    """
    from .baselines import PredefinedDAConfig

    cells = []
    if not raw:
        return cells
    for chunk in raw.split("|"):
        chunk = chunk.strip()
        if not chunk:
            continue
        kwargs = {}
        for item in chunk.split(","):
            if "=" not in item:
                raise ConfigError(f"bad predefined cell entry {item!r}", line)
            key, _, value = item.partition("=")
            key = key.strip()
            try:
                val = float(value)
            except ValueError:
                raise ConfigError(f"bad predefined value {value!r}", line) from None
            if key == "hue":
                val *= HUE_TURNS_TO_RAD
            kwargs[key] = val
        try:
            cells.append(PredefinedDAConfig(**kwargs))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid predefined cell {chunk!r}: {e}", line) from None
    return cells


def parse_config(text):
    """Parse and validate the full experiment configuration."""
    sections = _parse_sections(text)

    for name, keys in sections.items():
        if name not in SCHEMA:
            first_line = min(line for _, line in keys.values()) if keys else None
            raise ConfigError(f"unknown section [{name}]", first_line)
        for key, (_, line) in keys.items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]", line)

    values = {}
    lines = {}
    for name, schema in SCHEMA.items():
        values[name] = {}
        lines[name] = {}
        present = sections.get(name, {})
        for key, (kind, default) in schema.items():
            if key in present:
                raw, line = present[key]
                values[name][key] = _convert(raw, kind, line)
                lines[name][key] = line
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{name}]")
            else:
                values[name][key] = default.copy() if isinstance(default, list) else default
                lines[name][key] = None

    _validate(values, lines)
    cells = _parse_predefined_cells(
        values["predefined"]["cells"], lines["predefined"]["cells"]
    )
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    return ExperimentConfig(values=values, text=text, config_hash=digest,
                            predefined_cells=cells)


def _validate(values, lines):
    exp = values["experiment"]
    for arm in exp["arms"]:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r} (choose from {ARMS})",
                              lines["experiment"]["arms"])
    for scenario in exp["scenarios"]:
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r} (choose from {SCENARIOS})",
                              lines["experiment"]["scenarios"])
    if exp["folds"] < 1:
        raise ConfigError("folds must be >= 1", lines["experiment"]["folds"])
    if len(exp["seeds"]) not in (1, exp["folds"]):
        raise ConfigError(
            f"seeds must list 1 or folds={exp['folds']} entries",
            lines["experiment"]["seeds"],
        )
    if exp["jobs"] < 1:
        raise ConfigError("jobs must be >= 1", lines["experiment"]["jobs"])

    ds = values["dataset"]
    if not (ds["source"] == "synthetic" or ds["source"].startswith("folder:")):
        raise ConfigError(
            f"dataset source must be 'synthetic' or 'folder:<path>', got {ds['source']!r}",
            lines["dataset"]["source"],
        )
    fr = ds["fractions"]
    if len(fr) != 3 or any(f <= 0 for f in fr) or sum(fr) > 1 + 1e-9:
        raise ConfigError("fractions must be three positive floats summing to <= 1",
                          lines["dataset"]["fractions"])

    tr = values["training"]
    if tr["epochs"] < 1 or tr["batch_size"] < 1:
        raise ConfigError("epochs and batch_size must be >= 1",
                          lines["training"]["epochs"])
    if tr["lr_inner"] <= 0:
        raise ConfigError("lr_inner must be > 0", lines["training"]["lr_inner"])
    if not 0 <= tr["momentum"] < 1:
        raise ConfigError("momentum must be in [0, 1)", lines["training"]["momentum"])

    bl = values["bilevel"]
    if bl["k"] < 1 or bl["j"] < bl["k"]:
        raise ConfigError("need 1 <= k <= j", lines["bilevel"]["k"])
    if bl["lr_outer"] < 0:
        raise ConfigError("lr_outer must be >= 0", lines["bilevel"]["lr_outer"])
    if bl["outer_optimizer"] not in ("sgd", "adam"):
        raise ConfigError("outer_optimizer must be sgd or adam",
                          lines["bilevel"]["outer_optimizer"])
    if bl["hvp_mode"] not in ("exact", "central-diff"):
        raise ConfigError("hvp_mode must be exact or central-diff",
                          lines["bilevel"]["hvp_mode"])

    ra = values["randaugment"]
    for key in ("m_values", "n_values"):
        for v in ra[key]:
            if not 1 <= v <= 5:
                raise ConfigError(f"randaugment {key} entries must be in [1, 5]",
                                  lines["randaugment"][key])


def seeds_for_folds(cfg):
    exp = cfg.values["experiment"]
    seeds = exp["seeds"]
    if len(seeds) == 1:
        return [seeds[0] + i for i in range(exp["folds"])]
    return list(seeds)
