"""Experiment specs: defaults, presets, dotted overrides, validation and hashing.

A spec file (YAML or JSON) has the top-level keys ``name``, ``preset``,
``train``, ``privacy``, ``data``, ``sweep``, ``seeds`` and ``eval_every``.
Everything missing is filled from the defaults below, so an empty file
resolves to the full default experiment. Resolution order is built-in
defaults, then the preset, then the file, then command-line overrides.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .engine import TrainConfig
from .privacy import PrivacyParams

TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
TRAIN_DEFAULTS["hidden"] = list(TRAIN_DEFAULTS["hidden"])

PRIVACY_DEFAULTS = {"clip": 0.01, "epsilon": 1.0, "delta": 1e-5, "sigma": None}

DATA_DEFAULTS = {
    "source": "synthetic",
    "num_classes": 10,
    "per_class": 200,
    "dim": 32,
    "separation": 2.0,
    "classes_per_client": 2,
    "train_fraction": 0.8,
    "images": None,
    "labels": None,
    "path": None,
    "cifar_variant": "cifar10",
}

# ablation rows and the baseline, as flag settings on TrainConfig
VARIANTS = {
    "plain": {"algorithm": "dp_pfeddsu", "rt_enabled": False, "dan_enabled": False},
    "rt_only": {"algorithm": "dp_pfeddsu", "rt_enabled": True, "dan_enabled": False},
    "dp_pfeddsu": {"algorithm": "dp_pfeddsu", "rt_enabled": True, "dan_enabled": True},
    "dp_fedavg_fb": {"algorithm": "dp_fedavg_fb", "rt_enabled": False, "dan_enabled": False},
}

# sweep axis -> (section, key)
SWEEP_AXES = {
    "epsilon": ("privacy", "epsilon"),
    "sparsity": ("train", "sparsity"),
    "masked_layers": ("train", "masked_layers"),
    "lam": ("train", "lam"),
    "classes_per_client": ("data", "classes_per_client"),
    "variant": (None, None),
}

TOP_DEFAULTS = {"name": "default", "eval_every": 10, "seeds": [0], "sweep": {}}

PRESETS: dict[str, dict] = {
    "default": {},
    "ablation": {"name": "ablation", "sweep": {"variant": ["plain", "rt_only", "dp_pfeddsu"]}},
    "comparison": {"name": "comparison",
                   "sweep": {"variant": ["dp_fedavg_fb", "plain", "rt_only", "dp_pfeddsu"]}},
    "budget": {"name": "budget", "sweep": {"epsilon": [0.5, 1.0, 2.0]}},
    "sparsity": {"name": "sparsity", "sweep": {"sparsity": [0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9]}},
    "layers": {"name": "layers", "train": {"hidden": [64] * 8},
               "sweep": {"masked_layers": list(range(1, 9))}},
    "lambda": {"name": "lambda", "sweep": {"lam": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]}},
}


class ConfigError(ValueError):
    pass


def _fail(key: str, value: Any, allowed: str) -> ConfigError:
    return ConfigError(f"{key}={value!r} is invalid: must be {allowed}")


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Cast ``value`` to the type of ``default`` or raise a ConfigError."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _fail(key, value, "true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise _fail(key, value, "an integer")
        return int(value)
    if isinstance(default, float) or (default is None and key.endswith("sigma")):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _fail(key, value, "a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise _fail(key, value, "a list")
        return [_coerce(key, v, default[0]) for v in value] if default else list(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise _fail(key, value, "a string")
        return value
    return value


def _merge_section(name: str, base: dict, update: Any) -> dict:
    if update is None:
        return base
    if not isinstance(update, dict):
        raise _fail(name, update, "a mapping")
    out = dict(base)
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown key {name}.{k} (known: {', '.join(sorted(base))})")
        out[k] = _coerce(f"{name}.{k}", v, DEFAULTS_FOR[name][k])
    return out


DEFAULTS_FOR = {"train": TRAIN_DEFAULTS, "privacy": PRIVACY_DEFAULTS, "data": DATA_DEFAULTS}


@dataclass(frozen=True)
class Cell:
    """One grid point: fully resolved sections plus the axis values that made it."""

    axes: dict
    train: dict
    privacy: dict
    data: dict
    eval_every: int

    def canonical(self) -> dict:
        return {"train": self.train, "privacy": self.privacy, "data": self.data,
                "eval_every": self.eval_every}

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.canonical())

    @property
    def label(self) -> str:
        parts = [self.axes.get("variant", self.train["algorithm"])]
        parts += [f"{k}={v}" for k, v in sorted(self.axes.items()) if k != "variant"]
        return ",".join(parts)

    @property
    def cell_id(self) -> str:
        slug = "".join(ch if ch.isalnum() or ch in "._=-" else "_" for ch in self.label)
        return f"{slug}-{self.config_hash[:10]}"

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "hidden": tuple(self.train["hidden"])}, seed=seed)

    def privacy_params(self, sigma: float) -> PrivacyParams:
        return PrivacyParams(self.privacy["clip"], sigma, self.train["sample_prob"],
                             self.train["num_clients"], self.privacy["delta"])


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    train: dict
    privacy: dict
    data: dict
    sweep: dict
    seeds: tuple
    eval_every: int

    def canonical(self) -> dict:
        return {"name": self.name, "train": self.train, "privacy": self.privacy, "data": self.data,
                "sweep": self.sweep, "seeds": list(self.seeds), "eval_every": self.eval_every}

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.canonical())

    def cells(self) -> list[Cell]:
        axes = sorted(self.sweep)
        out = []
        for combo in itertools.product(*(self.sweep[a] for a in axes)):
            sections = {s: dict(getattr(self, s)) for s in ("train", "privacy", "data")}
            point = dict(zip(axes, combo))
            for axis, value in point.items():
                if axis == "variant":
                    sections["train"].update(VARIANTS[value])
                else:
                    sec, key = SWEEP_AXES[axis]
                    sections[sec][key] = value
            out.append(Cell(point, sections["train"], sections["privacy"], sections["data"],
                            self.eval_every))
        return out

    def with_seeds(self, n: int) -> "ExperimentSpec":
        return replace(self, seeds=tuple(range(n)))


def canonical_hash(obj: dict) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _validate_privacy(p: dict) -> None:
    if not p["clip"] > 0:
        raise _fail("privacy.clip", p["clip"], "> 0")
    if not p["epsilon"] > 0:
        raise _fail("privacy.epsilon", p["epsilon"], "> 0")
    if not 0 < p["delta"] < 1:
        raise _fail("privacy.delta", p["delta"], "in (0, 1)")
    if p["sigma"] is not None and not p["sigma"] >= 0:
        raise _fail("privacy.sigma", p["sigma"], ">= 0 or null (calibrate from epsilon)")


def _validate_data(d: dict) -> None:
    if d["source"] not in ("synthetic", "idx", "cifar"):
        raise _fail("data.source", d["source"], "'synthetic', 'idx' or 'cifar'")
    for key in ("num_classes", "per_class", "dim", "classes_per_client"):
        if d[key] < 1:
            raise _fail(f"data.{key}", d[key], ">= 1")
    if d["separation"] < 0:
        raise _fail("data.separation", d["separation"], ">= 0")
    if not 0 < d["train_fraction"] < 1:
        raise _fail("data.train_fraction", d["train_fraction"], "in (0, 1)")
    if d["source"] == "idx" and not (d["images"] and d["labels"]):
        raise ConfigError("data.source='idx' needs data.images and data.labels paths")
    if d["source"] == "cifar" and not d["path"]:
        raise ConfigError("data.source='cifar' needs data.path")


def _validate_cell(cell: Cell) -> None:
    try:
        cell.train_config(0)
    except ValueError as e:
        raise ConfigError(f"train.{e}  [cell {cell.label}]") from None
    _validate_privacy(cell.privacy)
    _validate_data(cell.data)


def _resolve_sweep(sweep: Any) -> dict:
    if sweep is None:
        return {}
    if not isinstance(sweep, dict):
        raise _fail("sweep", sweep, "a mapping of axis -> list")
    out = {}
    for axis, values in sweep.items():
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r} (known: {', '.join(sorted(SWEEP_AXES))})")
        if not isinstance(values, (list, tuple)) or not values:
            raise _fail(f"sweep.{axis}", values, "a non-empty list")
        if axis == "variant":
            for v in values:
                if v not in VARIANTS:
                    raise _fail("sweep.variant", v, f"one of {sorted(VARIANTS)}")
            out[axis] = list(values)
        else:
            sec, key = SWEEP_AXES[axis]
            out[axis] = [_coerce(f"sweep.{axis}", v, DEFAULTS_FOR[sec][key]) for v in values]
    return out


def _deep_update(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "sweep":
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_override(raw: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    value = yaml.safe_load(text) if text.strip() else None
    parts = key.split(".")
    if len(parts) == 1 and key not in TOP_DEFAULTS and key not in ("preset",):
        owners = [s for s, d in DEFAULTS_FOR.items() if key in d]
        if len(owners) != 1:
            raise ConfigError(f"unknown key {key!r}" if not owners else
                              f"ambiguous key {key!r}: use one of {[f'{o}.{key}' for o in owners]}")
        parts = [owners[0], key]
    out = copy.deepcopy(raw)
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value
    return out


def load_raw(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def parse_config(source: dict | str | Path | None = None, overrides=(), preset: str | None = None) -> ExperimentSpec:
    """Resolve a spec from a mapping or a file path plus ``key=value`` overrides.

    Bare override keys (``epsilon=0.5``) are looked up in the train, privacy
    and data sections; dotted keys (``privacy.epsilon=0.5``) address one
    directly. Values are parsed as YAML scalars or lists.
    """
    raw = load_raw(source) if isinstance(source, (str, Path)) else dict(source or {})
    for item in overrides:
        raw = _apply_override(raw, item)
    known = set(TOP_DEFAULTS) | set(DEFAULTS_FOR) | {"preset"}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key {k!r} (known: {', '.join(sorted(known))})")
    file_preset = raw.pop("preset", None)
    preset = preset or file_preset
    if preset is not None and preset not in PRESETS:
        raise _fail("preset", preset, f"one of {sorted(PRESETS)}")
    merged = _deep_update(PRESETS[preset or "default"], raw)

    train = _merge_section("train", TRAIN_DEFAULTS, merged.get("train"))
    privacy = _merge_section("privacy", PRIVACY_DEFAULTS, merged.get("privacy"))
    data = _merge_section("data", DATA_DEFAULTS, merged.get("data"))
    sweep = _resolve_sweep(merged.get("sweep"))
    seeds = merged.get("seeds", TOP_DEFAULTS["seeds"])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = list(range(seeds))
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise _fail("seeds", seeds, "a positive count or a non-empty list of integers")
    seeds = tuple(_coerce("seeds", s, 0) for s in seeds)
    if len(set(seeds)) != len(seeds) or min(seeds) < 0:
        raise _fail("seeds", list(seeds), "distinct non-negative integers")
    eval_every = _coerce("eval_every", merged.get("eval_every", TOP_DEFAULTS["eval_every"]), 0)
    if eval_every < 1:
        raise _fail("eval_every", eval_every, ">= 1")
    name = merged.get("name", preset or TOP_DEFAULTS["name"])
    if not isinstance(name, str) or not name:
        raise _fail("name", name, "a non-empty string")

    spec = ExperimentSpec(name, train, privacy, data, sweep, seeds, eval_every)
    for cell in spec.cells():
        _validate_cell(cell)
    return spec
