"""Experiment configuration: schema, validation, presets and the flat TOML file format."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import SCENARIOS, AugmentPolicy
from .errors import ConfigError
from .models import ARCH_NAMES, ArchSpec
from .unlearn import TrainConfig

SCHEMA_VERSION = 1
METHODS = ("FT", "RL", "SalUn")
DATASET_KINDS = ("synthetic", "cifar10", "cifar100")
GAP_MODES = ("per-seed", "of-means")
SEED_ENV = "UNLEARNAUG_SEED"

_DESK: dict[str, Any] = {
    "schema": SCHEMA_VERSION,
    "name": "desk",
    "dataset": {
        "kind": "synthetic",
        "path": "",
        "num_classes": 10,
        "per_class": 200,
        "test_per_class": 50,
        "image_shape": [3, 16, 16],
        "noise": 0.4,
        "seed": 0,
    },
    "arch": {"name": "tiny-resnet", "width": 1},
    "baseline": {"epochs": 20, "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 64},
    "unlearn": {"epochs": 5, "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 64},
    "methods": ["FT", "RL", "SalUn"],
    "policies": ["NoAug", "Default+TrivialAug"],
    "forget": {"mode": "random", "values": [0.5]},
    "seeds": [0, 1, 2],
    "gap_mode": "per-seed",
    "output_dir": "runs/desk",
    "salun": {"fraction": 0.5, "batch_cap": 0},
    "rl": {"forget_only": False, "redraw_each_epoch": False},
    "eval": {"augmented": False, "mia_samples": 0},
    "report": {"rte": False},
    "debug": {"transform_log": False, "access_log": False},
}


def _full_scale(variant: str, k: int) -> dict[str, Any]:
    cfg = copy.deepcopy(_DESK)
    cfg["name"] = f"full-{variant}"
    cfg["dataset"] = {"kind": variant, "path": f"data/{variant}", "num_classes": k, "per_class": 0,
                      "test_per_class": 0, "image_shape": [3, 32, 32], "noise": 0.0, "seed": 0}
    cfg["arch"] = {"name": "tiny-resnet", "width": 4}
    cfg["baseline"] = {"epochs": 200, "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 256}
    cfg["unlearn"] = {"epochs": 10, "lr": 0.01, "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 256}
    cfg["policies"] = list(SCENARIOS)
    cfg["forget"] = {"mode": "random", "values": [0.1, 0.5]}
    cfg["seeds"] = [0, 1, 2, 3, 4]
    cfg["output_dir"] = f"runs/full-{variant}"
    cfg["salun"] = {"fraction": 0.5, "batch_cap": 0}
    cfg["report"] = {"rte": True}
    return cfg


PRESETS = {"desk": _DESK, "full-cifar10": _full_scale("cifar10", 10), "full-cifar100": _full_scale("cifar100", 100)}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the canonical nested dict."""

    raw: dict

    def __post_init__(self):
        validate(self.raw)

    # convenience accessors
    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def methods(self) -> list[str]:
        return list(self.raw["methods"])

    @property
    def policies(self) -> list[str]:
        return list(self.raw["policies"])

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def forget_mode(self) -> str:
        return self.raw["forget"]["mode"]

    @property
    def forget_values(self) -> list:
        return list(self.raw["forget"]["values"])

    @property
    def gap_mode(self) -> str:
        return self.raw["gap_mode"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def arch(self) -> ArchSpec:
        d = self.raw["dataset"]
        return ArchSpec(self.raw["arch"]["name"], tuple(d["image_shape"]), int(d["num_classes"]),
                        int(self.raw["arch"]["width"]))

    def train_config(self, stage: str, policy: str, seed: int) -> TrainConfig:
        s = self.raw[stage]
        return TrainConfig(int(s["epochs"]), float(s["lr"]), float(s["momentum"]), float(s["weight_decay"]),
                           int(s["batch_size"]), AugmentPolicy(policy), int(seed))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, **changes) -> ExperimentConfig:
        raw = self.to_dict()
        for key, value in changes.items():
            set_path(raw, key.replace("__", "."), value)
        return ExperimentConfig(raw)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def set_path(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float))) and not isinstance(v, bool)


def validate(raw: dict) -> None:
    """Raise :class:`ConfigError` naming the first offending field."""
    _require(isinstance(raw, dict), "<root>", "config must be a table")
    _require(raw.get("schema") == SCHEMA_VERSION, "schema", f"expected schema version {SCHEMA_VERSION}")
    expected = set(_DESK)
    unknown = set(raw) - expected
    _require(not unknown, sorted(unknown)[0] if unknown else "", "unknown key")
    for key in expected:
        _require(key in raw, key, "missing")
    for section in ("dataset", "arch", "baseline", "unlearn", "forget", "salun", "rl", "eval", "report", "debug"):
        _require(isinstance(raw[section], dict), section, "must be a table")
        extra = set(raw[section]) - set(_DESK[section])
        _require(not extra, f"{section}.{sorted(extra)[0]}" if extra else section, "unknown key")
        missing = set(_DESK[section]) - set(raw[section])
        _require(not missing, f"{section}.{sorted(missing)[0]}" if missing else section, "missing")

    d = raw["dataset"]
    _require(d["kind"] in DATASET_KINDS, "dataset.kind", f"must be one of {DATASET_KINDS}")
    _require(_is_int(d["num_classes"]) and d["num_classes"] >= 2, "dataset.num_classes", "must be an integer >= 2")
    _require(_is_int(d["per_class"]) and d["per_class"] >= 0, "dataset.per_class", "must be a non-negative integer")
    _require(_is_int(d["test_per_class"]) and d["test_per_class"] >= 0, "dataset.test_per_class",
             "must be a non-negative integer")
    _require(isinstance(d["image_shape"], list) and len(d["image_shape"]) == 3
             and all(_is_int(v) and v > 0 for v in d["image_shape"]), "dataset.image_shape",
             "must be three positive integers")
    _require(_is_num(d["noise"]) and d["noise"] >= 0, "dataset.noise", "must be non-negative")
    _require(_is_int(d["seed"]), "dataset.seed", "must be an integer")
    _require(isinstance(d["path"], str), "dataset.path", "must be a string")
    if d["kind"] == "synthetic":
        _require(d["per_class"] >= 1, "dataset.per_class", "synthetic data needs per_class >= 1")
        _require(d["test_per_class"] >= 1, "dataset.test_per_class", "synthetic data needs test_per_class >= 1")
    else:
        _require(d["image_shape"] == [3, 32, 32], "dataset.image_shape", "CIFAR images are [3, 32, 32]")
        _require(d["num_classes"] == (10 if d["kind"] == "cifar10" else 100), "dataset.num_classes",
                 "does not match the CIFAR variant")

    _require(raw["arch"]["name"] in ARCH_NAMES, "arch.name", f"must be one of {ARCH_NAMES}")
    _require(_is_int(raw["arch"]["width"]) and raw["arch"]["width"] >= 1, "arch.width", "must be a positive integer")

    for stage in ("baseline", "unlearn"):
        s = raw[stage]
        _require(_is_int(s["epochs"]) and s["epochs"] >= 0, f"{stage}.epochs", "must be a non-negative integer")
        _require(_is_num(s["lr"]) and s["lr"] > 0, f"{stage}.lr", "must be positive")
        _require(_is_num(s["momentum"]) and 0 <= s["momentum"] < 1, f"{stage}.momentum", "must lie in [0, 1)")
        _require(_is_num(s["weight_decay"]) and s["weight_decay"] >= 0, f"{stage}.weight_decay",
                 "must be non-negative")
        _require(_is_int(s["batch_size"]) and s["batch_size"] >= 1, f"{stage}.batch_size", "must be >= 1")

    _require(isinstance(raw["methods"], list) and raw["methods"], "methods", "needs at least one method")
    for i, m in enumerate(raw["methods"]):
        _require(m in METHODS, f"methods[{i}]", f"unknown method {m!r}; expected one of {METHODS}")
    _require(len(set(raw["methods"])) == len(raw["methods"]), "methods", "duplicates")
    _require(isinstance(raw["policies"], list) and raw["policies"], "policies", "needs at least one policy")
    for i, p in enumerate(raw["policies"]):
        _require(p in SCENARIOS, f"policies[{i}]", f"unknown policy {p!r}; expected one of {SCENARIOS}")
    _require(len(set(raw["policies"])) == len(raw["policies"]), "policies", "duplicates")
    _require(isinstance(raw["seeds"], list) and raw["seeds"], "seeds", "needs at least one seed")
    for i, s in enumerate(raw["seeds"]):
        _require(_is_int(s) and s >= 0, f"seeds[{i}]", "must be a non-negative integer")
    _require(len(set(raw["seeds"])) == len(raw["seeds"]), "seeds", "duplicates")

    f = raw["forget"]
    _require(f["mode"] in ("random", "classwise"), "forget.mode", "must be 'random' or 'classwise'")
    _require(isinstance(f["values"], list) and f["values"], "forget.values", "needs at least one value")
    for i, v in enumerate(f["values"]):
        path = f"forget.values[{i}]"
        if f["mode"] == "random":
            _require(_is_num(v) and 0 < v <= 1, path, "forget rate must lie in (0, 1]")
        else:
            _require(_is_int(v) and 0 <= v < d["num_classes"], path, "class id out of range")

    _require(raw["gap_mode"] in GAP_MODES, "gap_mode", f"must be one of {GAP_MODES}")
    _require(isinstance(raw["output_dir"], str) and raw["output_dir"], "output_dir", "must be a non-empty string")
    _require(isinstance(raw["name"], str), "name", "must be a string")
    _require(_is_num(raw["salun"]["fraction"]) and 0 < raw["salun"]["fraction"] <= 1, "salun.fraction",
             "must lie in (0, 1]")
    _require(_is_int(raw["salun"]["batch_cap"]) and raw["salun"]["batch_cap"] >= 0, "salun.batch_cap",
             "must be a non-negative integer (0 = all batches)")
    for key in ("forget_only", "redraw_each_epoch"):
        _require(isinstance(raw["rl"][key], bool), f"rl.{key}", "must be a boolean")
    _require(isinstance(raw["eval"]["augmented"], bool), "eval.augmented", "must be a boolean")
    _require(_is_int(raw["eval"]["mia_samples"]) and raw["eval"]["mia_samples"] >= 0, "eval.mia_samples",
             "must be a non-negative integer (0 = all)")
    _require(isinstance(raw["report"]["rte"], bool), "report.rte", "must be a boolean")
    for key in ("transform_log", "access_log"):
        _require(isinstance(raw["debug"][key], bool), f"debug.{key}", "must be a boolean")


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return ExperimentConfig(copy.deepcopy(PRESETS[name]))


# ---------------------------------------------------------------- file format


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, Any]]:
    out = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flatten(v, key + "."))
        else:
            out.append((key, v))
    return out


def dumps(cfg: ExperimentConfig) -> str:
    """Flat ``dotted.key = value`` lines; top-level scalars first so the file stays valid TOML."""
    lines = [f"# unlearnaug experiment config (schema {SCHEMA_VERSION})"]
    for key, value in _flatten(cfg.raw):
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from exc
    return ExperimentConfig(raw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
