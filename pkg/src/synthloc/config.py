"""Experiment configuration: defaults < JSON config file < command-line flags."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .micronet import TrainConfig

CONFIG_VERSION = 1

DEFAULT_PATCH_SIZE = 32
DEFAULT_STRIDE = 4
DEFAULT_SPLICE_SIDE = 64
# Reference operating point reported for the original detector on real blots.
REFERENCE_TAU = 0.736
REFERENCE_CORRECT_RATE = 0.993


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    patch_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_STRIDE
    scorer: dict = field(default_factory=lambda: {"kind": "oracle"})
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    output: str | None = None
    tau: float | None = None
    splice_side: int = DEFAULT_SPLICE_SIDE
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "workers": self.workers,
            "patch": {"size": self.patch_size, "stride": self.stride},
            "splice_side": self.splice_side,
            "scorer": dict(self.scorer),
            "augment": self.augment.to_dict(),
            "train": self.train.to_dict(),
            "paths": dict(sorted(self.paths.items())),
            "output": self.output,
            "tau": self.tau,
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def merge_dict(cfg: ExperimentConfig, d: dict) -> ExperimentConfig:
    """Overlay a parsed config document onto ``cfg``."""
    known = {"version", "seed", "workers", "patch", "splice_side", "scorer", "augment",
             "train", "paths", "output", "tau"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "version" in d and d["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {d['version']!r} (expected {CONFIG_VERSION})")
    try:
        if "seed" in d:
            cfg.seed = int(d["seed"])
        if "workers" in d:
            cfg.workers = int(d["workers"])
        if "patch" in d:
            cfg.patch_size = int(d["patch"].get("size", cfg.patch_size))
            cfg.stride = int(d["patch"].get("stride", cfg.stride))
        if "splice_side" in d:
            cfg.splice_side = int(d["splice_side"])
        if "scorer" in d:
            cfg.scorer = {**cfg.scorer, **d["scorer"]}
        if "augment" in d:
            cfg.augment = AugmentConfig.from_dict({**cfg.augment.to_dict(), **d["augment"]})
        if "train" in d:
            cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **d["train"]})
        if "paths" in d:
            cfg.paths = {**cfg.paths, **d["paths"]}
        if "output" in d:
            cfg.output = d["output"]
        if "tau" in d:
            cfg.tau = None if d["tau"] is None else float(d["tau"])
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return doc
