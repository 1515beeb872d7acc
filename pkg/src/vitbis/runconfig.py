"""Versioned JSON run configuration.

Schema (version 1); every section is optional and unknown keys are errors::

    {
      "version": 1,
      "model": {ModelConfig fields},
      "optim": {OptimConfig fields},
      "train": {TrainConfig fields, "loss": {alpha, beta, epsilon}},
      "data":  {SyntheticSpec fields},
      "val_images": 4
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import ModelConfig
from .data import SyntheticSpec
from .errors import ConfigMismatch
from .optim import OptimConfig
from .train import CONFIG_VERSION, TrainConfig

SECTIONS = {"version", "model", "optim", "train", "data", "val_images"}
VAL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    val_images: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - SECTIONS
        if unknown:
            raise ConfigMismatch(f"unknown config sections: {sorted(unknown)}")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigMismatch(f"config version {version} unsupported (expected {CONFIG_VERSION})")
        val_images = d.get("val_images", 4)
        if not isinstance(val_images, int) or val_images < 0:
            raise ConfigMismatch("val_images must be a non-negative integer")
        try:
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                optim=OptimConfig.from_dict(d.get("optim", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                data=SyntheticSpec.from_dict(d.get("data", {})),
                val_images=val_images,
            )
        except TypeError as exc:
            raise ConfigMismatch(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigMismatch(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigMismatch(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "model": self.model.to_dict(),
            "optim": self.optim.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "val_images": self.val_images,
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            optim=dataclasses.replace(self.optim, seed=seed),
            data=dataclasses.replace(self.data, seed=seed),
        )

    def val_spec(self) -> SyntheticSpec | None:
        if not self.val_images:
            return None
        return dataclasses.replace(self.data, seed=(self.data.seed + VAL_SEED_OFFSET) % 2**64, num_images=self.val_images)
