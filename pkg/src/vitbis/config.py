"""Architecture configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigMismatch

DECODER_STAGES = 3
UPSAMPLE_MODES = ("bilinear", "transposed_conv")
ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    reduced_channels: int = 128
    num_classes: int = 2
    num_stacks: int = 3
    upsample_mode: str = "bilinear"
    window_size: int | None = None
    height: int = 32
    width: int = 32
    in_channels: int = 1
    use_gsa: bool = True
    gsa_verbatim: bool = False
    rel_bias: bool = True
    mlp_activation: str = "gelu"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        p = self.patch_size
        if p < 1 or self.embed_dim < 3 or self.depth < 1 or self.num_stacks < 1:
            raise ConfigMismatch("patch_size, depth and num_stacks must be >= 1; embed_dim >= 3")
        if self.embed_dim % self.num_heads:
            raise ConfigMismatch(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ConfigMismatch("num_classes must be >= 2")
        step = 2**DECODER_STAGES
        for name, n in (("height", self.height), ("width", self.width)):
            if n % p:
                raise ConfigMismatch(f"{name} {n} not divisible by patch size {p}")
            if n % step:
                raise ConfigMismatch(f"{name} {n} not divisible by {step} (one halving per decoder stage)")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigMismatch(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if self.mlp_activation not in ACTIVATIONS:
            raise ConfigMismatch(f"mlp_activation must be one of {ACTIVATIONS}")
        if self.reduced_channels < 1 or self.mlp_ratio <= 0:
            raise ConfigMismatch("reduced_channels and mlp_ratio must be positive")
        if self.rel_bias and self.window_size is not None and self.window_size < 1:
            raise ConfigMismatch("window_size must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def window(self) -> int:
        """Side of the square token window the relative bias is indexed over."""
        if self.window_size is not None:
            return self.window_size
        return self.grid[0]

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(max(self.reduced_channels >> (s + 1), 4) for s in range(DECODER_STAGES))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigMismatch(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)
