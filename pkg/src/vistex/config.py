"""Model and dataset configuration objects."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import InvalidConfigError

# Sentinel class id for prompt rows that ground nothing (padding rows).
NO_OBJECT = -1


@dataclass(frozen=True)
class OVLMConfig:
    """Architecture hyperparameters of the toy grounded detector.

    ``num_stages`` cross-modal encoder stages operate on a ``num_scales``-level
    feature pyramid whose largest grid is ``grid_h`` x ``grid_w``.  Visual rows
    are ``d_visual`` wide, prompt token rows ``d_text`` wide.
    """

    num_stages: int = 2          # L
    num_scales: int = 3          # M
    d_visual: int = 32           # d_I
    d_text: int = 32             # d_T
    grid_h: int = 16             # H
    grid_w: int = 16             # W
    image_size: int = 64         # H0 == W0
    vocab_size: int = 32         # includes the OOV and no-object slots

    def __post_init__(self) -> None:
        if self.num_stages < 1 or self.num_scales < 1:
            raise InvalidConfigError("need at least one stage and one scale")
        div = 2 ** (self.num_scales - 1)
        if self.grid_h % div or self.grid_w % div:
            raise InvalidConfigError(
                f"grid {self.grid_h}x{self.grid_w} not divisible by 2^(M-1)={div}"
            )
        if self.image_size % self.grid_h or self.image_size % self.grid_w:
            raise InvalidConfigError("image size must be a multiple of the grid")
        stride = self.image_size // self.grid_h
        if stride & (stride - 1):
            raise InvalidConfigError("image-to-grid ratio must be a power of two")
        if self.vocab_size < 3:
            raise InvalidConfigError("vocab must fit at least one word plus pads")

    @property
    def smallest_h(self) -> int:
        return self.grid_h // 2 ** (self.num_scales - 1)

    @property
    def smallest_w(self) -> int:
        return self.grid_w // 2 ** (self.num_scales - 1)

    def scale_shape(self, j: int) -> tuple[int, int]:
        """(rows, cols) of the feature grid at pyramid level ``j``."""
        return self.grid_h // 2**j, self.grid_w // 2**j

    def scale_rows(self, j: int) -> int:
        h, w = self.scale_shape(j)
        return h * w

    def stride(self, j: int) -> int:
        """Pixels per feature cell at pyramid level ``j``."""
        return (self.image_size // self.grid_h) * 2**j

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OVLMConfig":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)})


@dataclass(frozen=True)
class DataConfig:
    """Synthetic shapes dataset layout."""

    num_classes: int = 16
    num_novel: int = 4
    images_per_class: int = 80
    image_size: int = 64
    noise_sigma: float = 0.05
    max_instances: int = 4

    def __post_init__(self) -> None:
        if self.images_per_class < 1:
            raise InvalidConfigError("images_per_class must be >= 1")
        if not 1 <= self.num_novel < self.num_classes:
            raise InvalidConfigError("need 1 <= num_novel < num_classes")
        if self.max_instances < 1:
            raise InvalidConfigError("max_instances must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)})


def config_hash(*parts: dict) -> str:
    """Short stable hash of one or more config dicts, for output provenance."""
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
