"""Run configuration: a flat JSON object whose keys all have defaults."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DTYPES
from .encoder import MixSSMConfig


class ConfigError(ValueError):
    """Raised for unknown keys or values that do not fit together; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    image_h: int = 64
    image_w: int = 64
    channels: int = 16
    num_blocks: int = 6
    k: int | None = None
    renormalize: bool = False
    heads: int = 4
    points: int = 4
    state_dim: int = 16
    num_proposals: int = 100
    num_points: int = 16
    decoder_layers: int = 4
    lambda_cls: float = 2.0
    lambda_seg: float = 5.0
    lambda_reg: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dtype: str = "f64"
    seed: int = 0
    enable_ss2d: bool = True
    enable_dsffn: bool = True
    enable_epem: bool = True
    enable_topk: bool = True
    share_ss2d_paths: bool = False

    levels = 4  # pyramid levels are fixed at strides 4, 8, 16, 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_h % 32 or self.image_w % 32 or self.image_h <= 0 or self.image_w <= 0:
            raise ConfigError("image_h", f"image extents must be positive multiples of 32, "
                                         f"got {self.image_h}x{self.image_w}")
        if self.channels % self.heads:
            raise ConfigError("channels", f"{self.channels} not divisible by heads={self.heads}")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks", "must be >= 1")
        if self.k is not None and not 1 <= self.k:
            raise ConfigError("k", "must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError("dtype", f"must be one of {sorted(DTYPES)}")
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers", "must be >= 1")
        if self.num_points < 1:
            raise ConfigError("num_points", "must be >= 1")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda_cls, self.lambda_seg, self.lambda_reg)

    @property
    def num_tokens(self) -> int:
        return sum((self.image_h // s) * (self.image_w // s) for s in (4, 8, 16, 32))

    def mix(self) -> MixSSMConfig:
        return MixSSMConfig(num_blocks=self.num_blocks, k=self.k, renormalize=self.renormalize,
                            enable_ss2d=self.enable_ss2d, enable_dsffn=self.enable_dsffn,
                            enable_topk=self.enable_topk)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(key, "unknown config key")
            _check_type(key, known[key].type, value)
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _check_type(key: str, annotation: str, value) -> None:
    if annotation == "int | None" and value is None:
        return
    base = annotation.split(" ")[0]
    if base == "bool":
        ok = isinstance(value, bool)
    elif base == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif base == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(key, f"expected {annotation}, got {type(value).__name__} {value!r}")


def rng_for(cfg: RunConfig) -> np.random.Generator:
    return np.random.default_rng(cfg.seed)
