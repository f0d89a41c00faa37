"""Seeded strided-convolution stand-in for the image backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SepConvParams, init_sepconv, relu, separable_conv2d
from .epem import PyramidFeatures


@dataclass
class StubConfig:
    channels: int = 16
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(f"image extents must be multiples of 32, got {self.height}x{self.width}")


@dataclass
class StubParams:
    stages: list[SepConvParams]  # five stride-2 stages: stem, then /4, /8, /16, /32


def init_stub(rng: np.random.Generator, channels: int, dtype=np.float64) -> StubParams:
    stages = [init_sepconv(rng, 3, channels, dtype)]
    stages += [init_sepconv(rng, channels, channels, dtype) for _ in range(4)]
    return StubParams(stages)


def stub_forward(image: np.ndarray, params: StubParams) -> PyramidFeatures:
    H, W, _ = image.shape
    if H % 32 or W % 32:
        raise ValueError(f"image extents must be multiples of 32, got {H}x{W}")
    x = relu(separable_conv2d(image, params.stages[0], 2))
    maps = []
    for stage in params.stages[1:]:
        x = relu(separable_conv2d(x, stage, 2))
        maps.append(x)
    return PyramidFeatures(maps)


def stub_from_config(cfg: StubConfig, image: np.ndarray, dtype=np.float64) -> PyramidFeatures:
    params = init_stub(np.random.default_rng(cfg.seed), cfg.channels, dtype)
    return stub_forward(image, params)
