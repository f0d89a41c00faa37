"""Embedding pyramid enhancement: sequence -> maps, backbone fusion, FPEM, re-flatten."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (SepConvParams, identity_sepconv, init_sepconv, prefixed,
                   separable_conv2d_bwd, separable_conv2d_fwd, upsample_to, upsample_to_bwd)
from .encoder import EmbeddingSequence

LEVEL_STRIDES = (4, 8, 16, 32)


@dataclass
class PyramidFeatures:
    maps: list[np.ndarray]  # finest first, strides 4, 8, 16, 32

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.maps]


def pyramid_shapes(H: int, W: int) -> list[tuple[int, int]]:
    """Per-level extents ceil(H / 2^i), ceil(W / 2^i) for i = 2..5."""
    return [(-(-H // s), -(-W // s)) for s in LEVEL_STRIDES]


def reconstruct_maps(seq: EmbeddingSequence) -> PyramidFeatures:
    return PyramidFeatures(seq.maps())


def flatten_maps(features: PyramidFeatures) -> EmbeddingSequence:
    return EmbeddingSequence.from_maps(features.maps)


def fuse_add(reconstructed: PyramidFeatures, backbone: PyramidFeatures) -> PyramidFeatures:
    if len(reconstructed.maps) != len(backbone.maps):
        raise ValueError(f"level count mismatch: {len(reconstructed.maps)} vs {len(backbone.maps)}")
    out = []
    for i, (r, b) in enumerate(zip(reconstructed.maps, backbone.maps)):
        if r.shape != b.shape:
            raise ValueError(f"level {i}: reconstructed {r.shape} vs backbone {b.shape}")
        out.append(r + b)
    return PyramidFeatures(out)


@dataclass
class FPEMParams:
    up: list[SepConvParams]       # smooth convs after each upsample-add, coarse to fine
    down_s2: list[SepConvParams]  # stride-2 convs on the finer level, fine to coarse
    down_s1: list[SepConvParams]  # smooth convs after each down-add


def init_fpem(rng: np.random.Generator, channels: int, dtype=np.float64) -> FPEMParams:
    def mk():
        return [init_sepconv(rng, channels, channels, dtype, scale=0.8) for _ in range(3)]
    return FPEMParams(mk(), mk(), mk())


def identity_fpem(channels: int, dtype=np.float64) -> FPEMParams:
    def mk():
        return [identity_sepconv(channels, dtype) for _ in range(3)]
    return FPEMParams(mk(), mk(), mk())


def fpem_fwd(features: PyramidFeatures, p: FPEMParams):
    f = features.maps
    if len(f) != 4:
        raise ValueError(f"fpem expects 4 levels, got {len(f)}")
    caches = {}
    # up-scale phase: coarse to fine
    up = [None, None, None, f[3]]
    for i in (2, 1, 0):
        H, W, _ = f[i].shape
        s = upsample_to(up[i + 1], H, W) + f[i]
        up[i], caches["up", i] = separable_conv2d_fwd(s, p.up[i], 1)
    # down-scale phase: fine to coarse
    down = [up[0], None, None, None]
    for i in (1, 2, 3):
        d2, caches["s2", i] = separable_conv2d_fwd(down[i - 1], p.down_s2[i - 1], 2)
        if d2.shape != up[i].shape:
            raise ValueError(f"fpem: level {i} extent {up[i].shape} is not ceil-half of level {i - 1}")
        down[i], caches["s1", i] = separable_conv2d_fwd(d2 + up[i], p.down_s1[i - 1], 1)
    return PyramidFeatures(down), (caches, [m.shape for m in f])


def fpem(features: PyramidFeatures, p: FPEMParams) -> PyramidFeatures:
    return fpem_fwd(features, p)[0]


def fpem_bwd(douts: list[np.ndarray], cache):
    caches, shapes = cache
    grads = {}

    def put(prefix, g):
        grads.update(prefixed(g, prefix))

    dup = [None, None, None, None]
    ddown = [np.array(d) for d in douts]
    for i in (3, 2, 1):
        ds, g = separable_conv2d_bwd(ddown[i], caches["s1", i])
        put(f"down_s1.{i - 1}", g)
        dup[i] = ds
        dprev, g = separable_conv2d_bwd(ds, caches["s2", i])
        put(f"down_s2.{i - 1}", g)
        ddown[i - 1] = ddown[i - 1] + dprev
    dup[0] = ddown[0]
    dfeat = [None, None, None, None]
    for i in (0, 1, 2):
        ds, g = separable_conv2d_bwd(dup[i], caches["up", i])
        put(f"up.{i}", g)
        dfeat[i] = ds
        h, w, _ = shapes[i + 1]
        dup[i + 1] = dup[i + 1] + upsample_to_bwd(ds, h, w)
    dfeat[3] = dup[3]
    return dfeat, grads


def epem_fwd(seq: EmbeddingSequence, backbone: PyramidFeatures, p: FPEMParams, enhance: bool = True):
    """Returns ``(updated_seq, f3_prime)``; ``enhance=False`` skips the FPEM stage."""
    fused = fuse_add(reconstruct_maps(seq), backbone)
    if enhance:
        out, cache = fpem_fwd(fused, p)
    else:
        out, cache = fused, None
    return (flatten_maps(out), out.maps[1]), (cache, seq.level_shapes)


def epem_forward(seq, backbone, p, enhance: bool = True):
    return epem_fwd(seq, backbone, p, enhance)[0]


def epem_bwd(dseq: np.ndarray, df3: np.ndarray, cache):
    """Gradient w.r.t. the encoder tokens (backbone features are treated as constants)."""
    fcache, shapes = cache
    douts = EmbeddingSequence(dseq, shapes).maps()
    douts = [d.copy() for d in douts]
    douts[1] += df3
    if fcache is None:
        return EmbeddingSequence.from_maps(douts).tokens, {}
    dfeat, grads = fpem_bwd(douts, fcache)
    return EmbeddingSequence.from_maps(dfeat).tokens, grads
