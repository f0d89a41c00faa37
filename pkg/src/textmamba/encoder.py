"""Mix-SSM encoder: sparse deformable attention, per-level SS2D, dual-scale FFN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (layer_norm_bwd, layer_norm_fwd, linear, linear_bwd, prefixed, relu)
from .deform_attn import (DeformAttnParams, attn_backward, default_k, deform_attn_fwd,
                          init_deform_attn, reference_points)
from .s6 import DEFAULT_STATE_DIM
from .ss2d import SS2DParams, init_ss2d, ss2d_bwd, ss2d_fwd


@dataclass
class EmbeddingSequence:
    """Flattened multi-level tokens with the per-level geometry needed to unflatten."""

    tokens: np.ndarray                  # (L, C)
    level_shapes: list[tuple[int, int]]

    def __post_init__(self):
        self.level_shapes = [(int(h), int(w)) for h, w in self.level_shapes]
        total = sum(h * w for h, w in self.level_shapes)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != total:
            raise ValueError(f"level shapes {self.level_shapes} cover {total} tokens, "
                             f"sequence has shape {self.tokens.shape}")

    @property
    def level_offsets(self) -> list[int]:
        offs = [0]
        for h, w in self.level_shapes:
            offs.append(offs[-1] + h * w)
        return offs

    def level_slice(self, l: int) -> slice:
        offs = self.level_offsets
        return slice(offs[l], offs[l + 1])

    def level_map(self, l: int) -> np.ndarray:
        h, w = self.level_shapes[l]
        return self.tokens[self.level_slice(l)].reshape(h, w, -1)

    def maps(self) -> list[np.ndarray]:
        return [self.level_map(l) for l in range(len(self.level_shapes))]

    @classmethod
    def from_maps(cls, maps) -> "EmbeddingSequence":
        tokens = np.concatenate([m.reshape(-1, m.shape[-1]) for m in maps], axis=0)
        return cls(tokens, [m.shape[:2] for m in maps])


# -- DSFFN ---------------------------------------------------------------------

@dataclass
class DSFFNParams:
    norm_g: np.ndarray
    norm_b: np.ndarray
    W_e1: np.ndarray  # (C, 2C)
    b_e1: np.ndarray
    W_r1: np.ndarray  # (2C, C)
    b_r1: np.ndarray
    W_e2: np.ndarray  # (C, 4C)
    b_e2: np.ndarray
    W_r2: np.ndarray  # (4C, C)
    b_r2: np.ndarray


def init_dsffn(rng: np.random.Generator, channels: int, dtype=np.float64) -> DSFFNParams:
    C = channels

    def w(i, o):
        return (rng.standard_normal((i, o)) / math.sqrt(i)).astype(dtype)

    return DSFFNParams(np.ones(C, dtype), np.zeros(C, dtype),
                       w(C, 2 * C), np.zeros(2 * C, dtype), w(2 * C, C), np.zeros(C, dtype),
                       w(C, 4 * C), np.zeros(4 * C, dtype), w(4 * C, C), np.zeros(C, dtype))


def dsffn_fwd(x: np.ndarray, p: DSFFNParams):
    if x.shape[-1] != p.norm_g.shape[0]:
        raise ValueError(f"dsffn: input channels {x.shape[-1]} != {p.norm_g.shape[0]}")
    l_in, ln_cache = layer_norm_fwd(x, p.norm_g, p.norm_b)
    h1 = linear(l_in, p.W_e1, p.b_e1)
    a1 = relu(h1)
    h2 = linear(l_in, p.W_e2, p.b_e2)
    a2 = relu(h2)
    out = l_in + linear(a1, p.W_r1, p.b_r1) + linear(a2, p.W_r2, p.b_r2)
    return out, (l_in, ln_cache, h1, a1, h2, a2, p)


def dsffn_forward(x: np.ndarray, p: DSFFNParams) -> np.ndarray:
    return dsffn_fwd(x, p)[0]


def dsffn_bwd(dout, cache):
    l_in, ln_cache, h1, a1, h2, a2, p = cache
    g = {}
    dl = dout.copy()
    da1, g["W_r1"], g["b_r1"] = linear_bwd(dout, a1, p.W_r1)
    da2, g["W_r2"], g["b_r2"] = linear_bwd(dout, a2, p.W_r2)
    dl_1, g["W_e1"], g["b_e1"] = linear_bwd(da1 * (h1 > 0), l_in, p.W_e1)
    dl_2, g["W_e2"], g["b_e2"] = linear_bwd(da2 * (h2 > 0), l_in, p.W_e2)
    dl += dl_1 + dl_2
    dx, g["norm_g"], g["norm_b"] = layer_norm_bwd(dl, ln_cache)
    return dx, g


# -- Mix-SSM block -----------------------------------------------------------------

@dataclass
class MixSSMConfig:
    num_blocks: int = 6
    k: int | None = None          # None -> ceil(levels * points / 2)
    renormalize: bool = False
    enable_ss2d: bool = True
    enable_dsffn: bool = True
    enable_topk: bool = True

    def effective_k(self, attn: DeformAttnParams) -> int:
        dense = attn.levels * attn.points
        if not self.enable_topk:
            return dense
        return default_k(attn.levels, attn.points) if self.k is None else self.k


@dataclass
class MixSSMBlockParams:
    attn: DeformAttnParams
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    ss2d: SS2DParams | None = None
    norm2_g: np.ndarray | None = None
    norm2_b: np.ndarray | None = None
    dsffn: DSFFNParams | None = None


def init_block(rng: np.random.Generator, channels: int, heads: int = 4, levels: int = 4,
               points: int = 4, state_dim: int = DEFAULT_STATE_DIM, dtype=np.float64,
               enable_ss2d: bool = True, enable_dsffn: bool = True,
               zero_ss2d_out: bool = True, share_paths: bool = False) -> MixSSMBlockParams:
    C = channels
    blk = MixSSMBlockParams(init_deform_attn(rng, C, heads, levels, points, dtype),
                            np.ones(C, dtype), np.zeros(C, dtype))
    if enable_ss2d:
        blk.ss2d = init_ss2d(rng, C, state_dim, dtype, share_paths=share_paths, zero_out=zero_ss2d_out)
        blk.norm2_g, blk.norm2_b = np.ones(C, dtype), np.zeros(C, dtype)
    if enable_dsffn:
        blk.dsffn = init_dsffn(rng, C, dtype)
    return blk


def ss2d_stage_fwd(x1: np.ndarray, level_shapes, p: SS2DParams):
    """Run SS2D on each pyramid level independently and re-flatten."""
    seq = EmbeddingSequence(x1, level_shapes)
    outs, caches = [], []
    for l in range(len(level_shapes)):
        o, c = ss2d_fwd(seq.level_map(l), p)
        outs.append(o.reshape(-1, x1.shape[1]))
        caches.append(c)
    return np.concatenate(outs, axis=0), caches


def ss2d_stage_bwd(ds: np.ndarray, level_shapes, caches):
    seq = EmbeddingSequence(ds, level_shapes)
    dx = np.empty_like(ds)
    grads = {}
    for l, c in enumerate(caches):
        dm, g = ss2d_bwd(seq.level_map(l), c)
        dx[seq.level_slice(l)] = dm.reshape(-1, ds.shape[1])
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
    return dx, grads


def mix_ssm_block_fwd(seq: EmbeddingSequence, p: MixSSMBlockParams, cfg: MixSSMConfig):
    x = seq.tokens
    shapes = seq.level_shapes
    ref = reference_points(shapes, x.dtype)
    cache = {"shapes": shapes, "p": p, "cfg": cfg}
    # (1) sparse deformable attention, post-norm residual
    a, cache["attn"] = deform_attn_fwd(x, seq.maps(), ref, p.attn, cfg.effective_k(p.attn),
                                       cfg.renormalize)
    x1, cache["ln1"] = layer_norm_fwd(x + a, p.norm1_g, p.norm1_b)
    # (2) SS2D per level, post-norm residual
    if cfg.enable_ss2d:
        s, cache["ss2d"] = ss2d_stage_fwd(x1, shapes, p.ss2d)
        x2, cache["ln2"] = layer_norm_fwd(x1 + s, p.norm2_g, p.norm2_b)
    else:
        x2 = x1
    # (3) DSFFN, pre-norm with its residual inside
    if cfg.enable_dsffn:
        x3, cache["dsffn"] = dsffn_fwd(x2, p.dsffn)
    else:
        x3 = x2
    return EmbeddingSequence(x3, shapes), cache


def mix_ssm_block(seq, p, cfg) -> EmbeddingSequence:
    return mix_ssm_block_fwd(seq, p, cfg)[0]


def mix_ssm_block_bwd(dout: np.ndarray, cache):
    p: MixSSMBlockParams = cache["p"]
    cfg: MixSSMConfig = cache["cfg"]
    shapes = cache["shapes"]
    grads = {}
    d = dout
    if cfg.enable_dsffn:
        d, g = dsffn_bwd(d, cache["dsffn"])
        grads.update(prefixed(g, "dsffn"))
    if cfg.enable_ss2d:
        d, grads["norm2_g"], grads["norm2_b"] = layer_norm_bwd(d, cache["ln2"])
        dx1_s, g = ss2d_stage_bwd(d, shapes, cache["ss2d"])
        grads.update(prefixed(g, "ss2d"))
        d = d + dx1_s
    d, grads["norm1_g"], grads["norm1_b"] = layer_norm_bwd(d, cache["ln1"])
    dq, dmaps, _, g = attn_backward(d, cache["attn"])
    grads.update(prefixed(g, "attn"))
    dx = d + dq + EmbeddingSequence.from_maps(dmaps).tokens
    return dx, grads


def encoder_fwd(seq: EmbeddingSequence, blocks: list[MixSSMBlockParams], cfg: MixSSMConfig):
    if cfg.num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    if len(blocks) < cfg.num_blocks:
        raise ValueError(f"config asks for {cfg.num_blocks} blocks, only {len(blocks)} provided")
    caches = []
    for blk in blocks[:cfg.num_blocks]:
        seq, c = mix_ssm_block_fwd(seq, blk, cfg)
        caches.append(c)
    return seq, caches


def encoder_forward(seq, blocks, cfg) -> EmbeddingSequence:
    return encoder_fwd(seq, blocks, cfg)[0]


def encoder_bwd(dout: np.ndarray, caches):
    grads = {}
    for i in range(len(caches) - 1, -1, -1):
        dout, g = mix_ssm_block_bwd(dout, caches[i])
        grads.update(prefixed(g, str(i)))
    return dout, grads
