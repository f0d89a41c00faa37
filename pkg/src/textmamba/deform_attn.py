"""Multi-scale deformable attention with per-row Top-k sparsified weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (bilinear_sample_bwd, bilinear_sample_fwd, linear, linear_bwd,
                   softmax, softmax_bwd)


@dataclass
class DeformAttnParams:
    heads: int
    levels: int
    points: int
    W_value: np.ndarray   # (C, C)
    b_value: np.ndarray
    W_offset: np.ndarray  # (C, heads * levels * points * 2)
    b_offset: np.ndarray
    W_weight: np.ndarray  # (C, heads * levels * points)
    b_weight: np.ndarray
    W_out: np.ndarray     # (C, C)
    b_out: np.ndarray

    def __post_init__(self):
        n = self.heads * self.levels * self.points
        if self.W_offset.shape[1] != 2 * n or self.W_weight.shape[1] != n:
            raise ValueError(
                f"offset/weight projections must emit {2 * n}/{n} values, "
                f"got {self.W_offset.shape[1]}/{self.W_weight.shape[1]}")


def default_k(levels: int, points: int) -> int:
    return math.ceil(levels * points / 2)


def init_deform_attn(rng: np.random.Generator, channels: int, heads: int = 4, levels: int = 4,
                     points: int = 4, dtype=np.float64, zero_out: bool = False) -> DeformAttnParams:
    C = channels
    if C % heads:
        raise ValueError(f"channels {C} not divisible by heads {heads}")
    s = 1.0 / math.sqrt(C)
    # offsets start on rays around the reference point, one direction per head
    theta = np.arange(heads) * (2 * math.pi / heads)
    dirs = np.stack([np.cos(theta), np.sin(theta)], -1)
    dirs = dirs / np.abs(dirs).max(-1, keepdims=True)
    b_off = np.tile(dirs[:, None, None, :], (1, levels, points, 1))
    b_off *= np.arange(1, points + 1)[None, None, :, None]
    n = heads * levels * points
    return DeformAttnParams(
        heads=heads, levels=levels, points=points,
        W_value=(rng.standard_normal((C, C)) * s).astype(dtype), b_value=np.zeros(C, dtype),
        W_offset=(rng.standard_normal((C, 2 * n)) * s * 0.1).astype(dtype),
        b_offset=b_off.reshape(-1).astype(dtype),
        W_weight=(rng.standard_normal((C, n)) * s).astype(dtype), b_weight=np.zeros(n, dtype),
        W_out=(np.zeros((C, C)) if zero_out else rng.standard_normal((C, C)) * s).astype(dtype),
        b_out=np.zeros(C, dtype),
    )


def topk_mask(w: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties keep the lowest index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = w.shape[-1]
    if k >= n:
        return np.ones(w.shape, dtype=bool)
    order = np.argsort(-w, axis=-1, kind="stable")
    mask = np.zeros(w.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def topk_sparsify(w: np.ndarray, k: int) -> np.ndarray:
    """Zero all but the k largest entries of each row; kept values are unchanged."""
    return np.where(topk_mask(w, k), w, 0).astype(w.dtype, copy=False)


def reference_points(level_shapes, dtype=np.float64) -> np.ndarray:
    """Pixel-centre coordinates (x, y) in [0, 1] for every token, level by level."""
    pts = []
    for h, w in level_shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return np.concatenate(pts, axis=0).astype(dtype)


def deform_attn_fwd(queries: np.ndarray, value_maps, ref_points: np.ndarray,
                    params: DeformAttnParams, k: int | None = None, renormalize: bool = False):
    Q, C = queries.shape
    M, Lv, P = params.heads, params.levels, params.points
    if len(value_maps) != Lv:
        raise ValueError(f"expected {Lv} value maps, got {len(value_maps)}")
    if ref_points.shape != (Q, 2):
        raise ValueError(f"ref_points must be ({Q}, 2), got {ref_points.shape}")
    if np.any(ref_points < 0) or np.any(ref_points > 1):
        raise ValueError("reference points must lie in [0, 1]^2")
    k = Lv * P if k is None else k
    d = C // M
    values = [linear(m, params.W_value, params.b_value) for m in value_maps]
    offsets = linear(queries, params.W_offset, params.b_offset).reshape(Q, M, Lv, P, 2)
    logits = linear(queries, params.W_weight, params.b_weight).reshape(Q, M, Lv * P)
    w = softmax(logits, axis=-1)
    mask = topk_mask(w, k)
    kept = np.where(mask, w, 0)
    denom = None
    if renormalize:
        denom = kept.sum(axis=-1, keepdims=True)
        ws = kept / denom
    else:
        ws = kept
    scale = np.array([[m.shape[1], m.shape[0]] for m in value_maps], dtype=queries.dtype)
    loc = ref_points[:, None, None, None, :] + offsets / scale[None, None, :, None, :]
    sampled = np.empty((Q, M, Lv, P, d), dtype=queries.dtype)
    samp_caches = {}
    for l, v in enumerate(values):
        for m in range(M):
            s, cache = bilinear_sample_fwd(v[:, :, m * d:(m + 1) * d], loc[:, m, l].reshape(Q * P, 2))
            sampled[:, m, l] = s.reshape(Q, P, d)
            samp_caches[l, m] = cache
    sampled = sampled.reshape(Q, M, Lv * P, d)
    heads = (ws[..., None] * sampled).sum(axis=2)
    out = linear(heads.reshape(Q, C), params.W_out, params.b_out)
    cache = dict(queries=queries, maps=value_maps, w=w, mask=mask, kept=kept, denom=denom,
                 ws=ws, scale=scale, sampled=sampled, samp_caches=samp_caches, heads=heads,
                 params=params)
    return out, cache


def deformable_attention(queries, value_maps, ref_points, params, k=None, renormalize=False):
    return deform_attn_fwd(queries, value_maps, ref_points, params, k, renormalize)[0]


def attn_backward(dout: np.ndarray, cache):
    """Returns ``(dqueries, dvalue_maps, dref_points, grads)``; Top-k acts as a fixed mask."""
    if cache is None:
        raise ValueError("attn_backward needs the activations saved by deform_attn_fwd")
    c = cache
    p: DeformAttnParams = c["params"]
    q = c["queries"]
    Q, C = q.shape
    M, Lv, P = p.heads, p.levels, p.points
    d = C // M
    grads = {}
    dheads, grads["W_out"], grads["b_out"] = linear_bwd(dout, c["heads"].reshape(Q, C), p.W_out)
    dheads = dheads.reshape(Q, M, 1, d)
    dws = (dheads * c["sampled"]).sum(axis=-1)
    dsampled = (c["ws"][..., None] * dheads).reshape(Q, M, Lv, P, d)
    if c["denom"] is not None:
        ws, denom = c["ws"], c["denom"]
        dkept = (dws - (dws * ws).sum(axis=-1, keepdims=True)) / denom
    else:
        dkept = dws
    dw = np.where(c["mask"], dkept, 0)
    dlogits = softmax_bwd(dw, c["w"]).reshape(Q, M * Lv * P)
    dq, grads["W_weight"], grads["b_weight"] = linear_bwd(dlogits, q, p.W_weight)
    dloc = np.empty((Q, M, Lv, P, 2), dtype=q.dtype)
    dvalues = [np.zeros(m.shape[:2] + (C,), dtype=q.dtype) for m in c["maps"]]
    for l in range(Lv):
        for m in range(M):
            dv, dpts = bilinear_sample_bwd(dsampled[:, m, l].reshape(Q * P, d), c["samp_caches"][l, m])
            dvalues[l][:, :, m * d:(m + 1) * d] += dv
            dloc[:, m, l] = dpts.reshape(Q, P, 2)
    dref = dloc.sum(axis=(1, 2, 3))
    doffsets = (dloc / c["scale"][None, None, :, None, :]).reshape(Q, -1)
    dq2, grads["W_offset"], grads["b_offset"] = linear_bwd(doffsets, q, p.W_offset)
    dq += dq2
    dmaps = []
    gW = np.zeros_like(p.W_value)
    gb = np.zeros_like(p.b_value)
    for m_in, dv in zip(c["maps"], dvalues):
        dm, dWv, dbv = linear_bwd(dv, m_in, p.W_value)
        dmaps.append(dm)
        gW += dWv
        gb += dbv
    grads["W_value"], grads["b_value"] = gW, gb
    return dq, dmaps, dref, grads
