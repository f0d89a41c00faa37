"""2D selective scan: four directional flattenings, S6 per path, scatter-sum merge."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import layer_norm_fwd, layer_norm_bwd, linear, linear_bwd, prefixed
from .s6 import S6Params, init_s6, s6_backward, s6_fwd, DEFAULT_STATE_DIM

PATH_IDS = ("row_forward", "row_backward", "col_forward", "col_backward")


@dataclass(frozen=True)
class ScanPath:
    id: str
    index_map: np.ndarray  # sequence position -> row-major map position


def scan_paths(h: int, w: int) -> list[ScanPath]:
    """Row paths walk row-major; column paths walk the transposed map row-major."""
    if h < 1 or w < 1:
        raise ValueError(f"scan extents must be >= 1, got ({h}, {w})")
    row = np.arange(h * w)
    col = np.arange(h * w).reshape(h, w).T.reshape(-1)
    maps = (row, row[::-1].copy(), col, col[::-1].copy())
    return [ScanPath(pid, m) for pid, m in zip(PATH_IDS, maps)]


def cross_scan(fmap: np.ndarray) -> list[np.ndarray]:
    H, W, C = fmap.shape
    flat = fmap.reshape(H * W, C)
    return [flat[p.index_map] for p in scan_paths(H, W)]


def cross_merge(y_paths, h: int, w: int) -> np.ndarray:
    if len(y_paths) != 4:
        raise ValueError(f"cross_merge expects 4 path outputs, got {len(y_paths)}")
    for pid, y in zip(PATH_IDS, y_paths):
        if y.shape[0] != h * w:
            raise ValueError(f"cross_merge: {pid} has length {y.shape[0]}, expected {h * w}")
    C = y_paths[0].shape[1]
    out = np.zeros((h * w, C), dtype=y_paths[0].dtype)
    # fixed path order keeps the sum bit-stable
    for path, y in zip(scan_paths(h, w), y_paths):
        out[path.index_map] += y
    return out.reshape(h, w, C)


@dataclass
class SS2DParams:
    paths: list[S6Params]  # four per-path parameter sets, or one shared by all paths
    norm_g: np.ndarray
    norm_b: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    def path_params(self, i: int) -> S6Params:
        return self.paths[i if len(self.paths) == 4 else 0]


def init_ss2d(rng: np.random.Generator, channels: int, state_dim: int = DEFAULT_STATE_DIM,
              dtype=np.float64, share_paths: bool = False, zero_out: bool = True) -> SS2DParams:
    n_sets = 1 if share_paths else 4
    C = channels
    W_out = np.zeros((C, C), dtype) if zero_out else (rng.standard_normal((C, C)) / np.sqrt(C)).astype(dtype)
    return SS2DParams(
        paths=[init_s6(rng, C, state_dim, dtype) for _ in range(n_sets)],
        norm_g=np.ones(C, dtype), norm_b=np.zeros(C, dtype),
        W_out=W_out, b_out=np.zeros(C, dtype),
    )


def ss2d_fwd(fmap: np.ndarray, params: SS2DParams):
    H, W, C = fmap.shape
    seqs = cross_scan(fmap)
    ys, s6_caches = [], []
    for i, seq in enumerate(seqs):
        y, cache = s6_fwd(seq, params.path_params(i))
        ys.append(y)
        s6_caches.append(cache)
    merged = cross_merge(ys, H, W)
    normed, ln_cache = layer_norm_fwd(merged, params.norm_g, params.norm_b)
    out = linear(normed, params.W_out, params.b_out)
    return out, (fmap.shape, s6_caches, normed, ln_cache, params)


def ss2d_forward(fmap: np.ndarray, params: SS2DParams) -> np.ndarray:
    return ss2d_fwd(fmap, params)[0]


def ss2d_bwd(dout: np.ndarray, cache):
    (H, W, C), s6_caches, normed, ln_cache, params = cache
    dnormed, dW, db = linear_bwd(dout, normed, params.W_out)
    dmerged, dg, dbeta = layer_norm_bwd(dnormed, ln_cache)
    grads = {"norm_g": dg, "norm_b": dbeta, "W_out": dW, "b_out": db}
    dflat = dmerged.reshape(H * W, C)
    dmap = np.zeros((H * W, C), dtype=dout.dtype)
    for i, (path, c6) in enumerate(zip(scan_paths(H, W), s6_caches)):
        dseq, g6 = s6_backward(dflat[path.index_map], c6)
        dmap[path.index_map] += dseq
        key = f"paths.{i if len(params.paths) == 4 else 0}"
        for k, v in prefixed(g6, key).items():
            grads[k] = grads[k] + v if k in grads else v
    return dmap.reshape(H, W, C), grads
