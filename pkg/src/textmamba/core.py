"""Dense-array primitives with hand-written adjoints.

Arrays are plain ``numpy.ndarray`` values (row-major, f32 or f64). Every op
that accumulates (matmul, convolutions) does so in a fixed loop order so the
result is bit-identical to a naive scalar loop visiting terms in the same
order. Ops that need a backward pass come in pairs: ``<op>_fwd`` returns
``(out, cache)`` and ``<op>_bwd`` consumes the cache.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


def check_dtype(x: np.ndarray) -> None:
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {x.dtype}; expected float32 or float64")


# -- parameter containers ---------------------------------------------------

def named_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every array inside nested dataclasses/lists.

    Arrays are yielded by reference, so in-place edits (finite differences,
    fixture loading) reach the owning parameter object.
    """
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from named_arrays(item, name)


def param_dict(obj, prefix: str = "") -> dict[str, np.ndarray]:
    return dict(named_arrays(obj, prefix))


def count_params(obj) -> int:
    return sum(a.size for _, a in named_arrays(obj))


def prefixed(grads: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


# -- shapes -------------------------------------------------------------------

def reshape(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return np.ascontiguousarray(x).reshape(shape)


def add_leading(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise sum allowing ``y`` to broadcast over one leading axis of ``x``."""
    if x.shape == y.shape or x.shape[1:] == y.shape:
        return x + y
    raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


# -- dense algebra ----------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` accumulated over the inner axis in ascending index order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: a{a.shape} x b{b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for p in range(a.shape[1]):
        out += a[:, p, None] * b[None, p, :]
    return out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (Cin, Cout)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input channels {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), w)
    if b is not None:
        y += b
    return y.reshape(*lead, w.shape[1])


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)`` for :func:`linear`."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = matmul(dy2, w.T).reshape(x.shape)
    dw = matmul(x2.T, dy2)
    db = dy2.sum(axis=0)
    return dx, dw, db


# -- elementwise ----------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def inverse_sigmoid(p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    return np.log(np.maximum(p, eps) / np.maximum(1.0 - p, eps))


def inverse_sigmoid_bwd(dz: np.ndarray, p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    lo = np.maximum(p, eps)
    hi = np.maximum(1.0 - p, eps)
    return dz * ((p > eps) / lo + ((1.0 - p) > eps) / hi)


# -- normalisation / softmax ----------------------------------------------------

def layer_norm_fwd(x, gamma, beta, eps: float = 1e-5):
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"layer_norm: channel extent {C} does not match gamma{gamma.shape}/beta{beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return layer_norm_fwd(x, gamma, beta, eps)[0]


def layer_norm_bwd(dy, cache):
    xhat, rstd, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


# -- convolutions -----------------------------------------------------------------

def conv1d_fwd(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-length 1D convolution along axis 1 of ``x`` (K, n, Cin).

    ``weight`` has shape (kernel, Cin, Cout); zero padding ``kernel // 2`` on
    both sides. One running sum per output, over taps then input channels.
    """
    ks = weight.shape[0]
    if ks % 2 == 0:
        raise ValueError(f"conv1d: even kernel size {ks} is not supported")
    if x.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ValueError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    K, n, cin = x.shape
    pad = ks // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros((K, n, weight.shape[2]), dtype=np.result_type(x, weight))
    for j in range(ks):
        for c in range(cin):
            out += xp[:, j:j + n, c, None] * weight[j, c]
    out += bias
    return out, (xp, weight)


def conv1d(x, weight, bias):
    return conv1d_fwd(x, weight, bias)[0]


def conv1d_bwd(dy, cache):
    xp, weight = cache
    ks, cin, cout = weight.shape
    K, n, _ = dy.shape
    pad = ks // 2
    dy2 = dy.reshape(K * n, cout)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight)
    for j in range(ks):
        xs = xp[:, j:j + n, :].reshape(K * n, cin)
        dw[j] = matmul(xs.T, dy2)
        dxp[:, j:j + n, :] += matmul(dy2, weight[j].T).reshape(K, n, cin)
    return dxp[:, pad:pad + n, :], dw, dy2.sum(axis=0)


@dataclass
class SepConvParams:
    """Depthwise 3x3 followed by pointwise 1x1, both with bias."""

    dw: np.ndarray      # (3, 3, C)
    dw_b: np.ndarray    # (C,)
    pw: np.ndarray      # (C, Cout)
    pw_b: np.ndarray    # (Cout,)


def init_sepconv(rng: np.random.Generator, cin: int, cout: int, dtype=np.float64,
                 scale: float = 1.0) -> SepConvParams:
    return SepConvParams(
        dw=(rng.standard_normal((3, 3, cin)) * scale / 3.0).astype(dtype),
        dw_b=(rng.standard_normal(cin) * 0.01).astype(dtype),
        pw=(rng.standard_normal((cin, cout)) * scale / math.sqrt(cin)).astype(dtype),
        pw_b=(rng.standard_normal(cout) * 0.01).astype(dtype),
    )


def identity_sepconv(C: int, dtype=np.float64) -> SepConvParams:
    dw = np.zeros((3, 3, C), dtype=dtype)
    dw[1, 1, :] = 1.0
    return SepConvParams(dw=dw, dw_b=np.zeros(C, dtype), pw=np.eye(C, dtype=dtype),
                         pw_b=np.zeros(C, dtype))


def separable_conv2d_fwd(x: np.ndarray, p: SepConvParams, stride: int = 1):
    if stride not in (1, 2):
        raise ValueError(f"separable_conv2d: stride must be 1 or 2, got {stride}")
    H, W, C = x.shape
    if p.dw.shape != (3, 3, C):
        raise ValueError(f"separable_conv2d: depthwise weight {p.dw.shape} does not match input channels {C}")
    Ho, Wo = -(-H // stride), -(-W // stride)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    dwo = np.zeros((Ho, Wo, C), dtype=np.result_type(x, p.dw))
    for ky in range(3):
        for kx in range(3):
            win = xp[ky:ky + stride * (Ho - 1) + 1:stride, kx:kx + stride * (Wo - 1) + 1:stride, :]
            dwo += p.dw[ky, kx] * win
    dwo += p.dw_b
    out = matmul(dwo.reshape(Ho * Wo, C), p.pw) + p.pw_b
    return out.reshape(Ho, Wo, -1), (xp, dwo, p, stride)


def separable_conv2d(x, p: SepConvParams, stride: int = 1):
    return separable_conv2d_fwd(x, p, stride)[0]


def separable_conv2d_bwd(dy, cache):
    """Returns ``(dx, grads)`` with grads keyed like :class:`SepConvParams`."""
    xp, dwo, p, stride = cache
    Ho, Wo, cout = dy.shape
    C = dwo.shape[2]
    dy2 = dy.reshape(Ho * Wo, cout)
    g_pw = matmul(dwo.reshape(Ho * Wo, C).T, dy2)
    g_pwb = dy2.sum(axis=0)
    ddwo = matmul(dy2, p.pw.T).reshape(Ho, Wo, C)
    g_dwb = ddwo.sum(axis=(0, 1))
    g_dw = np.zeros_like(p.dw)
    dxp = np.zeros_like(xp)
    for ky in range(3):
        for kx in range(3):
            sl = (slice(ky, ky + stride * (Ho - 1) + 1, stride),
                  slice(kx, kx + stride * (Wo - 1) + 1, stride))
            g_dw[ky, kx] = (ddwo * xp[sl]).sum(axis=(0, 1))
            dxp[sl] += p.dw[ky, kx] * ddwo
    grads = {"dw": g_dw, "dw_b": g_dwb, "pw": g_pw, "pw_b": g_pwb}
    return dxp[1:-1, 1:-1, :], grads


def upsample_to(x: np.ndarray, H: int, W: int) -> np.ndarray:
    """Nearest-neighbour x2 upsampling cropped to (H, W)."""
    iy = np.arange(H) // 2
    ix = np.arange(W) // 2
    return x[iy][:, ix]


def upsample_to_bwd(dy: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W, C = dy.shape
    dx = np.zeros((h, w, C), dtype=dy.dtype)
    iy = np.arange(H) // 2
    ix = np.arange(W) // 2
    np.add.at(dx, (iy[:, None], ix[None, :]), dy)
    return dx


# -- sampling -------------------------------------------------------------------

def bilinear_sample_fwd(fmap: np.ndarray, points: np.ndarray):
    """Sample ``fmap`` (H, W, C) at normalised ``points`` (P, 2) given as (x, y).

    Pixel (i, j) has its centre at ((j + 0.5) / W, (i + 0.5) / H); taps that
    fall outside the map read zero.
    """
    H, W, C = fmap.shape
    px = points[:, 0] * W - 0.5
    py = points[:, 1] * H - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    out = np.zeros((points.shape[0], C), dtype=np.result_type(fmap, points))
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy_
        xx = x0 + dx_
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        yc = np.clip(yy, 0, H - 1)
        xc = np.clip(xx, 0, W - 1)
        v = fmap[yc, xc] * valid[:, None]
        wy = fy if dy_ else 1.0 - fy
        wx = fx if dx_ else 1.0 - fx
        out += (wy * wx)[:, None] * v
        taps.append((yc, xc, valid, v))
    return out, (fmap.shape, fx, fy, taps)


def bilinear_sample(fmap, points):
    return bilinear_sample_fwd(fmap, points)[0]


def bilinear_sample_bwd(dout: np.ndarray, cache):
    """Returns ``(dmap, dpoints)``."""
    (H, W, C), fx, fy, taps = cache
    dmap = np.zeros((H, W, C), dtype=dout.dtype)
    dfx = np.zeros_like(fx)
    dfy = np.zeros_like(fy)
    for (dy_, dx_), (yc, xc, valid, v) in zip(((0, 0), (0, 1), (1, 0), (1, 1)), taps):
        wy = fy if dy_ else 1.0 - fy
        wx = fx if dx_ else 1.0 - fx
        np.add.at(dmap, (yc, xc), dout * ((wy * wx) * valid)[:, None])
        dv = (dout * v).sum(axis=1)
        dfx += dv * wy * (1.0 if dx_ else -1.0)
        dfy += dv * wx * (1.0 if dy_ else -1.0)
    dpoints = np.stack([dfx * W, dfy * H], axis=1)
    return dmap, dpoints


def linspace_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """(h, w, 2) grid of (x, y) coordinates spanning [0, 1]; unit axes sit at 0.5."""
    if h < 1 or w < 1:
        raise ValueError(f"linspace_grid: extents must be >= 1, got ({h}, {w})")
    xs = np.linspace(0.0, 1.0, w) if w > 1 else np.array([0.5])
    ys = np.linspace(0.0, 1.0, h) if h > 1 else np.array([0.5])
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


# -- gradient oracle ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter_errors: dict[str, float]
    epsilon: float
    nonfinite: list[str] = field(default_factory=list)  # "name[flat index]" probes with non-finite f
    probes: int = 0

    def passed(self, tol: float) -> bool:
        """Non-finite probes are reported but do not fail the check."""
        return self.probes > len(self.nonfinite) and self.max_relative_error <= tol

    def to_dict(self) -> dict:
        return {"max_relative_error": self.max_relative_error,
                "epsilon": self.epsilon,
                "probes": self.probes,
                "per_parameter_errors": self.per_parameter_errors,
                "nonfinite": self.nonfinite}


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|, 1e-8)`` using L2 norms over the compared entries."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / den)


def finite_diff_grad(f: Callable[[], float], params: Mapping[str, np.ndarray],
                     analytic: Mapping[str, np.ndarray], eps: float = 1e-4,
                     max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare ``analytic`` gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the arrays in ``params``, which are
    perturbed in place one scalar at a time and restored afterwards. With
    ``max_entries`` set, at most that many seeded entries per parameter are
    probed. Probes where ``f`` is non-finite on either side are listed in
    ``nonfinite`` and left out of the error; fixtures use this to mark steps
    that would cross a kink or change a discrete selection.
    """
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    nonfinite: list[str] = []
    probes = 0
    for name, arr in params.items():
        if name not in analytic:
            raise KeyError(f"no analytic gradient for parameter {name!r}")
        g = np.asarray(analytic[name])
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name!r}")
        if not arr.flags.c_contiguous:
            raise ValueError(f"parameter {name!r} must be C-contiguous to perturb in place")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for out_i, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            num[out_i] = (fp - fm) / (2 * eps)
        probes += idx.size
        ok = np.isfinite(num)
        nonfinite += [f"{name}[{i}]" for i in idx[~ok]]
        if ok.any():
            errors[name] = relative_error(g.reshape(-1)[idx[ok]], num[ok])
    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(worst, errors, eps, nonfinite, probes)
