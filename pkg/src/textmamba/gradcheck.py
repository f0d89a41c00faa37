"""Finite-difference checks of every hand-written backward pass on micro fixtures.

Each fixture returns ``(f, params, analytic)``: a scalar function of the
arrays in ``params`` and the analytic gradient of that function. Most use a
fixed random projection ``sum(out * R)`` of the module output. Seeds are
chosen so that no ReLU pre-activation or Top-k boundary sits within the
finite-difference step of a kink.
"""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .core import GradCheckReport, finite_diff_grad, param_dict
from .decoder import (Targets, anchor_priors_bwd, anchor_priors_fwd, composite_loss_grad,
                      init_mask_head, init_refine_layer, mask_head_bwd, mask_head_fwd,
                      refine_bwd, refine_fwd, token_targets)
from .deform_attn import attn_backward, deform_attn_fwd, init_deform_attn
from .encoder import (EmbeddingSequence, MixSSMConfig, dsffn_bwd, dsffn_fwd, init_block,
                      init_dsffn, mix_ssm_block_bwd, mix_ssm_block_fwd)
from .epem import PyramidFeatures, epem_bwd, epem_fwd, init_fpem, pyramid_shapes
from .fixtures import generate_fixtures, params_from_tensors, targets_from_tensors
from .model import model_bwd, model_fwd
from .s6 import init_s6, s6_backward, s6_fwd
from .ss2d import init_ss2d, ss2d_bwd, ss2d_fwd


def _proj(out, R):
    return float((out * R).sum())


def _s6_random(rng, C, N):
    p = init_s6(rng, C, N)
    p.A_log += rng.standard_normal(p.A_log.shape) * 0.3
    p.b_delta += 1.0
    p.b_B += rng.standard_normal(N) * 0.1
    p.b_C += rng.standard_normal(N) * 0.1
    p.D += rng.standard_normal(C) * 0.1
    return p


def fixture_s6(seed: int = 0):
    rng = np.random.default_rng(seed)
    p = _s6_random(rng, 2, 3)
    x = rng.standard_normal((6, 2))
    R = rng.standard_normal((6, 2))
    _, cache = s6_fwd(x, p)
    dx, grads = s6_backward(R, cache)
    params = param_dict(p)
    params["x"], grads["x"] = x, dx
    return (lambda: _proj(s6_fwd(x, p)[0], R)), params, grads


def _ss2d_random(rng, C, N):
    p = init_ss2d(rng, C, N, zero_out=False)
    p.paths = [_s6_random(rng, C, N) for _ in range(4)]
    p.norm_g += rng.standard_normal(C) * 0.1
    p.norm_b += rng.standard_normal(C) * 0.1
    return p


def fixture_ss2d(seed: int = 0):
    # Four channels: a layer norm over two channels is nearly constant, which
    # leaves every upstream gradient at rounding-noise scale.
    rng = np.random.default_rng(seed)
    p = _ss2d_random(rng, 4, 3)
    m = rng.standard_normal((3, 3, 4))
    R = rng.standard_normal((3, 3, 4))
    _, cache = ss2d_fwd(m, p)
    dm, grads = ss2d_bwd(R, cache)
    params = param_dict(p)
    params["map"], grads["map"] = m, dm
    return (lambda: _proj(ss2d_fwd(m, p)[0], R)), params, grads


def fixture_attn(seed: int = 0, k: int = 2, renormalize: bool = False):
    rng = np.random.default_rng(seed)
    C = 4
    p = init_deform_attn(rng, C, heads=2, levels=2, points=4)
    maps = [rng.standard_normal((4, 4, C)), rng.standard_normal((2, 3, C))]
    q = rng.standard_normal((3, C))
    ref = rng.uniform(0.05, 0.95, (3, 2))
    R = rng.standard_normal((3, C))
    _, cache = deform_attn_fwd(q, maps, ref, p, k, renormalize)
    dq, dmaps, dref, grads = attn_backward(R, cache)
    params = param_dict(p)
    params.update(queries=q, map0=maps[0], map1=maps[1], ref=ref)
    grads.update(queries=dq, map0=dmaps[0], map1=dmaps[1], ref=dref)

    def f():
        out, c = deform_attn_fwd(q, maps, ref, p, k, renormalize)
        if not np.array_equal(c["mask"], cache["mask"]):
            return float("nan")  # Top-k set flipped: the probe left the differentiable piece
        return _proj(out, R)
    return f, params, grads


def fixture_dsffn(seed: int = 0):
    rng = np.random.default_rng(seed)
    p = init_dsffn(rng, 16)
    p.b_e1 += rng.standard_normal(32) * 0.1
    p.b_e2 += rng.standard_normal(64) * 0.1
    x = rng.standard_normal((8, 16))
    R = rng.standard_normal((8, 16))
    _, cache = dsffn_fwd(x, p)
    dx, grads = dsffn_bwd(R, cache)
    params = param_dict(p)
    params["x"], grads["x"] = x, dx
    return (lambda: _proj(dsffn_fwd(x, p)[0], R)), params, grads


def fixture_block(seed: int = 0):
    """Full Mix-SSM block on a 20-token, 8-channel, two-level sequence."""
    rng = np.random.default_rng(seed)
    blk = init_block(rng, 8, heads=2, levels=2, points=2, state_dim=4, zero_ss2d_out=False)
    blk.ss2d.paths = [_s6_random(rng, 8, 4) for _ in range(4)]
    seq = EmbeddingSequence(rng.standard_normal((20, 8)), [(4, 4), (2, 2)])
    cfg = MixSSMConfig(num_blocks=1, k=2)
    R = rng.standard_normal((20, 8))
    _, cache = mix_ssm_block_fwd(seq, blk, cfg)
    dx, grads = mix_ssm_block_bwd(R, cache)
    params = param_dict(blk)
    params["x"], grads["x"] = seq.tokens, dx
    return (lambda: _proj(mix_ssm_block_fwd(seq, blk, cfg)[0].tokens, R)), params, grads


def fixture_epem(seed: int = 0):
    rng = np.random.default_rng(seed)
    C = 2
    shapes = pyramid_shapes(16, 16)
    p = init_fpem(rng, C)
    seq = EmbeddingSequence(rng.standard_normal((sum(h * w for h, w in shapes), C)), shapes)
    backbone = PyramidFeatures([rng.standard_normal((h, w, C)) for h, w in shapes])
    Rs = rng.standard_normal(seq.tokens.shape)
    Rf = rng.standard_normal(shapes[1] + (C,))
    _, cache = epem_fwd(seq, backbone, p)
    dx, grads = epem_bwd(Rs, Rf, cache)
    params = param_dict(p)
    params["x"], grads["x"] = seq.tokens, dx

    def f():
        (s, f3), _ = epem_fwd(seq, backbone, p)
        return _proj(s.tokens, Rs) + _proj(f3, Rf)
    return f, params, grads


def fixture_mask_head(seed: int = 0):
    rng = np.random.default_rng(seed)
    K, n, C = 2, 4, 8
    p = init_mask_head(rng, C, n)
    p.mlp_b1 += rng.standard_normal(C) * 0.1
    Q = rng.standard_normal((K, n, C))
    f3 = rng.standard_normal((4, 4, C))
    Re = rng.standard_normal((K, C))
    Ri = rng.standard_normal((K, 4, 4))
    Rp = rng.standard_normal((K, 2))
    (_, mi), cache = mask_head_fwd(Q, f3, p)
    _, pcache = anchor_priors_fwd(mi)
    dQ, df3, grads = mask_head_bwd(Re, Ri + anchor_priors_bwd(Rp, pcache), cache)
    params = param_dict(p)
    params.update(Q=Q, f3=f3)
    grads.update(Q=dQ, f3=df3)

    def f():
        (me, mi), _ = mask_head_fwd(Q, f3, p)
        pri, _ = anchor_priors_fwd(mi)
        return _proj(me, Re) + _proj(mi, Ri) + _proj(pri, Rp)
    return f, params, grads


def fixture_refine(seed: int = 0):
    rng = np.random.default_rng(seed)
    K, n, C = 2, 4, 8
    layers = [init_refine_layer(rng, C) for _ in range(2)]
    for lp in layers:
        lp.off_b1 += rng.standard_normal(C) * 0.1
    Q = rng.standard_normal((K, n, C))
    priors = rng.uniform(0.2, 0.8, (K, 2))
    R = rng.standard_normal((2, K, n, 2))
    _, caches = refine_fwd(Q, priors, layers)
    dQ, dpri, grads = refine_bwd(R, caches)
    params = param_dict(layers)
    params.update(Q=Q, priors=priors)
    grads.update(Q=dQ, priors=dpri)
    return (lambda: _proj(refine_fwd(Q, priors, layers)[0], R)), params, grads


def fixture_losses(seed: int = 0):
    rng = np.random.default_rng(seed)
    shapes = [(2, 2), (1, 2)]
    L, K, n, T = 6, 3, 4, 2
    scores = rng.uniform(0.05, 0.95, L)
    idx = np.argsort(-scores, kind="stable")[:K]
    mask_i = rng.standard_normal((K, 4, 4))
    points = rng.uniform(0, 1, (2, K, n, 2))
    boxes = np.array([[0.1, 0.1, 0.6, 0.5], [0.4, 0.5, 0.9, 0.9]])
    targets = Targets(boxes, rng.uniform(0, 1, (T, n, 2)),
                      (rng.uniform(size=(T, 4, 4)) > 0.5).astype(float),
                      token_targets(shapes, boxes))
    bd, ds, dm, dp = composite_loss_grad(scores, idx, mask_i, points, targets)
    assignment = bd.assignment
    params = {"scores": scores, "mask_i": mask_i, "points": points}
    grads = {"scores": ds, "mask_i": dm, "points": dp}

    def f():
        return composite_loss_grad(scores, idx, mask_i, points, targets,
                                   assignment=assignment)[0].total
    return f, params, grads


E2E_CONFIG = dict(image_h=32, image_w=32, channels=8, num_proposals=4, num_blocks=2, heads=2,
                  points=2, state_dim=4, decoder_layers=2, k=2)


def fixture_e2e(seed: int = 0):
    """Full forward plus composite loss; backbone weights are fixed, all others checked."""
    cfg = RunConfig(**E2E_CONFIG, seed=seed)
    tensors = generate_fixtures(seed, cfg, num_boxes=2)
    params = params_from_tensors(cfg, tensors)
    rng = np.random.default_rng([seed, 7])
    for blk in params.encoder:  # zero-initialised output would hide the SS2D gradients
        blk.ss2d.W_out[...] = rng.standard_normal(blk.ss2d.W_out.shape) / np.sqrt(cfg.channels)
    targets = targets_from_tensors(cfg, tensors)
    image = tensors["image"]
    out, cache = model_fwd(image, params, cfg, targets)
    grads = model_bwd(cache)
    assignment = out.loss.assignment
    pieces = _pieces(out, cache)
    named = {k: v for k, v in param_dict(params).items() if not k.startswith("backbone.")}

    def f():
        o, c = model_fwd(image, params, cfg, targets, assignment=assignment)
        if any(not np.array_equal(a, b) for a, b in zip(_pieces(o, c), pieces)):
            return float("nan")  # the step crossed a ReLU kink or changed a selection
        return o.loss.total
    return f, named, grads


def _pieces(out, cache):
    """Every discrete choice of a model forward: proposal set, Top-k masks, ReLU patterns."""
    sig = [out.indices]
    for c in cache["enc"]:
        sig.append(c["attn"]["mask"])
        if "dsffn" in c:
            sig += [c["dsffn"][2] > 0, c["dsffn"][4] > 0]
    sig.append(cache["mh"][7] > 0)
    sig += [rc[8] > 0 for rc in cache["ref"]]
    return sig


MODULES = {
    "s6": (fixture_s6, None),
    "ss2d": (fixture_ss2d, None),
    "attn": (fixture_attn, None),
    "dsffn": (fixture_dsffn, None),
    "block": (fixture_block, 8),
    "epem": (fixture_epem, None),
    "mask_head": (fixture_mask_head, None),
    "refine": (fixture_refine, None),
    "losses": (fixture_losses, None),
    "e2e": (fixture_e2e, 2),
}
DEFAULT_TOL = {"e2e": 1e-3}


def default_tol(module: str) -> float:
    return DEFAULT_TOL.get(module, 1e-4)


def run_gradcheck(module: str, eps: float = 1e-4, max_entries: int | None = -1,
                  seed: int = 0) -> GradCheckReport:
    """``max_entries=-1`` uses the module's default probe budget (None probes every entry)."""
    if module not in MODULES:
        raise KeyError(module)
    build, default_entries = MODULES[module]
    f, params, grads = build(seed)
    if max_entries == -1:
        max_entries = default_entries
    return finite_diff_grad(f, params, grads, eps=eps, max_entries=max_entries)
