"""Proposal selection, mask head, anchor priors, control-point refinement and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .deform_attn import reference_points
from .core import (conv1d_bwd, conv1d_fwd, inverse_sigmoid, inverse_sigmoid_bwd,
                   layer_norm_bwd, layer_norm_fwd, linear, linear_bwd, linspace_grid,
                   matmul, prefixed, relu, sigmoid, softmax, softmax_bwd)

NUM_PROPOSALS = 100
NUM_POINTS = 16
LOSS_WEIGHTS = (2.0, 5.0, 5.0)  # cls, seg, reg


@dataclass
class ProposalSet:
    embeddings: np.ndarray      # (K, n, C)
    scores: np.ndarray          # (K,) descending
    source_indices: np.ndarray  # (K,) token indices


@dataclass
class MaskHeadParams:
    qm_logits: np.ndarray  # (n,) weights of the control-point summation
    conv9_W: np.ndarray    # (9, C, C)
    conv9_b: np.ndarray
    conv1_W: np.ndarray    # (1, C, C)
    conv1_b: np.ndarray
    mlp_W1: np.ndarray     # (C, C)
    mlp_b1: np.ndarray
    mlp_W2: np.ndarray     # (C, C')
    mlp_b2: np.ndarray
    proj_W: np.ndarray     # (C, C')
    proj_b: np.ndarray


@dataclass
class RefineLayerParams:
    pos_W: np.ndarray  # (2, C)
    pos_b: np.ndarray
    Wq: np.ndarray
    bq: np.ndarray
    Wk: np.ndarray  # no key bias: it shifts every logit of a row equally and cancels in softmax
    Wv: np.ndarray
    bv: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    norm_g: np.ndarray
    norm_b: np.ndarray
    off_W1: np.ndarray  # (C, C)
    off_b1: np.ndarray
    off_W2: np.ndarray  # (C, 2)
    off_b2: np.ndarray


@dataclass
class DecoderParams:
    cls_W: np.ndarray        # (C, 1)
    cls_b: np.ndarray        # (1,)
    control_embed: np.ndarray  # (n, C) learnable control-point embeddings
    mask_head: MaskHeadParams
    layers: list[RefineLayerParams] = field(default_factory=list)


def _w(rng, i, o, dtype, scale=1.0):
    return (rng.standard_normal((i, o)) * scale / math.sqrt(i)).astype(dtype)


def init_mask_head(rng, channels: int, n: int = NUM_POINTS, mask_dim: int | None = None,
                   dtype=np.float64) -> MaskHeadParams:
    C = channels
    Cm = mask_dim or C
    z = lambda k: np.zeros(k, dtype)  # noqa: E731
    return MaskHeadParams(
        qm_logits=(rng.standard_normal(n) * 0.1).astype(dtype),
        conv9_W=(rng.standard_normal((9, C, C)) / math.sqrt(9 * C)).astype(dtype), conv9_b=z(C),
        conv1_W=(rng.standard_normal((1, C, C)) / math.sqrt(C)).astype(dtype), conv1_b=z(C),
        mlp_W1=_w(rng, C, C, dtype), mlp_b1=z(C), mlp_W2=_w(rng, C, Cm, dtype), mlp_b2=z(Cm),
        proj_W=_w(rng, C, Cm, dtype), proj_b=z(Cm),
    )


def init_refine_layer(rng, channels: int, dtype=np.float64, zero_offsets: bool = False) -> RefineLayerParams:
    C = channels
    z = lambda k: np.zeros(k, dtype)  # noqa: E731
    return RefineLayerParams(
        pos_W=_w(rng, 2, C, dtype), pos_b=z(C),
        Wq=_w(rng, C, C, dtype), bq=z(C), Wk=_w(rng, C, C, dtype),
        Wv=_w(rng, C, C, dtype), bv=z(C), Wo=_w(rng, C, C, dtype), bo=z(C),
        norm_g=np.ones(C, dtype), norm_b=z(C),
        off_W1=_w(rng, C, C, dtype), off_b1=z(C),
        off_W2=np.zeros((C, 2), dtype) if zero_offsets else _w(rng, C, 2, dtype, 0.1),
        off_b2=z(2),
    )


def init_decoder(rng, channels: int, n: int = NUM_POINTS, num_layers: int = 4,
                 dtype=np.float64) -> DecoderParams:
    return DecoderParams(
        cls_W=_w(rng, channels, 1, dtype), cls_b=np.zeros(1, dtype),
        control_embed=(rng.standard_normal((n, channels)) * 0.1).astype(dtype),
        mask_head=init_mask_head(rng, channels, n, dtype=dtype),
        layers=[init_refine_layer(rng, channels, dtype) for _ in range(num_layers)],
    )


# -- proposals -------------------------------------------------------------------

def classify_tokens(tokens: np.ndarray, cls_W: np.ndarray, cls_b: np.ndarray) -> np.ndarray:
    return sigmoid(linear(tokens, cls_W, cls_b)[:, 0])


def top_indices(scores: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K largest scores, descending; equal scores keep the lower index first."""
    if K > scores.shape[0]:
        raise ValueError(f"K={K} proposals requested from only {scores.shape[0]} tokens")
    return np.argsort(-scores, kind="stable")[:K]


def select_proposals(tokens: np.ndarray, cls_W, cls_b, control_embed: np.ndarray, K: int) -> ProposalSet:
    scores = classify_tokens(tokens, cls_W, cls_b)
    idx = top_indices(scores, K)
    Q = tokens[idx][:, None, :] + control_embed[None, :, :]
    return ProposalSet(Q, scores[idx], idx)


# -- mask head ---------------------------------------------------------------------

def mask_head_fwd(Q: np.ndarray, f3: np.ndarray, p: MaskHeadParams):
    K, n, C = Q.shape
    h, w, Cf = f3.shape
    if Cf != C or p.qm_logits.shape != (n,):
        raise ValueError(f"mask head: Q{Q.shape} incompatible with f3{f3.shape} / {p.qm_logits.shape[0]} weights")
    wq = softmax(p.qm_logits)
    Qm = (wq[None, :, None] * Q).sum(axis=1)
    c9, c9_cache = conv1d_fwd(Q, p.conv9_W, p.conv9_b)
    c1, c1_cache = conv1d_fwd(c9, p.conv1_W, p.conv1_b)
    s = sigmoid(c1.mean(axis=1))
    mask_e = s + Qm
    z1 = linear(mask_e, p.mlp_W1, p.mlp_b1)
    a1 = relu(z1)
    emb = linear(a1, p.mlp_W2, p.mlp_b2)
    f3f = f3.reshape(h * w, C)
    pf = linear(f3f, p.proj_W, p.proj_b)
    mask_i = matmul(emb, pf.T).reshape(K, h, w)
    cache = (Q, f3f, wq, c9_cache, c1_cache, s, mask_e, z1, a1, emb, pf, p, (h, w))
    return (mask_e, mask_i), cache


def mask_head(Q, f3, p):
    return mask_head_fwd(Q, f3, p)[0]


def mask_head_bwd(dmask_e, dmask_i, cache):
    """Returns ``(dQ, df3, grads)``."""
    Q, f3f, wq, c9_cache, c1_cache, s, mask_e, z1, a1, emb, pf, p, (h, w) = cache
    K, n, C = Q.shape
    g = {}
    dmi = dmask_i.reshape(K, h * w)
    demb = matmul(dmi, pf)
    dpf = matmul(dmi.T, emb)
    df3, g["proj_W"], g["proj_b"] = linear_bwd(dpf, f3f, p.proj_W)
    da1, g["mlp_W2"], g["mlp_b2"] = linear_bwd(demb, a1, p.mlp_W2)
    dme, g["mlp_W1"], g["mlp_b1"] = linear_bwd(da1 * (z1 > 0), mask_e, p.mlp_W1)
    if dmask_e is not None:
        dme = dme + dmask_e
    dQ = wq[None, :, None] * dme[:, None, :]
    dwq = (Q * dme[:, None, :]).sum(axis=(0, 2))
    g["qm_logits"] = softmax_bwd(dwq, wq)
    dr = dme * s * (1 - s)
    dc1 = np.repeat(dr[:, None, :] / n, n, axis=1)
    dc9, g["conv1_W"], g["conv1_b"] = conv1d_bwd(dc1, c1_cache)
    dQ9, g["conv9_W"], g["conv9_b"] = conv1d_bwd(dc9, c9_cache)
    dQ = dQ + dQ9
    return dQ, df3.reshape(h, w, C), g


def anchor_priors_fwd(mask_i: np.ndarray):
    K, h, w = mask_i.shape
    prob = softmax(mask_i.reshape(K, h * w), axis=1)
    grid = linspace_grid(h, w, mask_i.dtype).reshape(h * w, 2)
    return matmul(prob, grid), (prob, grid, (K, h, w))


def anchor_priors(mask_i: np.ndarray) -> np.ndarray:
    """Expected grid coordinate under the per-proposal softmax of the mask logits."""
    return anchor_priors_fwd(mask_i)[0]


def anchor_priors_bwd(dprior, cache):
    prob, grid, shape = cache
    dprob = matmul(dprior, grid.T)
    return softmax_bwd(dprob, prob, axis=1).reshape(shape)


# -- control-point refinement --------------------------------------------------------

def _refine_layer_fwd(e, pts, lp: RefineLayerParams):
    K, n, C = e.shape
    e_in = e + linear(pts, lp.pos_W, lp.pos_b)
    q = linear(e_in, lp.Wq, lp.bq)
    k = linear(e_in, lp.Wk)
    v = linear(e_in, lp.Wv, lp.bv)
    scale = 1.0 / math.sqrt(C)
    att = softmax(np.einsum("knc,kmc->knm", q, k) * scale, axis=-1)
    a = np.einsum("knm,kmc->knc", att, v)
    o = linear(a, lp.Wo, lp.bo)
    e_out, ln_cache = layer_norm_fwd(e_in + o, lp.norm_g, lp.norm_b)
    z = linear(e_out, lp.off_W1, lp.off_b1)
    hid = relu(z)
    delta = linear(hid, lp.off_W2, lp.off_b2)
    new_pts = sigmoid(inverse_sigmoid(pts) + delta)
    cache = (e_in, q, k, v, att, a, ln_cache, e_out, z, hid, pts, new_pts, scale, lp)
    return e_out, new_pts, cache


def _refine_layer_bwd(de_out, dpts_new, cache):
    e_in, q, k, v, att, a, ln_cache, e_out, z, hid, pts, new_pts, scale, lp = cache
    g = {}
    dlogit = dpts_new * new_pts * (1 - new_pts)
    dpts = inverse_sigmoid_bwd(dlogit, pts)
    dhid, g["off_W2"], g["off_b2"] = linear_bwd(dlogit, hid, lp.off_W2)
    de2, g["off_W1"], g["off_b1"] = linear_bwd(dhid * (z > 0), e_out, lp.off_W1)
    de_out = de_out + de2
    dsum, g["norm_g"], g["norm_b"] = layer_norm_bwd(de_out, ln_cache)
    da, g["Wo"], g["bo"] = linear_bwd(dsum, a, lp.Wo)
    datt = np.einsum("knc,kmc->knm", da, v)
    dv = np.einsum("knm,knc->kmc", att, da)
    dlog = softmax_bwd(datt, att, axis=-1) * scale
    dq = np.einsum("knm,kmc->knc", dlog, k)
    dk = np.einsum("knm,knc->kmc", dlog, q)
    de_in = dsum.copy()
    for key, dy, W in (("q", dq, lp.Wq), ("k", dk, lp.Wk), ("v", dv, lp.Wv)):
        dx, g[f"W{key}"], db = linear_bwd(dy, e_in, W)
        if key != "k":
            g[f"b{key}"] = db
        de_in += dx
    dp, g["pos_W"], g["pos_b"] = linear_bwd(de_in, pts, lp.pos_W)
    return de_in, dpts + dp, g


def refine_fwd(Q: np.ndarray, priors: np.ndarray, layers: list[RefineLayerParams],
               num_layers: int | None = None):
    if np.any(priors < 0) or np.any(priors > 1):
        raise ValueError("priors must lie in [0, 1]^2")
    num_layers = len(layers) if num_layers is None else num_layers
    if num_layers > len(layers):
        raise ValueError(f"{num_layers} refinement layers requested, {len(layers)} available")
    K, n, _ = Q.shape
    pts = np.broadcast_to(priors[:, None, :], (K, n, 2)).copy()
    e = Q
    outs, caches = [], []
    for lp in layers[:num_layers]:
        e, pts, c = _refine_layer_fwd(e, pts, lp)
        outs.append(pts)
        caches.append(c)
    return np.stack(outs), caches


def refine_control_points(Q, priors, layers, num_layers=None) -> np.ndarray:
    """Per-layer control points, shape (layers, K, n, 2)."""
    return refine_fwd(Q, priors, layers, num_layers)[0]


def refine_bwd(dpoints: np.ndarray, caches):
    """``dpoints`` has shape (layers, K, n, 2). Returns ``(dQ, dpriors, grads)``."""
    grads = {}
    de = np.zeros_like(caches[-1][0])
    dp = np.zeros_like(dpoints[0])
    for i in range(len(caches) - 1, -1, -1):
        de, dp, g = _refine_layer_bwd(de, dp + dpoints[i], caches[i])
        grads.update(prefixed(g, str(i)))
    return de, dp.sum(axis=1), grads


# -- losses ----------------------------------------------------------------------------

P_CLAMP = 1e-7


def focal_loss(scores, targets, alpha: float = 0.25, gamma: float = 2.0) -> float:
    return focal_loss_grad(scores, targets, alpha, gamma)[0]


def focal_loss_grad(scores, targets, alpha: float = 0.25, gamma: float = 2.0):
    """Mean focal loss and its derivative w.r.t. the (clamped) probabilities."""
    p = np.clip(scores, P_CLAMP, 1 - P_CLAMP)
    inside = (scores > P_CLAMP) & (scores < 1 - P_CLAMP)
    t = np.asarray(targets) > 0.5
    pt = np.where(t, p, 1 - p)
    at = np.where(t, alpha, 1 - alpha)
    m = pt.size
    loss = float((-at * (1 - pt) ** gamma * np.log(pt)).sum() / m)
    # d/dpt of -(1-pt)^g log pt
    if gamma == 0:
        dpt = -1.0 / pt
    else:
        dpt = gamma * (1 - pt) ** (gamma - 1) * np.log(pt) - (1 - pt) ** gamma / pt
    dp = at * dpt * np.where(t, 1.0, -1.0) / m
    return loss, dp * inside


def dice_loss(pred, gt, smooth: float = 1.0) -> float:
    return dice_loss_grad(pred, gt, smooth)[0]


def dice_loss_grad(pred, gt, smooth: float = 1.0):
    inter = (pred * gt).sum()
    den = pred.sum() + gt.sum() + smooth
    num = 2 * inter + smooth
    loss = float(1.0 - num / den)
    dpred = -(2 * gt * den - num) / den ** 2
    return loss, dpred


def weighted_total(cls: float, seg: float, reg: float, weights=LOSS_WEIGHTS) -> float:
    return weights[0] * cls + weights[1] * seg + weights[2] * reg


# -- matching ----------------------------------------------------------------------------

def matching_cost(scores, points, gt_points, weights=LOSS_WEIGHTS) -> np.ndarray:
    """(K, T) cost: w_cls * (1 - score) + w_reg * mean |points - gt|."""
    l1 = np.abs(points[:, None] - gt_points[None]).mean(axis=(2, 3))
    return weights[0] * (1.0 - scores)[:, None] + weights[2] * l1


def _assignment_cost(cost: np.ndarray) -> float:
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def match_predictions(scores, points, gt_points, weights=LOSS_WEIGHTS,
                      cost: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of targets to proposals.

    Among optimal assignments, the one whose proposal indices (read in target
    order) are lexicographically smallest is returned. Output is a list of
    ``(proposal, target)`` pairs ordered by target.
    """
    if cost is None:
        cost = matching_cost(scores, points, gt_points, weights)
    K, T = cost.shape
    if T > K:
        raise ValueError(f"{T} targets cannot be matched to {K} proposals")
    if T == 0:
        return []
    best = _assignment_cost(cost)
    tol = 1e-9 * max(1.0, abs(best))
    chosen: list[int] = []
    fixed = 0.0
    for j in range(T):
        for p_ in range(K):
            if p_ in chosen:
                continue
            trial = fixed + cost[p_, j]
            rest_rows = [r for r in range(K) if r not in chosen and r != p_]
            if j + 1 < T:
                trial += _assignment_cost(cost[np.ix_(rest_rows, range(j + 1, T))])
            if trial <= best + tol:
                chosen.append(p_)
                fixed += cost[p_, j]
                break
    return [(p_, j) for j, p_ in enumerate(chosen)]


# -- ground-truth helpers -------------------------------------------------------------------

def token_targets(level_shapes, boxes: np.ndarray) -> np.ndarray:
    """1 for tokens whose pixel centre lies inside any normalised (x0, y0, x1, y1) box."""
    ref = reference_points(level_shapes)
    t = np.zeros(ref.shape[0])
    for x0, y0, x1, y1 in boxes:
        inside = (ref[:, 0] >= x0) & (ref[:, 0] <= x1) & (ref[:, 1] >= y0) & (ref[:, 1] <= y1)
        t[inside] = 1.0
    return t


@dataclass
class Targets:
    boxes: np.ndarray       # (T, 4) normalised x0, y0, x1, y1
    polygons: np.ndarray    # (T, n, 2)
    masks: np.ndarray       # (T, h, w) binary
    token_labels: np.ndarray  # (L,)


@dataclass
class LossBreakdown:
    total: float
    cls: float
    seg: float
    reg: float
    reg_per_layer: list[float]
    assignment: list[tuple[int, int]]


def composite_loss_grad(all_scores, proposal_idx, mask_i, points, targets: Targets,
                        weights=LOSS_WEIGHTS, alpha: float = 0.25, gamma: float = 2.0,
                        assignment: list[tuple[int, int]] | None = None):
    """Weighted focal + dice + deep-supervised L1 loss and its input gradients.

    Returns ``(LossBreakdown, dscores_all, dmask_i, dpoints)``. Unmatched
    proposals receive no mask or point supervision; classification covers
    every token against ``targets.token_labels``.
    """
    T = targets.polygons.shape[0]
    K = mask_i.shape[0]
    if T > K:
        raise ValueError(f"{T} targets exceed {K} proposals")
    if assignment is None:
        assignment = match_predictions(all_scores[proposal_idx], points[-1], targets.polygons, weights)
    cls, dscores = focal_loss_grad(all_scores, targets.token_labels, alpha, gamma)
    dmask = np.zeros_like(mask_i)
    dpoints = np.zeros_like(points)
    seg = 0.0
    reg_layers = [0.0] * points.shape[0]
    if assignment:
        M = len(assignment)
        for k, j in assignment:
            prob = sigmoid(mask_i[k])
            d_loss, d_prob = dice_loss_grad(prob, targets.masks[j])
            seg += d_loss / M
            dmask[k] = weights[1] * d_prob * prob * (1 - prob) / M
        per = targets.polygons.shape[1] * 2
        for layer in range(points.shape[0]):
            for k, j in assignment:
                diff = points[layer, k] - targets.polygons[j]
                reg_layers[layer] += float(np.abs(diff).sum()) / (per * M)
                dpoints[layer, k] = weights[2] * np.sign(diff) / (per * M)
    reg = float(sum(reg_layers))
    total = weighted_total(cls, seg, reg, weights)
    breakdown = LossBreakdown(total, cls, seg, reg, reg_layers, list(assignment))
    return breakdown, weights[0] * dscores, dmask, dpoints


def composite_loss(all_scores, proposal_idx, mask_i, points, targets, weights=LOSS_WEIGHTS,
                   assignment=None) -> LossBreakdown:
    return composite_loss_grad(all_scores, proposal_idx, mask_i, points, targets, weights,
                               assignment=assignment)[0]
