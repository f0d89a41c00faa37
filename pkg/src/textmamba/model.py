"""End-to-end detector: backbone stub -> Mix-SSM encoder -> EPEM -> decoder -> loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import StubParams, init_stub, stub_forward
from .config import RunConfig
from .core import count_params, linear, linear_bwd, prefixed, sigmoid
from .decoder import (DecoderParams, LossBreakdown, Targets, anchor_priors_bwd, anchor_priors_fwd,
                      composite_loss_grad, init_decoder, mask_head_bwd, mask_head_fwd,
                      refine_bwd, refine_fwd, top_indices)
from .encoder import EmbeddingSequence, MixSSMBlockParams, encoder_bwd, encoder_fwd, init_block
from .epem import FPEMParams, epem_bwd, epem_fwd, init_fpem


@dataclass
class ModelParams:
    backbone: StubParams
    encoder: list[MixSSMBlockParams]
    epem: FPEMParams | None
    decoder: DecoderParams


def init_model(cfg: RunConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Parameters for every component the config enables."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dt = cfg.np_dtype
    C = cfg.channels
    backbone = init_stub(rng, C, dt)
    blocks = [init_block(rng, C, cfg.heads, cfg.levels, cfg.points, cfg.state_dim, dt,
                         enable_ss2d=cfg.enable_ss2d, enable_dsffn=cfg.enable_dsffn,
                         share_paths=cfg.share_ss2d_paths)
              for _ in range(cfg.num_blocks)]
    epem = init_fpem(rng, C, dt) if cfg.enable_epem else None
    decoder = init_decoder(rng, C, cfg.num_points, cfg.decoder_layers, dt)
    return ModelParams(backbone, blocks, epem, decoder)


def param_counts(cfg: RunConfig) -> dict[str, int]:
    p = init_model(cfg)
    counts = {"backbone": count_params(p.backbone),
              "encoder": count_params(p.encoder),
              "epem": count_params(p.epem) if p.epem is not None else 0,
              "decoder": count_params(p.decoder)}
    counts["total"] = sum(counts.values())
    return counts


@dataclass
class ForwardOutputs:
    s_tilde: EmbeddingSequence   # encoder output
    seq_out: EmbeddingSequence   # sequence handed to the decoder
    f3: np.ndarray
    all_scores: np.ndarray       # (L,)
    indices: np.ndarray          # (K,)
    scores: np.ndarray           # (K,)
    mask_e: np.ndarray           # (K, C)
    masks: np.ndarray            # (K, h, w) mask logits
    priors: np.ndarray           # (K, 2)
    points: np.ndarray           # (layers, K, n, 2)
    loss: LossBreakdown | None = None


def model_fwd(image: np.ndarray, params: ModelParams, cfg: RunConfig, targets: Targets | None = None,
              assignment=None):
    pyr = stub_forward(image, params.backbone)
    seq = EmbeddingSequence.from_maps(pyr.maps)
    s_tilde, enc_caches = encoder_fwd(seq, params.encoder, cfg.mix())
    if cfg.enable_epem:
        (seq_out, f3), epem_cache = epem_fwd(s_tilde, pyr, params.epem)
    else:
        seq_out, f3, epem_cache = s_tilde, s_tilde.level_map(1), None
    dec = params.decoder
    tokens = seq_out.tokens
    all_scores = sigmoid(linear(tokens, dec.cls_W, dec.cls_b)[:, 0])
    idx = top_indices(all_scores, cfg.num_proposals)
    Q = tokens[idx][:, None, :] + dec.control_embed[None, :, :]
    (mask_e, mask_i), mh_cache = mask_head_fwd(Q, f3, dec.mask_head)
    priors, pr_cache = anchor_priors_fwd(mask_i)
    points, ref_caches = refine_fwd(Q, priors, dec.layers, cfg.decoder_layers)
    out = ForwardOutputs(s_tilde, seq_out, f3, all_scores, idx, all_scores[idx], mask_e, mask_i,
                         priors, points)
    grads_in = None
    if targets is not None:
        out.loss, *grads_in = composite_loss_grad(all_scores, idx, mask_i, points, targets,
                                                  cfg.weights, cfg.focal_alpha, cfg.focal_gamma,
                                                  assignment=assignment)
    cache = dict(enc=enc_caches, epem=epem_cache, tokens=tokens, all_scores=all_scores, idx=idx,
                 mh=mh_cache, pr=pr_cache, ref=ref_caches, shapes=seq.level_shapes,
                 grads_in=grads_in, cfg=cfg, params=params)
    return out, cache


def model_forward(image, params, cfg, targets=None) -> ForwardOutputs:
    return model_fwd(image, params, cfg, targets)[0]


def model_bwd(cache, dscores_all=None, dmask_i=None, dpoints=None):
    """Gradients of the loss (or of supplied output adjoints) w.r.t. trainable parameters.

    Backbone parameters are held fixed. Keys are dotted paths matching
    ``param_dict(params)`` under the ``encoder``, ``epem`` and ``decoder`` prefixes.
    """
    if dscores_all is None:
        if cache["grads_in"] is None:
            raise ValueError("model_bwd needs either output adjoints or a forward pass with targets")
        dscores_all, dmask_i, dpoints = cache["grads_in"]
    params: ModelParams = cache["params"]
    cfg: RunConfig = cache["cfg"]
    dec = params.decoder
    idx = cache["idx"]
    tokens = cache["tokens"]
    grads = {}
    dQ_r, dpriors, g = refine_bwd(dpoints, cache["ref"])
    grads.update(prefixed(g, "decoder.layers"))
    dmask = dmask_i + anchor_priors_bwd(dpriors, cache["pr"])
    dQ_m, df3, g = mask_head_bwd(None, dmask, cache["mh"])
    grads.update(prefixed(g, "decoder.mask_head"))
    dQ = dQ_r + dQ_m
    grads["decoder.control_embed"] = dQ.sum(axis=0)
    dtok = np.zeros_like(tokens)
    np.add.at(dtok, idx, dQ.sum(axis=1))
    s = cache["all_scores"]
    dz = (dscores_all * s * (1 - s))[:, None]
    dt_cls, grads["decoder.cls_W"], grads["decoder.cls_b"] = linear_bwd(dz, tokens, dec.cls_W)
    dtok += dt_cls
    if cfg.enable_epem:
        ds_tilde, g = epem_bwd(dtok, df3, cache["epem"])
        grads.update(prefixed(g, "epem"))
    else:
        ds_tilde = dtok
        sl = EmbeddingSequence(tokens, cache["shapes"]).level_slice(1)
        ds_tilde[sl] += df3.reshape(-1, tokens.shape[1])
    _, g = encoder_bwd(ds_tilde, cache["enc"])
    grads.update(prefixed(g, "encoder"))
    return grads
