"""End-to-end model: set abstraction -> encoder blocks -> proxy generator ->
decoder blocks -> completion/segmentation head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import LabeledCloud
from .config import ModelConfig
from .kernels import (SAPlan, SscOutput, cscm_backward, cscm_forward, init_block, init_cscm,
                      init_proxy_generator, init_sa, proxy_generator_backward,
                      proxy_generator_forward, sa_backward, sa_forward,
                      spatial_aware_block_backward, spatial_aware_block_forward)
from .loss import Assignment, chamfer_l1_grad, loss_ssc


def init_params(cfg: ModelConfig, seed=None) -> dict:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: dict = {}
    init_sa(rng, p, cfg)
    for i in range(cfg.enc_blocks):
        init_block(rng, p, f"enc{i}", cfg.channels, cfg.hidden)
    init_proxy_generator(rng, p, "pg", cfg.channels, cfg.factors[0])
    for i in range(cfg.dec_blocks):
        init_block(rng, p, f"dec{i}", cfg.channels, cfg.hidden)
    init_cscm(rng, p, "cs", cfg.channels, cfg.hidden, cfg.factors[1], cfg.n_classes)
    return p


@dataclass(eq=False)
class ForwardState:
    out: SscOutput
    coarse: np.ndarray
    caches: dict


def forward(plan: SAPlan, p: dict, cfg: ModelConfig) -> ForwardState:
    coords = plan.proxy_coords
    feats, c_sa = sa_forward(plan, p)
    caches = {"sa": c_sa, "enc": [], "dec": []}
    for i in range(cfg.enc_blocks):
        feats, c = spatial_aware_block_forward(coords, feats, p, f"enc{i}", cfg.mode)
        caches["enc"].append(c)
    (coarse, feats), caches["pg"] = proxy_generator_forward(coords, feats, p, "pg", cfg.factors[0])
    for i in range(cfg.dec_blocks):
        feats, c = spatial_aware_block_forward(coarse, feats, p, f"dec{i}", cfg.mode)
        caches["dec"].append(c)
    out, caches["cs"] = cscm_forward(coarse, feats, p, "cs", cfg.factors[1])
    return ForwardState(out, coarse, caches)


def backward(state: ForwardState, plan: SAPlan, dpoints, dlogits, p: dict, cfg: ModelConfig,
             dcoarse=None) -> dict:
    grads: dict = {}
    c = state.caches
    dfeats, dco = cscm_backward(dpoints, dlogits, c["cs"], p, "cs", grads)
    if dcoarse is not None:
        dco = dco + dcoarse
    for i in reversed(range(cfg.dec_blocks)):
        dfeats, dc = spatial_aware_block_backward(dfeats, c["dec"][i], p, f"dec{i}", grads)
        dco = dco + dc
    dfeats, _ = proxy_generator_backward(dco, dfeats, c["pg"], p, "pg", grads)
    for i in reversed(range(cfg.enc_blocks)):
        # proxy coordinates are FPS-selected inputs, so their gradient stops here
        dfeats, _ = spatial_aware_block_backward(dfeats, c["enc"][i], p, f"enc{i}", grads)
    sa_backward(dfeats, plan, c["sa"], p, grads)
    return grads


def loss_and_grads(plan: SAPlan, p: dict, cfg: ModelConfig, gt: LabeledCloud, frozen=None):
    """Total loss terms and parameter gradients. ``frozen`` optionally fixes the
    (final, coarse) nearest-neighbour assignments."""
    state = forward(plan, p, cfg)
    final_assign, coarse_assign = frozen if frozen is not None else (None, None)
    terms, dpoints, dlogits = loss_ssc(state.out, gt, cfg.lam, final_assign)
    dcoarse = None
    if cfg.coarse_loss:
        if coarse_assign is None:
            coarse_assign = Assignment.compute(state.coarse, gt.points)
        l_coarse, dcoarse = chamfer_l1_grad(state.coarse, gt.points, coarse_assign)
        terms = type(terms)(terms.l_cd + l_coarse, terms.l_ce, terms.total + l_coarse)
    grads = backward(state, plan, dpoints, dlogits, p, cfg, dcoarse)
    return terms, grads, state
