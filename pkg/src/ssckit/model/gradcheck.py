"""Central finite-difference certification of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import LabeledCloud
from .config import ModelConfig
from .kernels import (build_sa_plan, cscm_backward, cscm_forward, init_block, init_cscm,
                      init_proxy_generator, init_sa, proxy_generator_backward,
                      proxy_generator_forward, sa_backward, sa_forward,
                      spatial_aware_block_backward, spatial_aware_block_forward)
from .layers import attention_backward, attention_forward
from .loss import Assignment, loss_ssc
from .network import init_params, loss_and_grads

KERNELS = ("spatial_aware_block", "proxy_generator", "cscm", "loss_ssc")
EXTRA_KERNELS = ("set_abstraction", "model")
TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    kernel: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(a, n, floor: float = 1e-6):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _probe(rng, like):
    return rng.normal(size=like.shape)


# Each case returns (params, f, grad): f(params) -> scalar, grad(params) -> dict.
# Inputs are stored under "in.*" so that input gradients are certified too.

def _case_block(rng, mode="local+global", m=8, c=16, hidden=32):
    p = {"in.coords": rng.normal(size=(m, 3)), "in.feats": rng.normal(size=(m, c))}
    init_block(rng, p, "blk", c, hidden)
    w = rng.normal(size=(m, c))

    def f(p):
        return float((w * spatial_aware_block_forward(p["in.coords"], p["in.feats"], p, "blk", mode)[0]).sum())

    def grad(p):
        _, cache = spatial_aware_block_forward(p["in.coords"], p["in.feats"], p, "blk", mode)
        g = {}
        g["in.feats"], g["in.coords"] = spatial_aware_block_backward(w, cache, p, "blk", g)
        return g

    return p, f, grad


def _case_proxy_generator(rng, m=8, c=16, factor=4):
    p = {"in.coords": rng.normal(size=(m, 3)), "in.feats": rng.normal(size=(m, c))}
    init_proxy_generator(rng, p, "pg", c, factor, offset_scale=0.5)
    w_child = rng.normal(size=(m * factor, 3))
    w_feat = rng.normal(size=(m * factor, c))

    def f(p):
        (child, e), _ = proxy_generator_forward(p["in.coords"], p["in.feats"], p, "pg", factor)
        return float((w_child * child).sum() + (w_feat * e).sum())

    def grad(p):
        _, cache = proxy_generator_forward(p["in.coords"], p["in.feats"], p, "pg", factor)
        g = {}
        g["in.feats"], g["in.coords"] = proxy_generator_backward(w_child, w_feat, cache, p, "pg", g)
        return g

    return p, f, grad


def _case_cscm(rng, m=8, c=16, factor=4, k=4, hidden=32):
    p = {"in.coords": rng.normal(size=(m, 3)), "in.feats": rng.normal(size=(m, c))}
    init_cscm(rng, p, "cs", c, hidden, factor, k, offset_scale=0.5)
    w_pts = rng.normal(size=(m * factor, 3))
    w_log = rng.normal(size=(m * factor, k))

    def f(p):
        out, _ = cscm_forward(p["in.coords"], p["in.feats"], p, "cs", factor)
        return float((w_pts * out.points).sum() + (w_log * out.logits).sum())

    def grad(p):
        _, cache = cscm_forward(p["in.coords"], p["in.feats"], p, "cs", factor)
        g = {}
        g["in.feats"], g["in.coords"] = cscm_backward(w_pts, w_log, cache, p, "cs", g)
        return g

    return p, f, grad


def _case_loss(rng, m=8, c=16, factor=4, k=4, hidden=32, lam=1.0):
    """loss_ssc composed with cscm; nearest-neighbour matches frozen at the base point."""
    p = {"in.coords": rng.normal(size=(m, 3)), "in.feats": rng.normal(size=(m, c))}
    init_cscm(rng, p, "cs", c, hidden, factor, k, offset_scale=0.5)
    gt = LabeledCloud(rng.normal(size=(3 * m, 3)), rng.integers(0, k, size=3 * m))
    out0, _ = cscm_forward(p["in.coords"], p["in.feats"], p, "cs", factor)
    frozen = Assignment.compute(out0.points, gt.points)

    def f(p):
        out, _ = cscm_forward(p["in.coords"], p["in.feats"], p, "cs", factor)
        return loss_ssc(out, gt, lam, frozen)[0].total

    def grad(p):
        out, cache = cscm_forward(p["in.coords"], p["in.feats"], p, "cs", factor)
        _, dpts, dlog = loss_ssc(out, gt, lam, frozen)
        g = {}
        g["in.feats"], g["in.coords"] = cscm_backward(dpts, dlog, cache, p, "cs", g)
        return g

    return p, f, grad


def _case_set_abstraction(rng, n=128, c=16):
    cfg = ModelConfig.toy(n_input=n, channels=c)
    plan = build_sa_plan(rng.normal(size=(n, 3)), cfg.ratios, cfg.knn, int(rng.integers(2**31)))
    p = {}
    init_sa(rng, p, cfg)
    w = rng.normal(size=(len(plan.proxy_coords), c))

    def f(p):
        return float((w * sa_forward(plan, p)[0]).sum())

    def grad(p):
        _, caches = sa_forward(plan, p)
        g = {}
        sa_backward(w, plan, caches, p, g)
        return g

    return p, f, grad


def _case_model(rng, n=128):
    cfg = ModelConfig.toy(n_input=n, factors=(2, 2), n_classes=4, hidden=16, channels=8, coarse_loss=True)
    pts = rng.normal(size=(n, 3))
    plan = build_sa_plan(pts, cfg.ratios, cfg.knn, int(rng.integers(2**31)))
    gt = LabeledCloud(rng.normal(size=(64, 3)), rng.integers(0, cfg.n_classes, size=64))
    p = init_params(cfg, int(rng.integers(2**31)))
    _, _, state = loss_and_grads(plan, p, cfg, gt)
    frozen = (Assignment.compute(state.out.points, gt.points), Assignment.compute(state.coarse, gt.points))

    def f(p):
        return loss_and_grads(plan, p, cfg, gt, frozen)[0].total

    def grad(p):
        return loss_and_grads(plan, p, cfg, gt, frozen)[1]

    return p, f, grad


_CASES = {
    "spatial_aware_block": _case_block,
    "proxy_generator": _case_proxy_generator,
    "cscm": _case_cscm,
    "loss_ssc": _case_loss,
    "set_abstraction": _case_set_abstraction,
    "model": _case_model,
}


def check_case(name, p, f, grad, rng, n_coords=200, step=1e-5) -> GradCheckResult:
    g = grad(p)
    for k, v in g.items():
        if not np.isfinite(v).all():
            raise ValueError(f"{name}: non-finite gradient for {k}")
    # sample coordinates uniformly over every leaf that receives a gradient
    slots = [(k, i) for k in sorted(g) for i in range(p[k].size)]
    picks = rng.choice(len(slots), size=min(n_coords, len(slots)), replace=False)
    worst = 0.0
    for s in picks:
        key, i = slots[s]
        arr = p[key].reshape(-1)
        orig = arr[i]
        arr[i] = orig + step
        fp = f(p)
        arr[i] = orig - step
        fm = f(p)
        arr[i] = orig
        num = (fp - fm) / (2 * step)
        worst = max(worst, float(relative_error(g[key].reshape(-1)[i], num)))
    return GradCheckResult(name, worst, len(picks))


def grad_check(kernel: str, seed: int = 0, n_coords: int = 200, step: float = 1e-5, **kw) -> GradCheckResult:
    if kernel not in _CASES:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {sorted(_CASES)}")
    rng = np.random.default_rng(seed)
    p, f, grad = _CASES[kernel](rng, **kw)
    return check_case(kernel, p, f, grad, rng, n_coords, step)


def linear_probe_check(seed: int = 0, m: int = 8, c: int = 16, step: float = 1e-5) -> float:
    """Attention with W_K = 0: every key is equal, the softmax is uniform and the
    output is linear in x and W_V, so central differences are exact up to rounding."""
    rng = np.random.default_rng(seed)
    p = {"x": rng.normal(size=(m, c)), "wq": rng.normal(size=(c, c)), "wv": rng.normal(size=(c, c))}
    wk = np.zeros((c, c))
    w = rng.normal(size=(m, c))

    def f(p):
        return float((w * attention_forward(p["x"], p["wq"], wk, p["wv"])[0]).sum())

    def grad(p):
        _, cache = attention_forward(p["x"], p["wq"], wk, p["wv"])
        dx, _, _, dwv = attention_backward(w, cache, p["wq"], wk, p["wv"])
        return {"x": dx, "wv": dwv}

    worst = 0.0
    g = grad(p)
    for key in ("x", "wv"):
        arr = p[key].reshape(-1)
        for i in range(arr.size):
            orig = arr[i]
            arr[i] = orig + step
            fp = f(p)
            arr[i] = orig - step
            fm = f(p)
            arr[i] = orig
            worst = max(worst, abs(g[key].reshape(-1)[i] - (fp - fm) / (2 * step)))
    return worst
