"""Network kernels: proxy extraction, spatial-aware attention block, proxy
generator and the joint completion/segmentation head.

Each kernel is a ``*_forward`` returning (outputs, cache) and a matching
``*_backward`` that maps upstream gradients to input and parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import LabeledCloud, crop_range, farthest_point_sample
from .config import MODES, ModelConfig
from .layers import (accumulate, attention_backward, attention_forward, init_linear,
                     init_mlp, mlp_backward, mlp_forward)


@dataclass(frozen=True, eq=False)
class ProxySet:
    coords: np.ndarray  # M x 3
    features: np.ndarray  # M x C

    def __post_init__(self):
        if self.coords.shape[0] < 1 or self.coords.shape[0] != self.features.shape[0]:
            raise ValueError("proxy set needs matching, non-empty coordinate and feature rows")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite proxy features")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class SscOutput:
    points: np.ndarray  # (M * S_total) x 3
    logits: np.ndarray  # (M * S_total) x K


def check_finite(params: dict, names=None) -> None:
    for name in names if names is not None else params:
        if not np.isfinite(params[name]).all():
            raise ValueError(f"non-finite parameter {name}")


# ---------------------------------------------------------------- set abstraction

@dataclass(frozen=True, eq=False)
class SAStage:
    centers: np.ndarray  # indices into the previous level
    neighbors: np.ndarray  # (M, k) indices into the previous level
    rel: np.ndarray  # (M, k, 3) neighbour offsets from the centre


@dataclass(frozen=True, eq=False)
class SAPlan:
    levels: tuple  # coordinates of every level, input first
    stages: tuple

    @property
    def proxy_coords(self) -> np.ndarray:
        return self.levels[-1]


def build_sa_plan(points: np.ndarray, ratios, k: int, seed) -> SAPlan:
    """FPS centres and k-nearest neighbourhoods of each stage; independent of weights."""
    rng = np.random.default_rng(seed)
    levels, stages = [points], []
    cur = points
    for r in ratios:
        m = len(cur) // r
        if m < 1:
            raise ValueError("not enough points for the downsampling ratios")
        centers = farthest_point_sample(cur, m, seed=int(rng.integers(2**31)))
        kk = min(k, len(cur))
        _, nb = cKDTree(cur).query(cur[centers], k=kk)
        nb = np.asarray(nb).reshape(m, kk)
        stages.append(SAStage(centers, nb, cur[nb] - cur[centers][:, None, :]))
        cur = cur[centers]
        levels.append(cur)
    return SAPlan(tuple(levels), tuple(stages))


def init_sa(rng, params, cfg: ModelConfig, prefix: str = "sa"):
    c_prev = 0
    for i in range(len(cfg.ratios)):
        init_mlp(rng, params, f"{prefix}{i}", 3 + c_prev, cfg.channels, cfg.channels)
        c_prev = cfg.channels


def sa_forward(plan: SAPlan, p, prefix: str = "sa"):
    feats = None
    caches = []
    for i, st in enumerate(plan.stages):
        inp = st.rel if feats is None else np.concatenate([st.rel, feats[st.neighbors]], axis=-1)
        y, c = mlp_forward(inp, p, f"{prefix}{i}")
        arg = np.argmax(y, axis=1)  # (M, C)
        caches.append((c, arg, y.shape, None if feats is None else feats.shape))
        feats = np.take_along_axis(y, arg[:, None, :], axis=1)[:, 0, :]
    return feats, caches


def sa_backward(dfeats, plan: SAPlan, caches, p, grads, prefix: str = "sa"):
    for i in reversed(range(len(plan.stages))):
        st = plan.stages[i]
        c, arg, yshape, prev_shape = caches[i]
        dy = np.zeros(yshape)
        np.put_along_axis(dy, arg[:, None, :], dfeats[:, None, :], axis=1)
        din = mlp_backward(dy, c, p, f"{prefix}{i}", grads)
        if prev_shape is None:
            break
        dprev = np.zeros(prev_shape)
        np.add.at(dprev, st.neighbors, din[..., 3:])
        dfeats = dprev


def prepare_input(cloud: LabeledCloud, cfg: ModelConfig, rng) -> np.ndarray:
    """Crop, then sample exactly ``n_input`` points (with replacement if short)."""
    pts = crop_range(cloud, cfg.crop).points
    if len(pts) == 0:
        raise ValueError("empty cloud after range crop")
    replace = len(pts) < cfg.n_input
    idx = rng.choice(len(pts), size=cfg.n_input, replace=replace)
    return pts[np.sort(idx)] if not replace else pts[idx]


def extract_proxies(cloud: LabeledCloud, cfg: ModelConfig, params: dict, seed=None):
    """Three cascaded set-abstraction stages. Returns (ProxySet, plan)."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pts = prepare_input(cloud, cfg, rng)
    plan = build_sa_plan(pts, cfg.ratios, cfg.knn, int(rng.integers(2**31)))
    feats, _ = sa_forward(plan, params)
    return ProxySet(plan.proxy_coords, feats), plan


# ---------------------------------------------------------------- spatial-aware block

def init_block(rng, params, prefix: str, channels: int, hidden: int):
    c = channels
    init_mlp(rng, params, f"{prefix}.pe", 3, c, c)
    for name in ("wq", "wk", "wv"):
        params[f"{prefix}.{name}"] = rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, c))
    init_mlp(rng, params, f"{prefix}.ffn1", 2 * c, hidden, c)
    init_mlp(rng, params, f"{prefix}.ffn2", c, hidden, c)


def block_param_names(params, prefix: str) -> list[str]:
    return sorted(k for k in params if k.startswith(prefix + "."))


def spatial_aware_block_forward(coords, feats, p, prefix: str, mode: str = "local+global"):
    """Attention over proxies, fused with the max-pooled global feature.

    ``local`` drops the pooled half of the fusion input, ``global`` drops the
    attention half and the skip connection.
    """
    if mode not in MODES:
        raise ValueError(f"unknown block mode {mode!r}")
    check_finite(p, block_param_names(p, prefix))
    wq, wk, wv = p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"]
    pe, c_pe = mlp_forward(coords, p, f"{prefix}.pe")
    attn, c_att = attention_forward(feats + pe, wq, wk, wv)
    m, c = attn.shape
    g_idx = np.argmax(attn, axis=0)
    pooled = attn[g_idx, np.arange(c)]
    left = attn if mode != "global" else np.zeros_like(attn)
    right = np.broadcast_to(pooled, (m, c)) if mode != "local" else np.zeros_like(attn)
    h, c1 = mlp_forward(np.concatenate([left, right], axis=1), p, f"{prefix}.ffn1")
    z = h + attn if mode != "global" else h
    out, c2 = mlp_forward(z, p, f"{prefix}.ffn2")
    return out, (mode, c_pe, c_att, g_idx, c1, c2, attn)


def spatial_aware_block_backward(dout, cache, p, prefix: str, grads):
    """Returns (dfeats, dcoords)."""
    mode, c_pe, c_att, g_idx, c1, c2, attn = cache
    m, c = attn.shape
    dz = mlp_backward(dout, c2, p, f"{prefix}.ffn2", grads)
    dcat = mlp_backward(dz, c1, p, f"{prefix}.ffn1", grads)
    dattn = np.zeros_like(attn)
    if mode != "global":
        dattn += dz + dcat[:, :c]
    if mode != "local":
        dattn[g_idx, np.arange(c)] += dcat[:, c:].sum(axis=0)
    wq, wk, wv = p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"]
    dx, dwq, dwk, dwv = attention_backward(dattn, c_att, wq, wk, wv)
    accumulate(grads, f"{prefix}.wq", dwq)
    accumulate(grads, f"{prefix}.wk", dwk)
    accumulate(grads, f"{prefix}.wv", dwv)
    dcoords = mlp_backward(dx, c_pe, p, f"{prefix}.pe", grads)
    return dx, dcoords


def spatial_aware_block(proxies: ProxySet, params: dict, prefix: str = "blk", mode: str = "local+global") -> np.ndarray:
    return spatial_aware_block_forward(proxies.coords, proxies.features, params, prefix, mode)[0]


# ---------------------------------------------------------------- proxy generator

def init_proxy_generator(rng, params, prefix: str, channels: int, factor: int,
                         offset_scale: float = 0.1, zero_offsets: bool = False):
    c = channels
    init_linear(rng, params, f"{prefix}.expand", c, factor * c)
    init_linear(rng, params, f"{prefix}.offset", c, 3, scale=0.0 if zero_offsets else 1.0)
    params[f"{prefix}.offset_scale"] = np.full(3, float(offset_scale))


def proxy_generator_forward(coords, feats, p, prefix: str, factor: int):
    """Each proxy grows ``factor`` children: expanded features plus a bounded
    offset (|offset| <= |offset_scale| per axis) from the parent coordinate."""
    m, c = feats.shape
    e = (feats @ p[f"{prefix}.expand.w"] + p[f"{prefix}.expand.b"]).reshape(m * factor, -1)
    t = np.tanh(e @ p[f"{prefix}.offset.w"] + p[f"{prefix}.offset.b"])
    child = np.repeat(coords, factor, axis=0) + t * p[f"{prefix}.offset_scale"]
    return (child, e), (feats, e, t, factor)


def proxy_generator_backward(dchild, de, cache, p, prefix: str, grads):
    """Returns (dfeats, dcoords)."""
    feats, e, t, factor = cache
    m = feats.shape[0]
    scale = p[f"{prefix}.offset_scale"]
    accumulate(grads, f"{prefix}.offset_scale", (dchild * t).sum(axis=0))
    dr = dchild * scale * (1.0 - t * t)
    accumulate(grads, f"{prefix}.offset.w", e.T @ dr)
    accumulate(grads, f"{prefix}.offset.b", dr.sum(axis=0))
    de_total = (de + dr @ p[f"{prefix}.offset.w"].T).reshape(m, -1)
    accumulate(grads, f"{prefix}.expand.w", feats.T @ de_total)
    accumulate(grads, f"{prefix}.expand.b", de_total.sum(axis=0))
    dfeats = de_total @ p[f"{prefix}.expand.w"].T
    dcoords = dchild.reshape(m, factor, 3).sum(axis=1)
    return dfeats, dcoords


def proxy_generator(proxies: ProxySet, factor: int, params: dict, prefix: str = "pg") -> ProxySet:
    (child, e), _ = proxy_generator_forward(proxies.coords, proxies.features, params, prefix, factor)
    return ProxySet(child, e)


# ---------------------------------------------------------------- completion + segmentation

def init_cscm(rng, params, prefix: str, channels: int, hidden: int, factor: int, n_classes: int,
              offset_scale: float = 0.1):
    c = channels
    init_linear(rng, params, f"{prefix}.expand", c, factor * c)
    init_mlp(rng, params, f"{prefix}.rebuild", c, hidden, 3, out_scale=offset_scale)
    init_mlp(rng, params, f"{prefix}.seg", c, hidden, n_classes)


def cscm_forward(coords, feats, p, prefix: str, factor: int):
    """Expanded features drive both a per-point offset head and a class head."""
    n, c = feats.shape
    e = (feats @ p[f"{prefix}.expand.w"] + p[f"{prefix}.expand.b"]).reshape(n * factor, -1)
    offsets, c_rb = mlp_forward(e, p, f"{prefix}.rebuild")
    logits, c_seg = mlp_forward(e, p, f"{prefix}.seg")
    points = np.repeat(coords, factor, axis=0) + offsets
    return SscOutput(points, logits), (feats, factor, c_rb, c_seg)


def cscm_backward(dpoints, dlogits, cache, p, prefix: str, grads):
    """Returns (dfeats, dcoords)."""
    feats, factor, c_rb, c_seg = cache
    n = feats.shape[0]
    de = mlp_backward(dpoints, c_rb, p, f"{prefix}.rebuild", grads)
    de = de + mlp_backward(dlogits, c_seg, p, f"{prefix}.seg", grads)
    de = de.reshape(n, -1)
    accumulate(grads, f"{prefix}.expand.w", feats.T @ de)
    accumulate(grads, f"{prefix}.expand.b", de.sum(axis=0))
    return de @ p[f"{prefix}.expand.w"].T, dpoints.reshape(n, factor, 3).sum(axis=1)


def cscm(proxies: ProxySet, factor: int, params: dict, prefix: str = "cs") -> SscOutput:
    return cscm_forward(proxies.coords, proxies.features, params, prefix, factor)[0]
