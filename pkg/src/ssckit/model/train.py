"""Toy end-to-end training with AdamW."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..geometry import LabeledCloud, crop_range
from .config import ModelConfig
from .kernels import build_sa_plan, prepare_input
from .network import init_params, loss_and_grads

log = logging.getLogger(__name__)

MAX_TOY_PROXIES = 64
MAX_TOY_OUTPUT = 4096


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, lr=1e-4, weight_decay=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.wd * params[k])


@dataclass(frozen=True)
class LossRecord:
    step: int
    l_cd: float
    l_ce: float
    total: float


@dataclass(eq=False)
class ToyRun:
    curve: list
    params: dict
    cfg: ModelConfig

    @property
    def ratio(self) -> float:
        return self.curve[-1].total / self.curve[0].total


def normalize(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    return (points - center) / scale


def toy_problem(scene, cfg: ModelConfig, seed: int):
    """Observed input points and a labeled GT subset, both in a unit-scaled frame."""
    observed = LabeledCloud(np.concatenate([f.points_world for f in scene.frames]))
    rng = np.random.default_rng(seed)
    pts = prepare_input(observed, cfg, rng)
    gt = crop_range(scene.ground_truth, cfg.crop)
    if len(gt) == 0:
        raise ValueError("ground truth is empty after range crop")
    if len(gt) > cfg.n_gt:
        gt = gt.subset(np.sort(rng.choice(len(gt), cfg.n_gt, replace=False)))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2
    scale = float(max((hi - lo).max() / 2, 1e-9))
    plan = build_sa_plan(normalize(pts, center, scale), cfg.ratios, cfg.knn, int(rng.integers(2**31)))
    return plan, LabeledCloud(normalize(gt.points, center, scale), gt.labels)


def train_toy(scene, cfg: ModelConfig, steps: int = 300, seed: int | None = None, callback=None) -> ToyRun:
    """Train the full network on one scene; the loss curve is a pure function of the seed.

    Record i holds the loss evaluated before update i; a final record after the
    last update is appended.
    """
    if cfg.proxy_count > MAX_TOY_PROXIES or cfg.output_count > MAX_TOY_OUTPUT:
        raise ValueError(
            f"toy config too large: {cfg.proxy_count} proxies, {cfg.output_count} output points"
        )
    seed = cfg.seed if seed is None else seed
    plan, gt = toy_problem(scene, cfg, seed)
    params = init_params(cfg, seed)
    opt = AdamW(cfg.lr, cfg.weight_decay)
    curve = []
    for step in range(steps + 1):
        if not all(np.isfinite(v).all() for v in params.values()):
            raise FloatingPointError(f"training diverged at step {step}")
        try:
            terms, grads, _ = loss_and_grads(plan, params, cfg, gt)
        except ValueError as e:
            if "non-finite" not in str(e):
                raise
            raise FloatingPointError(f"training diverged at step {step}") from e
        if not np.isfinite(terms.total) or not all(np.isfinite(g).all() for g in grads.values()):
            raise FloatingPointError(f"training diverged at step {step}")
        rec = LossRecord(step, terms.l_cd, terms.l_ce, terms.total)
        curve.append(rec)
        if callback is not None:
            callback(rec)
        if step % 50 == 0:
            log.debug("step %d total %.6f (cd %.6f ce %.6f)", step, rec.total, rec.l_cd, rec.l_ce)
        if step < steps:
            opt.step(params, grads)
    return ToyRun(curve, params, cfg)
