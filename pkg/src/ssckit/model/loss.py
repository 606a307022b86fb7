"""Joint completion + segmentation objective with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import LabeledCloud, NNIndex
from .kernels import SscOutput
from .layers import log_softmax, softmax


@dataclass(frozen=True, eq=False)
class Assignment:
    """Nearest-neighbour matches between prediction and ground truth."""

    pred_to_gt: np.ndarray
    gt_to_pred: np.ndarray

    @classmethod
    def compute(cls, pred: np.ndarray, gt: np.ndarray) -> "Assignment":
        return cls(NNIndex(gt).query(pred)[0], NNIndex(pred).query(gt)[0])


@dataclass(frozen=True)
class LossTerms:
    l_cd: float
    l_ce: float
    total: float


def _unit(diff):
    d = np.sqrt((diff * diff).sum(axis=1))
    safe = np.where(d > 0, d, 1.0)
    # the subgradient at coincident points is taken as zero
    return d, np.where(d[:, None] > 0, diff / safe[:, None], 0.0)


def chamfer_l1_grad(pred: np.ndarray, gt: np.ndarray, assign: Assignment):
    """Raw CD-L1 and its gradient with respect to ``pred`` for fixed matches."""
    n, m = len(pred), len(gt)
    d1, u1 = _unit(pred - gt[assign.pred_to_gt])
    d2, u2 = _unit(gt - pred[assign.gt_to_pred])
    grad = u1 / n
    np.add.at(grad, assign.gt_to_pred, -u2 / m)
    return float(d1.mean() + d2.mean()), grad


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    lp = log_softmax(logits, axis=1)
    ce = float(-lp[np.arange(n), targets].mean())
    g = softmax(logits, axis=1)
    g[np.arange(n), targets] -= 1.0
    return ce, g / n


def loss_ssc(out: SscOutput, gt: LabeledCloud, lam: float = 1.0, assignment: Assignment | None = None):
    """L_CD + lam * L_ce, with per-point targets taken from the nearest GT point.

    Returns (LossTerms, dpoints, dlogits). Passing ``assignment`` freezes the
    nearest-neighbour matches, which makes the loss smooth in the points.
    """
    if len(gt) == 0 or not gt.has_labels:
        raise ValueError("loss needs a labeled, non-empty ground truth")
    if out.points.shape[0] != out.logits.shape[0]:
        raise ValueError("points and logits row counts differ")
    if assignment is None:
        assignment = Assignment.compute(out.points, gt.points)
    l_cd, dpoints = chamfer_l1_grad(out.points, gt.points, assignment)
    targets = gt.labels[assignment.pred_to_gt]
    l_ce, dlogits = cross_entropy(out.logits, targets)
    return LossTerms(l_cd, l_ce, l_cd + lam * l_ce), dpoints, lam * dlogits
