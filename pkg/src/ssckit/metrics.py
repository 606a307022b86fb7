"""Completion and segmentation metrics over unmatched point sets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classes import NUM_CLASSES, SCORED_CLASSES, SemanticClass
from .formats import MetricsReport
from .geometry import LabeledCloud, NNIndex, _as_points

REPORT_SCALE = 1000.0


@dataclass(frozen=True)
class ChamferResult:
    """Raw (unscaled) Chamfer terms; ``cd_l1``/``cd_l2`` give the x1000 report values."""

    l1: float
    l2: float

    @property
    def cd_l1(self) -> float:
        return self.l1 * REPORT_SCALE

    @property
    def cd_l2(self) -> float:
        return self.l2 * REPORT_SCALE


def _nonempty(points, what: str) -> np.ndarray:
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise ValueError(f"undefined Chamfer: {what} is empty")
    return pts


def directed_distances(a, b, workers: int = 1, index_b: NNIndex | None = None) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    index_b = index_b or NNIndex(b)
    return index_b.query(a, workers=workers)[1]


def chamfer(pred, gt, workers: int = 1) -> ChamferResult:
    """Sum of the two directed mean nearest-neighbour distances (not halved)."""
    p = _nonempty(pred, "prediction")
    q = _nonempty(gt, "ground truth")
    d_pq = directed_distances(p, q, workers)
    d_qp = directed_distances(q, p, workers)
    return ChamferResult(
        l1=float(d_pq.mean() + d_qp.mean()),
        l2=float((d_pq**2).mean() + (d_qp**2).mean()),
    )


def f1_at(pred, gt, threshold: float, workers: int = 1) -> float:
    """F1 in percent; a point matches when within ``threshold`` of the other set."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    p = _nonempty(pred, "prediction")
    q = _nonempty(gt, "ground truth")
    precision = float((directed_distances(p, q, workers) <= threshold).mean())
    recall = float((directed_distances(q, p, workers) <= threshold).mean())
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def transfer_labels(pred, gt: LabeledCloud, workers: int = 1) -> np.ndarray:
    """Each predicted point takes the class of its nearest ground-truth point."""
    if not gt.has_labels:
        raise ValueError("ground truth carries no labels")
    idx, _ = NNIndex(gt.points).query(_as_points(pred), workers=workers)
    return gt.labels[idx]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray  # indexed by class id; unlabeled row stays zero
    fp: np.ndarray
    fn: np.ndarray


def confusion(pred_labels, gt_labels) -> ConfusionCounts:
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"label length mismatch: {pred.size} vs {gt.size}")
    k = NUM_CLASSES
    scored_p = pred != SemanticClass.UNLABELED
    scored_g = gt != SemanticClass.UNLABELED
    tp = np.bincount(pred[scored_p & (pred == gt)], minlength=k)
    fp = np.bincount(pred[scored_p & (pred != gt)], minlength=k)
    fn = np.bincount(gt[scored_g & (pred != gt)], minlength=k)
    for arr in (tp, fp, fn):
        arr[SemanticClass.UNLABELED] = 0
    return ConfusionCounts(tp, fp, fn)


def iou(pred_labels, gt_labels) -> tuple[dict, float]:
    """Per-class IoU (percent, None if the class never occurs) and their mean."""
    c = confusion(pred_labels, gt_labels)
    per_class = {}
    for cls in SCORED_CLASSES:
        denom = c.tp[cls] + c.fp[cls] + c.fn[cls]
        per_class[cls] = None if denom == 0 else 100.0 * c.tp[cls] / denom
    present = [v for v in per_class.values() if v is not None]
    miou = float(np.mean(present)) if present else float("nan")
    return per_class, miou


def evaluate(pred: LabeledCloud, gt: LabeledCloud, threshold: float = 0.3,
             workers: int = 1) -> MetricsReport:
    if not pred.has_labels or not gt.has_labels:
        raise ValueError("evaluation needs labeled prediction and ground truth")
    cd = chamfer(pred.points, gt.points, workers)
    f1 = f1_at(pred.points, gt.points, threshold, workers)
    per_class, miou = iou(pred.labels, transfer_labels(pred.points, gt, workers))
    return MetricsReport(
        cd_l1=cd.cd_l1, cd_l2=cd.cd_l2, f1=f1, threshold=threshold,
        per_class_iou=per_class, miou=miou, n_pred=len(pred), n_gt=len(gt),
    )


def table_row(r: MetricsReport) -> str:
    """Header and value lines in the benchmark table layout."""
    names = [c.label for c in SCORED_CLASSES]
    head = ["CD(L1)", "CD(L2)", f"F1@{r.threshold:g}", "mIoU"] + names
    cells = [f"{r.cd_l1:.2f}", f"{r.cd_l2:.2f}", f"{r.f1:.2f}%",
             "-" if np.isnan(r.miou) else f"{r.miou:.2f}"]
    cells += ["-" if r.per_class_iou.get(c) is None else f"{r.per_class_iou[c]:.2f}"
              for c in SCORED_CLASSES]
    widths = [max(len(h), len(v)) for h, v in zip(head, cells)]
    return "\n".join([
        " ".join(h.rjust(w) for h, w in zip(head, widths)),
        " ".join(v.rjust(w) for v, w in zip(cells, widths)),
    ])
