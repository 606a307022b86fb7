"""Mutual completion of partially observed dynamic objects.

Objects are compared in a scale-normalised box frame ([-1, 1]^3) so that a
small and a large car with the same shape score as similar. A donor's points
are rescaled to the receiver's box and unioned with the receiver's points.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classes import SemanticClass
from .geometry import OrientedBox, _as_points
from .metrics import chamfer

BOX_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class BankObject:
    track_id: int
    cls: SemanticClass
    points: np.ndarray  # box frame, meters
    side: str
    size: np.ndarray  # (l, w, h)

    def __post_init__(self):
        pts = _as_points(self.points)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if pts.shape[0] == 0:
            raise ValueError(f"object {self.track_id}: empty point set")
        if (size <= 0).any():
            raise ValueError(f"object {self.track_id}: degenerate box size")
        if (np.abs(pts) > size / 2 + BOX_TOL).any():
            raise ValueError(f"object {self.track_id}: points outside the box")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "cls", SemanticClass(self.cls))

    @property
    def normalized(self) -> np.ndarray:
        return self.points * (2.0 / self.size)

    def __len__(self) -> int:
        return self.points.shape[0]


def canonicalize(points, box: OrientedBox) -> np.ndarray:
    """Sensor frame -> scale-normalised box frame, where the box is [-1, 1]^3."""
    if (box.size <= 0).any():
        raise ValueError("degenerate box size")
    return box.to_local(points) * (2.0 / box.size)


def decanonicalize(points, box: OrientedBox) -> np.ndarray:
    return box.from_local(_as_points(points) * (box.size / 2.0))


def disparity(a: BankObject, b: BankObject) -> float:
    """Symmetric Chamfer-L1 between normalised clouds; lower means more alike."""
    if a.cls != b.cls:
        raise ValueError(f"incomparable classes: {a.cls.label} vs {b.cls.label}")
    return chamfer(a.normalized, b.normalized).l1


def best_match(source: BankObject, bank, min_points: int = 1, same_side: bool = True):
    """(donor, score) of the most similar eligible object, or (None, inf)."""
    best, best_score = None, float("inf")
    for cand in sorted(bank, key=lambda o: o.track_id):
        if cand.cls != source.cls or len(cand) < min_points:
            continue
        if same_side and cand.track_id == source.track_id:
            continue
        score = disparity(source, cand)
        if score < best_score:
            best, best_score = cand, score
    return best, best_score


def complete_from_bank(source: BankObject, bank, min_points: int = 1,
                       same_side: bool = True) -> BankObject:
    """Union with the best same-class donor, rescaled to the source box.

    ``min_points`` is the smallest donor that may be used; the source is
    completed regardless of its own size.
    """
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    donor, _ = best_match(source, bank, min_points, same_side)
    if donor is None:
        return source
    half = source.size / 2.0
    borrowed = np.clip(donor.normalized * half, -half, half)
    return replace(source, points=np.concatenate([source.points, borrowed], axis=0))


def multi_object_complete(objects, min_points: int = 1) -> list[BankObject]:
    """Complete each object from the others on the same side. The bank is the
    uncompleted input, so results do not depend on processing order."""
    objects = list(objects)
    return [complete_from_bank(o, objects, min_points) for o in objects]


def mutual_complete(infra, vehicle, min_points: int = 1) -> dict[int, BankObject]:
    """Intra-side completion on both sides, then infrastructure objects
    completed from the best matching vehicle-side object."""
    infra_done = multi_object_complete(infra, min_points)
    vehicle_done = multi_object_complete(vehicle, min_points)
    out = {}
    for obj in infra_done:
        out[obj.track_id] = complete_from_bank(obj, vehicle_done, min_points, same_side=False)
    return out
