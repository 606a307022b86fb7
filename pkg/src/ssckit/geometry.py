"""Point, pose, box and nearest-neighbour primitives.

All coordinates are float64 meters in memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .classes import NUM_CLASSES, SemanticClass

ORTHO_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    if isinstance(points, LabeledCloud):
        return points.points
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    pts = pts.reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise ValueError("non-finite coordinates")
    return pts


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """N x 3 coordinates with an optional per-point class id."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels).reshape(-1)
            if labels.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"label count {labels.shape[0]} != point count {pts.shape[0]}"
                )
            if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
                raise ValueError("label outside the semantic class range")
            object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, selector) -> "LabeledCloud":
        labels = None if self.labels is None else self.labels[selector]
        return LabeledCloud(self.points[selector], labels)

    def with_labels(self, labels) -> "LabeledCloud":
        return LabeledCloud(self.points, labels)

    @classmethod
    def empty(cls, labeled: bool = False) -> "LabeledCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64) if labeled else None)

    @classmethod
    def concat(cls, clouds) -> "LabeledCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        labeled = [c.has_labels for c in clouds]
        if any(labeled) and not all(labeled):
            raise ValueError("cannot concatenate labeled and unlabeled clouds")
        points = np.concatenate([c.points for c in clouds], axis=0)
        labels = np.concatenate([c.labels for c in clouds]) if all(labeled) else None
        return cls(points, labels)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t. Validated as a proper rotation on construction."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("non-finite transform")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(yaw), translation)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())

    def apply(self, points) -> np.ndarray:
        pts = _as_points(points)
        if self.is_identity():
            return pts.copy()
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return a o b, i.e. apply ``b`` first and then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def apply_transform(cloud: LabeledCloud, t: RigidTransform) -> LabeledCloud:
    return LabeledCloud(t.apply(cloud.points), cloud.labels)


def normalize_yaw(yaw: float) -> float:
    """Wrap to [-pi, pi)."""
    y = (float(yaw) + math.pi) % (2.0 * math.pi) - math.pi
    return -math.pi if y >= math.pi else y


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    size: np.ndarray  # length (x), width (y), height (z)
    yaw: float
    cls: SemanticClass
    track_id: int

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        s = np.asarray(self.size, dtype=np.float64).reshape(-1)
        if c.shape != (3,) or s.shape != (3,):
            raise ValueError("box center and size must be 3-vectors")
        if not (np.isfinite(c).all() and np.isfinite(s).all() and math.isfinite(self.yaw)):
            raise ValueError("non-finite box")
        if (s <= 0).any():
            raise ValueError("box size components must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "cls", SemanticClass(self.cls))
        object.__setattr__(self, "track_id", int(self.track_id))

    def pose(self) -> RigidTransform:
        """Box frame -> enclosing frame."""
        return RigidTransform.from_yaw(self.yaw, self.center)

    def to_local(self, points) -> np.ndarray:
        pts = _as_points(points) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] + s * pts[:, 1]
        out[:, 1] = -s * pts[:, 0] + c * pts[:, 1]
        out[:, 2] = pts[:, 2]
        return out

    def from_local(self, points) -> np.ndarray:
        pts = _as_points(points)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
        out[:, 2] = pts[:, 2]
        return out + self.center

    def transformed(self, t: RigidTransform) -> "OrientedBox":
        """Re-express the box in another frame. Only yaw-only rotations keep it a box."""
        if abs(t.rotation[2, 2] - 1.0) > ORTHO_TOL:
            raise ValueError("transform tilts the box out of the ground plane")
        return OrientedBox(t.apply(self.center)[0], self.size, self.yaw + t.yaw,
                           self.cls, self.track_id)


@dataclass(frozen=True)
class RangeCrop:
    x: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]

    def __post_init__(self):
        for axis, (lo, hi) in zip("xyz", (self.x, self.y, self.z)):
            if not lo < hi:
                raise ValueError(f"range {axis}: min must be < max")

    @classmethod
    def benchmark_default(cls) -> "RangeCrop":
        return cls((0.0, 250.0), (-70.0, 70.0), (-5.0, 12.0))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    def mask(self, points) -> np.ndarray:
        pts = _as_points(points)
        return ((pts >= self.lower) & (pts < self.upper)).all(axis=1)


def crop_range(cloud: LabeledCloud, r: RangeCrop) -> LabeledCloud:
    """Keep points with min <= coord < max on every axis."""
    return cloud.subset(r.mask(cloud.points))


def points_in_box(cloud, box: OrientedBox) -> np.ndarray:
    """Closed-interval containment of each point in ``box``."""
    pts = _as_points(cloud)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    local = box.to_local(pts)
    return (np.abs(local) <= box.size / 2.0).all(axis=1)


def farthest_point_sample(cloud, k: int, seed=None, start: int | None = None) -> np.ndarray:
    """Greedy farthest-point sampling.

    The first pick is the point nearest to a seeded uniform anchor inside the
    bounding box (or ``start`` when given); every later pick maximises the
    distance to the chosen set, ties to the lowest index.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot sample {k} of {n} points")
    if start is None:
        rng = np.random.default_rng(seed)
        anchor = rng.uniform(pts.min(axis=0), pts.max(axis=0))
        start = int(np.argmin(((pts - anchor) ** 2).sum(axis=1)))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d = ((pts - pts[start]) ** 2).sum(axis=1)
    min_d[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d)
        min_d[chosen[: i + 1]] = -1.0
    return chosen


class NNIndex:
    """Exact 1-NN over a fixed point set; ties go to the lowest point index.

    Immutable after construction, so concurrent queries are safe.
    """

    _K = 4

    def __init__(self, points):
        pts = _as_points(points)
        if pts.shape[0] == 0:
            raise ValueError("empty point set")
        self.points = np.array(pts)
        self.points.setflags(write=False)
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
        q = _as_points(queries)
        n = len(self)
        if q.shape[0] == 0:
            return np.zeros(0, np.int64), np.zeros(0)
        k = min(self._K, n)
        _, cand = self._tree.query(q, k=k, workers=workers)
        cand = np.asarray(cand).reshape(q.shape[0], k)
        dist = np.sqrt(((self.points[cand] - q[:, None, :]) ** 2).sum(axis=-1))
        best = dist.min(axis=1)
        # candidates come back in distance order; pick the lowest index among exact ties
        masked = np.where(dist == best[:, None], cand, n)
        idx = masked.min(axis=1)
        if k < n:
            crowded = np.nonzero(dist[:, -1] <= best * (1 + 1e-12) + 1e-300)[0]
            for row in crowded:
                idx[row], best[row] = self._scan_ball(q[row], best[row])
        return idx.astype(np.int64), best

    def _scan_ball(self, q: np.ndarray, radius: float) -> tuple[int, float]:
        members = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), np.int64)
        d = np.sqrt(((self.points[members] - q) ** 2).sum(axis=-1))
        best = d.min()
        return int(members[d == best].min()), float(best)

    def nearest(self, query) -> tuple[int, float]:
        idx, dist = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])


def build_index(points) -> NNIndex:
    return NNIndex(points)


def nearest(index: NNIndex, query) -> tuple[int, float]:
    return index.nearest(query)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; ``extrinsic`` maps world -> camera (camera looks along +Z)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def same_as(self, other: "CameraModel") -> bool:
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
            and self.extrinsic.allclose(other.extrinsic, atol=0.0)
        )
