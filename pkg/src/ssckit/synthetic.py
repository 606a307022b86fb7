"""Synthetic street scenes for desk-scale ground truth.

A scene is a set of cuboids: flat road and sidewalk slabs, box buildings and
two-part cars driving along the lanes. Sensors are ray casters, so every
returned point carries the cuboid it came from. Casting one ray per pixel is
an exact depth buffer, which gives hidden-surface removal for both the
camera masks and the LiDAR sweeps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import SemanticClass
from .formats import (DatasetManifest, FrameEntry, SceneEntry, SegmentationMask,
                      write_manifest, write_mask, write_ply)
from .geometry import CameraModel, LabeledCloud, OrientedBox, RigidTransform, invert
from .shape_bank import BankObject

_EPS = 1e-9
# face index: 0/1 = -x/+x, 2/3 = -y/+y, 4/5 = -z/+z
ALL_FACES = (0, 1, 2, 3, 4, 5)
NO_BOTTOM = (0, 1, 2, 3, 5)
TOP_ONLY = (5,)


@dataclass(frozen=True, eq=False)
class Cuboid:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    cls: SemanticClass
    faces: tuple = NO_BOTTOM  # faces that belong to the ground-truth surface
    owner: int = -1  # car track id, -1 for static geometry

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = pts - self.center
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def dir_to_local(self, dirs: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)

    def from_local(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1], pts[:, 2]], axis=1) + self.center


def surface_distance(points, cub: Cuboid) -> np.ndarray:
    """Unsigned distance from points to the cuboid's boundary."""
    local = np.abs(cub.to_local(np.asarray(points, dtype=np.float64))) - cub.size / 2
    outside = np.linalg.norm(np.maximum(local, 0.0), axis=1)
    inside = np.minimum(local.max(axis=1), 0.0)
    return outside + np.abs(inside)


def cast_rays(origins, dirs, cuboids, skip=(), max_range=np.inf):
    """First hit of each ray. Returns (t, cuboid index, hit mask)."""
    single = np.ndim(origins) == 1
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    if not single:
        origins = np.broadcast_to(origins, dirs.shape)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    skip = set(skip)
    for i, cub in enumerate(cuboids):
        if i in skip:
            continue
        # bounding-sphere prefilter keeps the slab test to plausible rays
        rel = cub.center - origins
        radius = np.linalg.norm(cub.size) / 2 + 1e-6
        if single:
            along = dirs @ rel
            perp2 = rel @ rel - along * along
        else:
            along = np.einsum("ij,ij->i", rel, dirs)
            perp2 = np.einsum("ij,ij->i", rel, rel) - along * along
        cand = np.nonzero((perp2 <= radius * radius) & (along + radius > 0))[0]
        if cand.size == 0:
            continue
        o = cub.to_local(np.broadcast_to(origins, (cand.size, 3)) if single else origins[cand])
        d = cub.dir_to_local(dirs[cand])
        d = np.where(np.abs(d) < 1e-15, 1e-15, d)
        half = cub.size / 2
        t1 = (-half - o) / d
        t2 = (half - o) / d
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_near <= t_far) & (t_near > _EPS) & (t_near < best_t[cand])
        best_t[cand[hit]] = t_near[hit]
        best_i[cand[hit]] = i
    found = (best_i >= 0) & (best_t <= max_range)
    best_i[~found] = -1
    return best_t, best_i, found


def sample_surface(cub: Cuboid, spacing: float) -> np.ndarray:
    """Grid samples (cell centres) over the cuboid's listed faces, world frame."""
    half = cub.size / 2
    out = []
    for face in cub.faces:
        axis, sign = divmod(face, 2)
        others = [a for a in range(3) if a != axis]
        grids = []
        for a in others:
            n = max(1, int(round(cub.size[a] / spacing)))
            grids.append(-half[a] + (np.arange(n) + 0.5) * cub.size[a] / n)
        g0, g1 = np.meshgrid(grids[0], grids[1], indexing="ij")
        pts = np.empty((g0.size, 3))
        pts[:, others[0]] = g0.ravel()
        pts[:, others[1]] = g1.ravel()
        pts[:, axis] = half[axis] if sign else -half[axis]
        out.append(pts)
    return cub.from_local(np.concatenate(out, axis=0))


def look_at(position, target) -> RigidTransform:
    """World -> camera extrinsic for a camera at ``position`` aimed at ``target``
    (x right, y down, z forward, no roll)."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return RigidTransform(R, -R @ position)


def fit_camera(extrinsic: RigidTransform, corners, width: int, height: int, margin: float = 4.0) -> CameraModel:
    """Intrinsics that keep every corner of the scene volume inside the image."""
    pc = extrinsic.apply(corners)
    if (pc[:, 2] <= 0).any():
        raise ValueError("scene volume extends behind the camera")
    xn, yn = pc[:, 0] / pc[:, 2], pc[:, 1] / pc[:, 2]
    f = min((width - 2 * margin) / np.ptp(xn), (height - 2 * margin) / np.ptp(yn))
    cx = (width - f * (xn.max() + xn.min())) / 2
    cy = (height - f * (yn.max() + yn.min())) / 2
    return CameraModel(f, f, cx, cy, width, height, extrinsic)


def pixel_rays(cam: CameraModel, us, vs):
    """World-frame origins and unit directions of rays through pixel coordinates."""
    d_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us, dtype=np.float64)], axis=1)
    R = cam.extrinsic.rotation
    dirs = d_cam @ R  # camera -> world rotation is R^T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = -R.T @ cam.extrinsic.translation
    return origin, dirs


def render_mask(cam: CameraModel, cuboids) -> SegmentationMask:
    vs, us = np.mgrid[0:cam.height, 0:cam.width]
    origin, dirs = pixel_rays(cam, us.ravel().astype(np.float64), vs.ravel().astype(np.float64))
    _, idx, hit = cast_rays(origin, dirs, cuboids)
    classes = np.array([int(c.cls) for c in cuboids], dtype=np.int64)
    labels = np.zeros(idx.shape[0], dtype=np.int64)
    labels[hit] = classes[idx[hit]]
    return SegmentationMask(labels.reshape(cam.height, cam.width))


# ---------------------------------------------------------------- car template

def car_cuboids(box: OrientedBox) -> list[Cuboid]:
    """Body plus cabin, both strictly inside the annotation box."""
    l, w, h = box.size
    parts = [
        ((-0.48, 0.48), (-0.47, 0.47), (-0.45, 0.05)),
        ((-0.30, 0.20), (-0.40, 0.40), (0.05, 0.45)),
    ]
    out = []
    for (x0, x1), (y0, y1), (z0, z1) in parts:
        local_c = np.array([(x0 + x1) / 2 * l, (y0 + y1) / 2 * w, (z0 + z1) / 2 * h])
        size = np.array([(x1 - x0) * l, (y1 - y0) * w, (z1 - z0) * h])
        center = box.from_local(local_c[None])[0]
        out.append(Cuboid(center, size, box.yaw, SemanticClass.CAR, NO_BOTTOM, box.track_id))
    return out


CAR_BOX_BOTTOM = 0.1


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class SceneParams:
    length: float = 70.0
    road_half_width: float = 6.0
    sidewalk_width: float = 4.0
    building_depth: float = 6.0
    n_objects: int = 4  # cars, the ego vehicle included
    n_frames: int = 6
    noise: float = 0.0
    frame_dt_us: int = 500_000
    lane_speeds: tuple = (5.0, 5.5)  # meters per frame, +x lane and -x lane
    image_size: tuple = (640, 480)
    lidar_stride: int = 3
    vehicle_beams: int = 32
    vehicle_azimuths: int = 720
    vehicle_range: float = 45.0
    gt_spacing: float = 0.2
    camera_position: tuple = (-12.0, 0.0, 20.0)

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.n_objects < 1:
            raise ValueError("need at least the ego vehicle")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass(eq=False)
class SyntheticFrame:
    side: str
    timestamp: int
    pose: RigidTransform  # sensor -> world
    boxes: tuple  # sensor frame
    clean_world: np.ndarray  # noiseless hits, world frame
    points_world: np.ndarray  # with noise
    cuboid_index: np.ndarray  # provenance per point
    labels: np.ndarray  # true class per point
    camera: CameraModel | None = None
    mask: SegmentationMask | None = None

    @property
    def points_sensor(self) -> np.ndarray:
        return invert(self.pose).apply(self.points_world)


@dataclass(eq=False)
class SyntheticScene:
    scene_id: str
    params: SceneParams
    cuboids: list
    frames: list
    ground_truth: LabeledCloud
    world_boxes: list = field(default_factory=list)  # per frame, world frame


def _static_cuboids(p: SceneParams, rng) -> list[Cuboid]:
    L, rw, sw = p.length, p.road_half_width, p.sidewalk_width
    out = [Cuboid(np.array([L / 2, 0.0, -0.05]), np.array([L, 2 * rw, 0.1]), 0.0, SemanticClass.ROAD, TOP_ONLY)]
    for sign in (1.0, -1.0):
        out.append(Cuboid(np.array([L / 2, sign * (rw + sw / 2), -0.05]), np.array([L, sw, 0.1]),
                          0.0, SemanticClass.SIDEWALK, TOP_ONLY))
    y0 = rw + sw
    for sign in (1.0, -1.0):
        x = 1.0 + rng.uniform(0.0, 2.0)
        while True:
            width = rng.uniform(6.0, 12.0)
            if x + width > L - 1.0:
                break
            height = rng.uniform(4.0, 10.0)
            out.append(Cuboid(np.array([x + width / 2, sign * (y0 + p.building_depth / 2), height / 2]),
                              np.array([width, p.building_depth, height]), 0.0, SemanticClass.BUILDING))
            x += width + rng.uniform(1.0, 3.0)
    return out


def _car_tracks(p: SceneParams, rng):
    """Initial boxes and per-frame displacement of every car; track 0 is the ego vehicle."""
    travel = [v * (p.n_frames - 1) for v in p.lane_speeds]
    lanes = [[], []]
    tracks = []
    for track in range(p.n_objects):
        lane = track % 2
        lo, hi = 4.0, p.length - 4.0 - travel[lane]
        for _ in range(200):
            x = rng.uniform(lo, hi) if hi > lo else math.nan
            if math.isfinite(x) and all(abs(x - o) > 9.0 for o in lanes[lane]):
                break
        else:
            raise ValueError("too many objects for the street length")
        lanes[lane].append(x)
        size = np.array([rng.uniform(4.2, 4.8), rng.uniform(1.8, 2.0), rng.uniform(1.5, 1.7)])
        y = -p.road_half_width / 2 if lane == 0 else p.road_half_width / 2
        yaw = 0.0 if lane == 0 else math.pi
        start = x if lane == 0 else p.length - x
        velocity = p.lane_speeds[lane] * (1.0 if lane == 0 else -1.0)
        tracks.append((track, start, y, yaw, size, velocity))
    return tracks


def car_boxes_at(tracks, frame: int) -> list[OrientedBox]:
    boxes = []
    for track, x0, y, yaw, size, vel in tracks:
        center = np.array([x0 + vel * frame, y, CAR_BOX_BOTTOM + size[2] / 2])
        boxes.append(OrientedBox(center, size, yaw, SemanticClass.CAR, track))
    return boxes


def _scene_corners(p: SceneParams, statics) -> np.ndarray:
    top = max(c.center[2] + c.size[2] / 2 for c in statics)
    ymax = p.road_half_width + p.sidewalk_width + p.building_depth
    return np.array([[x, y, z] for x in (0.0, p.length) for y in (-ymax, ymax) for z in (0.0, top)])


def _lidar_hits(origin, dirs, cuboids, skip=(), max_range=np.inf):
    t, idx, hit = cast_rays(origin, dirs, cuboids, skip, max_range)
    pts = origin + dirs[hit] * t[hit, None] if np.ndim(origin) == 1 else origin[hit] + dirs[hit] * t[hit, None]
    return pts, idx[hit]


def gen_synthetic_scene(seed: int, params: SceneParams | None = None, scene_id: str = "scene_000") -> SyntheticScene:
    """Deterministic street scene with infrastructure and ego-vehicle frames."""
    p = params or SceneParams()
    rng = np.random.default_rng(seed)
    statics = _static_cuboids(p, rng)
    tracks = _car_tracks(p, rng)

    cam_pos = np.array(p.camera_position, dtype=np.float64)
    extrinsic = look_at(cam_pos, [p.length / 2, 0.0, 0.0])
    width, height = p.image_size
    camera = fit_camera(extrinsic, _scene_corners(p, statics), width, height)
    infra_pose = RigidTransform.from_yaw(0.0, cam_pos)
    to_infra = invert(infra_pose)

    s = p.lidar_stride
    grid_v, grid_u = np.mgrid[0:height:s, 0:width:s]
    grid_u = grid_u.ravel().astype(np.float64)
    grid_v = grid_v.ravel().astype(np.float64)
    elev = np.radians(np.linspace(-25.0, 5.0, p.vehicle_beams))
    azim = np.linspace(0.0, 2 * math.pi, p.vehicle_azimuths, endpoint=False)
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    beam_dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)

    frames, world_boxes = [], []
    for k in range(p.n_frames):
        boxes = car_boxes_at(tracks, k)
        world_boxes.append(boxes)
        cuboids = statics + [c for b in boxes for c in car_cuboids(b)]
        classes = np.array([int(c.cls) for c in cuboids])
        ts = k * p.frame_dt_us

        # infrastructure: one ray per (jittered) pixel of a strided grid
        jitter = rng.uniform(-0.45, 0.45, size=(grid_u.size, 2))
        origin, dirs = pixel_rays(camera, grid_u + jitter[:, 0], grid_v + jitter[:, 1])
        clean, idx = _lidar_hits(origin, dirs, cuboids)
        noisy = clean + rng.normal(0.0, p.noise, clean.shape) if p.noise > 0 else clean.copy()
        frames.append(SyntheticFrame(
            "infrastructure", ts, infra_pose, tuple(b.transformed(to_infra) for b in boxes),
            clean, noisy, idx, classes[idx], camera, render_mask(camera, cuboids),
        ))

        # ego vehicle: spinning LiDAR on the roof, own body filtered out
        ego = boxes[0]
        sensor = ego.center + np.array([0.0, 0.0, ego.size[2] / 2 + 0.3])
        pose = RigidTransform.from_yaw(ego.yaw, sensor)
        own = [i for i, c in enumerate(cuboids) if c.owner == ego.track_id]
        clean, idx = _lidar_hits(sensor, beam_dirs, cuboids, skip=own, max_range=p.vehicle_range)
        noisy = clean + rng.normal(0.0, p.noise, clean.shape) if p.noise > 0 else clean.copy()
        to_vehicle = invert(pose)
        frames.append(SyntheticFrame(
            "vehicle", ts, pose, tuple(b.transformed(to_vehicle) for b in boxes[1:]),
            clean, noisy, idx, classes[idx],
        ))

    final = statics + [c for b in world_boxes[-1] for c in car_cuboids(b)]
    gt_parts = [sample_surface(c, p.gt_spacing) for c in final]
    gt_labels = np.concatenate([np.full(len(g), int(c.cls)) for g, c in zip(gt_parts, final)])
    gt = LabeledCloud(np.concatenate(gt_parts), gt_labels)
    return SyntheticScene(scene_id, p, final, frames, gt, world_boxes)


def write_synthetic(scenes, out_dir) -> Path:
    """Write clouds, masks, ground truth and the manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in scenes:
        sdir = out / scene.scene_id
        sdir.mkdir(exist_ok=True)
        frames = []
        for i, f in enumerate(scene.frames):
            stem = f"{i:03d}_{f.side}"
            cloud_path = sdir / f"{stem}.ply"
            write_ply(LabeledCloud(f.points_sensor), cloud_path)
            mask_path = None
            if f.mask is not None:
                mask_path = sdir / f"{stem}.pgm"
                write_mask(f.mask, mask_path)
            frames.append(FrameEntry(f.timestamp, f.side, cloud_path, f.pose, f.boxes, f.camera, mask_path))
        entries.append(SceneEntry(scene.scene_id, tuple(frames)))
        write_ply(scene.ground_truth, out / f"{scene.scene_id}_gt.ply")
    manifest_path = out / "manifest.json"
    write_manifest(DatasetManifest(tuple(entries)), manifest_path)
    return manifest_path


def gen_synthetic_dataset(seed: int, params: SceneParams | None = None, n_scenes: int = 1):
    seeds = np.random.SeedSequence(seed).spawn(n_scenes)
    return [
        gen_synthetic_scene(int(s.generate_state(1)[0]), params, scene_id=f"scene_{i:03d}")
        for i, s in enumerate(seeds)
    ]


# ---------------------------------------------------------------- two-view car

@dataclass(eq=False)
class TwoViewCar:
    box: OrientedBox  # at the origin, yaw 0
    full: np.ndarray  # dense surface sample, box frame
    infra: BankObject
    vehicle: BankObject


def view_points(cuboids, position, target, width=160, height=120, fov_deg=50.0) -> np.ndarray:
    ext = look_at(position, target)
    f = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    cam = CameraModel(f, f, width / 2, height / 2, width, height, ext)
    vs, us = np.mgrid[0:height, 0:width]
    origin, dirs = pixel_rays(cam, us.ravel().astype(np.float64), vs.ravel().astype(np.float64))
    pts, _ = _lidar_hits(origin, dirs, cuboids)
    return pts


def two_view_car(seed: int = 0, spacing: float = 0.05) -> TwoViewCar:
    """One car seen from the front-left (infrastructure) and rear-right (vehicle)."""
    rng = np.random.default_rng(seed)
    size = np.array([rng.uniform(4.2, 4.8), rng.uniform(1.8, 2.0), rng.uniform(1.5, 1.7)])
    box = OrientedBox(np.zeros(3), size, 0.0, SemanticClass.CAR, 1)
    parts = car_cuboids(box)
    full = np.concatenate([sample_surface(c, spacing) for c in parts])
    infra_pts = view_points(parts, [9.0, 6.0, 4.0], [0.0, 0.0, 0.0])
    vehicle_pts = view_points(parts, [-9.0, -6.0, 1.5], [0.0, 0.0, 0.0])
    half = size / 2
    infra = BankObject(1, SemanticClass.CAR, np.clip(infra_pts, -half, half), "infrastructure", size)
    vehicle = BankObject(101, SemanticClass.CAR, np.clip(vehicle_pts, -half, half), "vehicle", size)
    return TwoViewCar(box, full, infra, vehicle)
