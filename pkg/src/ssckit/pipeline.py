"""Ground-truth generation: separate, aggregate, vote, annotate, complete, reintegrate."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .classes import NUM_CLASSES, SemanticClass
from .formats import FrameEntry, SceneEntry, SegmentationMask, read_mask, read_ply
from .geometry import CameraModel, LabeledCloud, OrientedBox, _as_points, points_in_box
from .shape_bank import BankObject, mutual_complete

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DynamicObject:
    track_id: int
    cls: SemanticClass
    box: OrientedBox
    points: np.ndarray  # box frame, meters


@dataclass(frozen=True, eq=False)
class FrameDecomposition:
    static_cloud: LabeledCloud
    objects: tuple[DynamicObject, ...]

    def point_count(self) -> int:
        return len(self.static_cloud) + sum(len(o.points) for o in self.objects)


def split_static_dynamic(cloud: LabeledCloud, boxes) -> FrameDecomposition:
    """Points inside a box go to the first containing box, in box-frame coordinates."""
    owner = np.full(len(cloud), -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        owner[points_in_box(cloud.points, box) & (owner < 0)] = i
    objects = tuple(
        DynamicObject(box.track_id, box.cls, box, box.to_local(cloud.points[owner == i]))
        for i, box in enumerate(boxes)
    )
    return FrameDecomposition(LabeledCloud(cloud.points[owner < 0]), objects)


def aggregate_static(items) -> LabeledCloud:
    """Concatenate (static cloud, sensor->world pose) pairs in world frame, in order."""
    clouds = [LabeledCloud(pose.apply(cloud.points)) for cloud, pose in items]
    return LabeledCloud.concat(clouds)


def project_points(cloud, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel column, pixel row and validity for each point (round half down)."""
    pc = cam.extrinsic.apply(_as_points(cloud))
    n = pc.shape[0]
    u = np.full(n, -1, dtype=np.int64)
    v = np.full(n, -1, dtype=np.int64)
    z = pc[:, 2]
    front = z > 0
    uf = np.full(n, np.nan)
    vf = np.full(n, np.nan)
    uf[front] = np.ceil(cam.fx * pc[front, 0] / z[front] + cam.cx - 0.5)
    vf[front] = np.ceil(cam.fy * pc[front, 1] / z[front] + cam.cy - 0.5)
    valid = front & (uf >= 0) & (uf < cam.width) & (vf >= 0) & (vf < cam.height)
    u[valid] = uf[valid].astype(np.int64)
    v[valid] = vf[valid].astype(np.int64)
    return u, v, valid


class VoteAccumulator:
    """Per-pixel class observation counts; ``unlabeled`` pixels cast no vote."""

    def __init__(self, width: int, height: int):
        self.width, self.height = int(width), int(height)
        self.counts = np.zeros((self.height, self.width, NUM_CLASSES), dtype=np.int32)

    def add(self, mask: SegmentationMask) -> None:
        if (mask.width, mask.height) != (self.width, self.height):
            raise ValueError(
                f"mask is {mask.width}x{mask.height}, expected {self.width}x{self.height}"
            )
        rows, cols = np.indices(mask.data.shape)
        ids = mask.data.astype(np.int64)
        voted = ids != SemanticClass.UNLABELED
        np.add.at(self.counts, (rows[voted], cols[voted], ids[voted]), 1)

    def result(self) -> SegmentationMask:
        # argmax takes the first maximum, i.e. the lowest class id on ties
        fused = np.argmax(self.counts, axis=2)
        fused[self.counts.sum(axis=2) == 0] = SemanticClass.UNLABELED
        return SegmentationMask(fused)


def vote_labels(masks) -> SegmentationMask:
    masks = list(masks)
    if not masks:
        raise ValueError("no masks to vote over")
    acc = VoteAccumulator(masks[0].width, masks[0].height)
    for m in masks:
        acc.add(m)
    return acc.result()


def annotate_cloud(cloud: LabeledCloud, cam: CameraModel, fused: SegmentationMask) -> LabeledCloud:
    if (fused.width, fused.height) != (cam.width, cam.height):
        raise ValueError("fused mask does not match the camera image size")
    u, v, valid = project_points(cloud.points, cam)
    labels = np.full(len(cloud), SemanticClass.UNLABELED, dtype=np.int64)
    labels[valid] = fused.data[v[valid], u[valid]]
    return LabeledCloud(cloud.points, labels)


def reintegrate(static_labeled: LabeledCloud, completed) -> LabeledCloud:
    """Place (box, class, box-frame points) objects into the world and append them."""
    parts = [static_labeled]
    for box, cls, pts in completed:
        pts = _as_points(pts)
        parts.append(LabeledCloud(box.from_local(pts), np.full(len(pts), int(cls), np.int64)))
    return LabeledCloud.concat(parts)


# ---------------------------------------------------------------- manifest driver

@dataclass(frozen=True, eq=False)
class _FrameResult:
    frame: FrameEntry
    input_points: int
    decomposition: FrameDecomposition


def _process_frame(frame: FrameEntry) -> _FrameResult:
    cloud = read_ply(frame.cloud_path)
    dec = split_static_dynamic(LabeledCloud(cloud.points), frame.boxes)
    if dec.point_count() != len(cloud):
        raise AssertionError(f"{frame.cloud_path}: point conservation violated")
    return _FrameResult(frame, len(cloud), dec)


def _fused_infrastructure_mask(scene: SceneEntry) -> tuple[CameraModel | None, SegmentationMask | None, int]:
    frames = [f for f in scene.frames
              if f.side == "infrastructure" and f.camera is not None and f.mask_path is not None]
    if not frames:
        return None, None, 0
    cam = frames[0].camera
    acc = VoteAccumulator(cam.width, cam.height)
    for f in frames:
        if not f.camera.same_as(cam):
            raise ValueError(f"scene {scene.scene_id}: infrastructure camera moved between frames")
        acc.add(read_mask(f.mask_path))
    return cam, acc.result(), len(frames)


def _bank_objects(results, side: str) -> tuple[list[BankObject], dict[int, OrientedBox]]:
    """Merge each track's per-frame points in its box frame; remember its latest world box."""
    pts: dict[int, list[np.ndarray]] = {}
    latest: dict[int, OrientedBox] = {}
    world: dict[int, OrientedBox] = {}
    for r in results:
        if r.frame.side != side:
            continue
        for obj in r.decomposition.objects:
            latest[obj.track_id] = obj.box
            world[obj.track_id] = obj.box.transformed(r.frame.pose)
            if len(obj.points):
                pts.setdefault(obj.track_id, []).append(obj.points)
    bank = []
    for track in sorted(pts):
        box = latest[track]
        half = box.size / 2.0
        merged = np.clip(np.concatenate(pts[track]), -half, half)
        bank.append(BankObject(track, box.cls, merged, side, box.size))
    return bank, world


def run_scene(scene: SceneEntry, threads: int = 1, min_points: int = 1) -> tuple[LabeledCloud, dict]:
    """Build the labeled ground-truth cloud of one scene and a stage summary."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_process_frame, scene.frames))
    else:
        results = [_process_frame(f) for f in scene.frames]

    n_input = sum(r.input_points for r in results)
    n_static = sum(len(r.decomposition.static_cloud) for r in results)
    n_dynamic = sum(len(o.points) for r in results for o in r.decomposition.objects)

    aggregated = aggregate_static((r.decomposition.static_cloud, r.frame.pose) for r in results)
    cam, fused, n_masks = _fused_infrastructure_mask(scene)
    if cam is None:
        log.warning("scene %s has no infrastructure masks; static points stay unlabeled", scene.scene_id)
        annotated = aggregated.with_labels(np.zeros(len(aggregated), np.int64))
    else:
        annotated = annotate_cloud(aggregated, cam, fused)

    infra_bank, infra_world = _bank_objects(results, "infrastructure")
    vehicle_bank, _ = _bank_objects(results, "vehicle")
    completed = mutual_complete(infra_bank, vehicle_bank, min_points)
    placed = [(infra_world[t], obj.cls, obj.points) for t, obj in sorted(completed.items())]
    output = reintegrate(annotated, placed)

    n_objects = sum(len(p) for _, _, p in placed)
    hist = np.bincount(output.labels, minlength=NUM_CLASSES)
    summary = {
        "scene_id": scene.scene_id,
        "frames": len(scene.frames),
        "masks_voted": n_masks,
        "stages": {
            "input_points": n_input,
            "static_points": n_static,
            "dynamic_points": n_dynamic,
            "aggregated_points": len(aggregated),
            "annotated_points": len(annotated),
            "unlabeled_static_points": int((annotated.labels == SemanticClass.UNLABELED).sum()),
            "bank_objects": {"infrastructure": len(infra_bank), "vehicle": len(vehicle_bank)},
            "completed_objects": len(placed),
            "completed_object_points": n_objects,
            "output_points": len(output),
        },
        "conservation": {
            "split": n_static + n_dynamic == n_input,
            "aggregate": len(aggregated) == n_static,
            "annotate": len(annotated) == len(aggregated),
            "reintegrate": len(output) == len(annotated) + n_objects,
        },
        "class_histogram": {c.label: int(hist[c]) for c in SemanticClass},
    }
    if not all(summary["conservation"].values()):
        raise AssertionError(f"point conservation violated: {summary['conservation']}")
    return output, summary
