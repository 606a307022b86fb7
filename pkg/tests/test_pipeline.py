import math
from dataclasses import replace

import numpy as np
import pytest

from ssckit.classes import SemanticClass
from ssckit.formats import DatasetManifest, SegmentationMask, read_manifest, write_manifest
from ssckit.geometry import CameraModel, LabeledCloud, OrientedBox, RigidTransform
from ssckit.metrics import transfer_labels
from ssckit.pipeline import (aggregate_static, annotate_cloud, project_points, reintegrate,
                             run_scene, split_static_dynamic, vote_labels)
from ssckit.synthetic import Cuboid, SceneParams, cast_rays, gen_synthetic_scene, surface_distance, write_synthetic

ROAD, CAR = SemanticClass.ROAD, SemanticClass.CAR


def axis_camera():
    return CameraModel(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform.identity())


def test_split_no_boxes():
    c = LabeledCloud(np.random.default_rng(0).normal(size=(20, 3)))
    dec = split_static_dynamic(c, [])
    assert len(dec.static_cloud) == 20 and dec.objects == ()


def test_split_counts_and_canonical_frame():
    rng = np.random.default_rng(1)
    box = OrientedBox([10, 0, 0], [2, 2, 2], 0.5, CAR, 4)
    inside = box.from_local(rng.uniform(-0.9, 0.9, size=(10, 3)))
    outside = rng.uniform(-5, 5, size=(90, 3))
    dec = split_static_dynamic(LabeledCloud(np.vstack([outside, inside])), [box])
    assert len(dec.static_cloud) == 90
    assert len(dec.objects[0].points) == 10
    np.testing.assert_allclose(box.from_local(dec.objects[0].points), inside, atol=1e-12)
    assert dec.point_count() == 100


def test_split_first_box_wins():
    a = OrientedBox([0, 0, 0], [2, 2, 2], 0, CAR, 1)
    b = OrientedBox([1, 0, 0], [2, 2, 2], 0, CAR, 2)
    dec = split_static_dynamic(LabeledCloud([[0.5, 0, 0]]), [a, b])
    assert [len(o.points) for o in dec.objects] == [1, 0]


def test_aggregate_single_and_empty():
    c = LabeledCloud(np.random.default_rng(2).normal(size=(5, 3)))
    out = aggregate_static([(c, RigidTransform.identity())])
    assert out.points.tobytes() == c.points.tobytes()
    assert len(aggregate_static([])) == 0


def test_aggregate_two_views_of_a_wall():
    wall = Cuboid(np.array([10.0, 0, 2]), np.array([0.4, 8, 4]), 0.0, SemanticClass.BUILDING)
    rng = np.random.default_rng(3)
    items = []
    for pose in (RigidTransform.identity(), RigidTransform.from_yaw(0.3, (1.0, -2.0, 0.5))):
        origin = pose.translation
        dirs = np.array([10.0, 0, 2]) - origin + rng.uniform(-1, 1, size=(200, 3)) * [0, 3, 1.5]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t, _, hit = cast_rays(origin, dirs, [wall])
        world = origin + dirs[hit] * t[hit, None]
        sensor = np.linalg.solve(pose.rotation, (world - pose.translation).T).T
        items.append((LabeledCloud(sensor), pose))
    agg = aggregate_static(items)
    assert len(agg) == sum(len(c) for c, _ in items)
    assert surface_distance(agg.points, wall).max() < 1e-9


def test_projection_cases():
    cam = axis_camera()
    u, v, valid = project_points([[0, 0, 5], [0, 0, -5], [3, 0, 5]], cam)
    assert (u[0], v[0], valid[0]) == (50, 50, True)
    assert not valid[1]
    assert not valid[2]


def test_projection_rounds_half_down():
    cam = axis_camera()
    # u = 100 * x / 1 + 50: x=0.005 -> 50.5 -> pixel 50, x=0.0051 -> 50.51 -> 51
    u, _, _ = project_points([[0.005, 0, 1], [0.0051, 0, 1], [-0.495, 0, 1]], cam)
    assert u.tolist() == [50, 51, 0]


def test_vote():
    def m(c):
        return SegmentationMask(np.full((1, 1), c))
    assert vote_labels([m(ROAD), m(ROAD), m(CAR), m(ROAD), m(CAR)]).data[0, 0] == ROAD
    assert vote_labels([m(CAR), m(ROAD)]).data[0, 0] == ROAD
    assert vote_labels([m(0), m(0)]).data[0, 0] == 0
    assert vote_labels([m(0), m(0), m(CAR)]).data[0, 0] == CAR
    with pytest.raises(ValueError):
        vote_labels([m(1), SegmentationMask(np.zeros((2, 2)))])


def test_annotate():
    cam = axis_camera()
    fused = SegmentationMask(np.full((100, 100), ROAD))
    out = annotate_cloud(LabeledCloud([[0, 0, 5], [0, 0, -5]]), cam, fused)
    assert out.labels.tolist() == [ROAD, SemanticClass.UNLABELED]


def test_reintegrate():
    rng = np.random.default_rng(4)
    static = LabeledCloud(rng.normal(size=(30, 3)), np.full(30, ROAD))
    assert reintegrate(static, []).points.tobytes() == static.points.tobytes()
    box = OrientedBox([20, 5, 1], [4, 2, 1.6], 0.9, CAR, 7)
    pts = rng.uniform(-0.7, 0.7, size=(50, 3))
    out = reintegrate(static, [(box, CAR, pts)])
    assert len(out) == 80 and (out.labels[30:] == CAR).all()
    c, s = math.cos(0.9), math.sin(0.9)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    np.testing.assert_allclose(out.points[30:], pts @ R.T + [20, 5, 1], atol=1e-12)
    again = split_static_dynamic(out, [box])
    assert len(again.objects[0].points) == 50 and len(again.static_cloud) == 30


@pytest.fixture(scope="module")
def small_scene():
    return gen_synthetic_scene(1, SceneParams(image_size=(200, 150), lidar_stride=1))


def test_single_frame_annotation_accuracy():
    # infrastructure points are camera-visible by construction; only pixels
    # straddling a surface edge can disagree with the true surface class
    f = gen_synthetic_scene(1, SceneParams(n_frames=1)).frames[0]
    out = annotate_cloud(LabeledCloud(f.clean_world), f.camera, f.mask)
    assert (out.labels == f.labels).mean() >= 0.99


def test_run_scene(small_scene, tmp_path):
    m = read_manifest(write_synthetic([small_scene], tmp_path))
    out, summary = run_scene(m.scenes[0])
    assert all(summary["conservation"].values())
    st = summary["stages"]
    assert st["input_points"] == sum(len(f.points_world) for f in small_scene.frames)
    assert st["output_points"] == len(out)
    truth = transfer_labels(out.points, small_scene.ground_truth)
    assert (truth == out.labels).mean() >= 0.95
    out2, summary2 = run_scene(m.scenes[0], threads=3)
    assert out2.points.tobytes() == out.points.tobytes()
    assert summary2 == summary


def test_run_scene_without_boxes(small_scene, tmp_path):
    m = read_manifest(write_synthetic([small_scene], tmp_path))
    bare = replace(m.scenes[0], frames=tuple(replace(f, boxes=()) for f in m.scenes[0].frames))
    write_manifest(DatasetManifest((bare,)), tmp_path / "bare.json")
    out, summary = run_scene(read_manifest(tmp_path / "bare.json").scenes[0])
    assert summary["stages"]["completed_objects"] == 0
    assert summary["stages"]["dynamic_points"] == 0
    assert len(out) == summary["stages"]["input_points"]


def test_moving_camera_rejected(small_scene, tmp_path):
    m = read_manifest(write_synthetic([small_scene], tmp_path))
    frames = list(m.scenes[0].frames)
    cam = frames[2].camera
    frames[2] = replace(frames[2], camera=replace(cam, cx=cam.cx + 1))
    with pytest.raises(ValueError, match="camera moved"):
        run_scene(replace(m.scenes[0], frames=tuple(frames)))
