import hashlib

import numpy as np
import pytest

from ssckit.classes import SemanticClass
from ssckit.formats import read_manifest, read_mask, read_ply
from ssckit.geometry import points_in_box
from ssckit.synthetic import (SceneParams, car_cuboids, gen_synthetic_dataset, gen_synthetic_scene,
                              surface_distance, two_view_car, write_synthetic)

FAST = dict(image_size=(160, 120), n_frames=3)


def cuboids_at(scene, step):
    statics = [c for c in scene.cuboids if c.owner < 0]
    return statics + [c for b in scene.world_boxes[step] for c in car_cuboids(b)]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_fixed_seed_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        write_synthetic(gen_synthetic_dataset(7, SceneParams(**FAST), 2), tmp_path / d)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    write_synthetic(gen_synthetic_dataset(8, SceneParams(**FAST), 2), tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


@pytest.mark.parametrize("noise", [0.0, 0.03])
def test_points_lie_on_their_surface(noise):
    sc = gen_synthetic_scene(2, SceneParams(noise=noise, **FAST))
    for k, f in enumerate(sc.frames):
        cuboids = cuboids_at(sc, k // 2)
        for i in np.unique(f.cuboid_index):
            sel = f.cuboid_index == i
            d_clean = surface_distance(f.clean_world[sel], cuboids[i])
            assert d_clean.max() < 1e-9
            d_noisy = surface_distance(f.points_world[sel], cuboids[i])
            # |dist(p + e) - dist(p)| <= |e| and |e| < 6 sigma per axis
            assert d_noisy.max() <= 6 * noise * np.sqrt(3) + 1e-9
        assert (f.labels == np.array([int(c.cls) for c in cuboids])[f.cuboid_index]).all()


def test_ego_vehicle_never_hits_itself():
    sc = gen_synthetic_scene(3, SceneParams(**FAST))
    for k, f in enumerate(sc.frames):
        if f.side == "vehicle":
            owners = {cuboids_at(sc, k // 2)[i].owner for i in np.unique(f.cuboid_index)}
            assert 0 not in owners


def test_sensor_frame_boxes_contain_car_points():
    sc = gen_synthetic_scene(4, SceneParams(**FAST))
    f = sc.frames[0]
    car_pts = f.points_sensor[f.labels == SemanticClass.CAR]
    inside = np.zeros(len(car_pts), bool)
    for b in f.boxes:
        inside |= points_in_box(car_pts, b)
    assert inside.all()


def test_written_dataset_loads(tmp_path):
    path = write_synthetic([gen_synthetic_scene(5, SceneParams(**FAST))], tmp_path)
    m = read_manifest(path)
    assert m.frame_count() == 6
    f0 = m.scenes[0].frames[0]
    assert f0.side == "infrastructure" and f0.camera is not None
    mask = read_mask(f0.mask_path)
    assert (mask.width, mask.height) == (160, 120)
    assert len(read_ply(f0.cloud_path)) > 0
    gt = read_ply(tmp_path / "scene_000_gt.ply")
    assert gt.has_labels and set(np.unique(gt.labels)) <= {1, 3, 4, 7}


def test_two_view_car_views_are_complementary():
    car = two_view_car(0)
    assert car.infra.points[:, 0].mean() > 0 > car.vehicle.points[:, 0].mean()
    assert len(car.infra) > 100 and len(car.vehicle) > 100


def test_params_validation():
    with pytest.raises(ValueError):
        SceneParams(n_frames=0)
    with pytest.raises(ValueError):
        SceneParams(noise=-1)
