import json
import math

import jsonschema
import numpy as np
import pytest

from ssckit.classes import SemanticClass
from ssckit.formats import (REPORT_SCHEMA, DatasetManifest, FormatError, FrameEntry, ManifestError,
                            MetricsReport, PlyError, SceneEntry, SegmentationMask, read_manifest,
                            read_mask, read_ply, read_report, report_to_json, split_manifest,
                            write_manifest, write_mask, write_ply, write_report)
from ssckit.geometry import CameraModel, LabeledCloud, OrientedBox, RigidTransform


def labeled(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledCloud(rng.normal(size=(n, 3)) * 10, rng.integers(0, 17, n))


# ---------------------------------------------------------------- PLY

@pytest.mark.parametrize("encoding", ["binary", "ascii"])
def test_ply_round_trip(tmp_path, encoding):
    cloud = labeled(3)
    write_ply(cloud, tmp_path / "a.ply", encoding)
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(back.labels, cloud.labels)
    np.testing.assert_array_equal(back.points, cloud.points.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("encoding", ["binary", "ascii"])
def test_ply_second_write_is_byte_identical(tmp_path, encoding):
    for cloud in (labeled(200, 1), LabeledCloud(np.random.default_rng(2).normal(size=(50, 3)))):
        write_ply(cloud, tmp_path / "a.ply", encoding)
        write_ply(read_ply(tmp_path / "a.ply"), tmp_path / "b.ply", encoding)
        assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_ascii_without_labels(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                  b"property float y\nproperty float z\nend_header\n1 2 3\n4 5 6\n")
    c = read_ply(p)
    assert not c.has_labels
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])


def test_ply_double_coordinates_and_extra_properties(tmp_path):
    p = tmp_path / "a.ply"
    head = (b"ply\nformat binary_little_endian 1.0\ncomment made elsewhere\nelement vertex 2\n"
            b"property double x\nproperty double y\nproperty double z\nproperty float intensity\n"
            b"property uchar label\nend_header\n")
    rows = np.array([(0.1, 0.2, 0.3, 9.0, 3), (1.5, 2.5, 3.5, 1.0, 7)],
                    dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("i", "<f4"), ("l", "u1")])
    p.write_bytes(head + rows.tobytes())
    c = read_ply(p)
    np.testing.assert_array_equal(c.points, [[0.1, 0.2, 0.3], [1.5, 2.5, 3.5]])
    assert c.labels.tolist() == [3, 7]


@pytest.mark.parametrize("encoding", ["binary", "ascii"])
def test_ply_truncated(tmp_path, encoding):
    write_ply(labeled(10), tmp_path / "a.ply", encoding)
    data = (tmp_path / "a.ply").read_bytes()
    if encoding == "binary":
        cut = data[: len(data) - 3 * 13]
    else:
        cut = b"".join(data.splitlines(keepends=True)[:-3])
    (tmp_path / "b.ply").write_bytes(cut)
    with pytest.raises(PlyError, match="truncated: expected 10 got 7"):
        read_ply(tmp_path / "b.ply")


def test_ply_bad_magic_and_bad_label(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"plx\n")
    with pytest.raises(PlyError):
        read_ply(tmp_path / "a.ply")
    p = tmp_path / "b.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                  b"property float z\nproperty uchar label\nend_header\n0 0 0 40\n")
    with pytest.raises(PlyError, match="invalid label"):
        read_ply(p)


def test_ply_big_endian_rejected(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\n"
                  b"property float y\nproperty float z\nend_header\n")
    with pytest.raises(PlyError):
        read_ply(p)


# ---------------------------------------------------------------- masks

def test_mask_two_by_two(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 1, 2, 3]))
    m = read_mask(p)
    assert m.data.tolist() == [[0, 1], [2, 3]]
    assert (m.width, m.height) == (2, 2)


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mask = SegmentationMask(rng.integers(0, 17, size=(7, 11)))
    write_mask(mask, tmp_path / "a.pgm")
    write_mask(read_mask(tmp_path / "a.pgm"), tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    np.testing.assert_array_equal(read_mask(tmp_path / "a.pgm").data, mask.data)


def test_mask_errors(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(FormatError, match="unsupported maxval"):
        read_mask(p)
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(3))
    with pytest.raises(FormatError, match="truncated"):
        read_mask(p)
    p.write_bytes(b"P5\n1 1\n255\n" + bytes([200]))
    with pytest.raises(FormatError):
        read_mask(p)


# ---------------------------------------------------------------- manifests

def make_manifest(tmp_path, n_scenes=1, n_frames=1):
    scenes = []
    for s in range(n_scenes):
        frames = []
        for f in range(n_frames):
            cloud = tmp_path / f"s{s}_f{f}.ply"
            write_ply(labeled(4, f), cloud)
            box = OrientedBox([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.3, SemanticClass.CAR, 7)
            cam = mask = None
            if f % 2 == 0:
                mask = tmp_path / f"s{s}_f{f}.pgm"
                write_mask(SegmentationMask(np.zeros((4, 6))), mask)
                cam = CameraModel(100.0, 100.0, 3.0, 2.0, 6, 4, RigidTransform.from_yaw(0.1, (1, 2, 3)))
            frames.append(FrameEntry(f * 100, "infrastructure" if f % 2 == 0 else "vehicle", cloud,
                                     RigidTransform.from_yaw(0.2 * f, (f, 0, 0)), (box,), cam, mask))
        scenes.append(SceneEntry(f"scene_{s}", tuple(frames)))
    m = DatasetManifest(tuple(scenes))
    write_manifest(m, tmp_path / "manifest.json")
    return tmp_path / "manifest.json"


def test_minimal_manifest_loads(tmp_path):
    m = read_manifest(make_manifest(tmp_path))
    assert m.frame_count() == 1
    fr = m.scenes[0].frames[0]
    assert fr.boxes[0].track_id == 7
    assert fr.boxes[0].cls is SemanticClass.CAR
    assert fr.camera.width == 6


def test_manifest_round_trip_bytes(tmp_path):
    path = make_manifest(tmp_path, 2, 4)
    write_manifest(read_manifest(path), tmp_path / "again.json")
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


def edit_manifest(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_manifest_reflection_names_pose(tmp_path):
    path = make_manifest(tmp_path)
    edit_manifest(path, lambda d: d["scenes"][0]["frames"][0]["pose"].update(
        rotation=[[1, 0, 0], [0, 1, 0], [0, 0, -1]]))
    with pytest.raises(ManifestError, match=r"scenes\[0\]\.frames\[0\]\.pose"):
        read_manifest(path)


def test_manifest_non_increasing_timestamp(tmp_path):
    path = make_manifest(tmp_path, 1, 2)

    def fn(d):
        for f, ts in zip(d["scenes"][0]["frames"], (2, 1)):
            f["timestamp"] = ts
            f["side"] = "vehicle"
    edit_manifest(path, fn)
    with pytest.raises(ManifestError, match="non-increasing timestamp"):
        read_manifest(path)


def test_manifest_missing_file_and_field(tmp_path):
    path = make_manifest(tmp_path)
    edit_manifest(path, lambda d: d["scenes"][0]["frames"][0].update(cloud_path="nope.ply"))
    with pytest.raises(ManifestError, match="unresolvable path"):
        read_manifest(path)
    read_manifest(path, check_paths=False)
    edit_manifest(path, lambda d: d["scenes"][0]["frames"][0].pop("pose"))
    with pytest.raises(ManifestError, match="missing field 'pose'"):
        read_manifest(path, check_paths=False)


def test_manifest_rejects_bool_track_and_duplicate_scene(tmp_path):
    path = make_manifest(tmp_path, 2)
    edit_manifest(path, lambda d: d["scenes"][1].update(scene_id="scene_0"))
    with pytest.raises(ManifestError, match="duplicate scene id"):
        read_manifest(path)
    path = make_manifest(tmp_path, 1)
    edit_manifest(path, lambda d: d["scenes"][0]["frames"][0]["boxes"][0].update(track_id=True))
    with pytest.raises(ManifestError, match="track_id"):
        read_manifest(path)


def test_time_split_ratio(tmp_path):
    m = read_manifest(make_manifest(tmp_path, 6, 10))
    train, test = split_manifest(m, "time", ratio=0.8)
    for tr, te, full in zip(train.scenes, test.scenes, m.scenes):
        assert len(tr.frames) == 8 and len(te.frames) == 2
        assert tr.frames + te.frames == full.frames


def test_time_split_floor(tmp_path):
    m = read_manifest(make_manifest(tmp_path, 1, 1))
    train, test = split_manifest(m, "time", ratio=0.5)
    assert len(train.scenes[0].frames) == 0 and len(test.scenes[0].frames) == 1


def test_time_split_exact_products():
    # 0.57 * 100 evaluates to 56.99999999999999 in binary floating point
    frames = tuple(FrameEntry(i, "vehicle", None, RigidTransform.identity()) for i in range(100))
    train, _ = split_manifest(DatasetManifest((SceneEntry("s", frames),)), "time", ratio=0.57)
    assert len(train.scenes[0].frames) == 57


def test_scene_split(tmp_path):
    m = read_manifest(make_manifest(tmp_path, 6, 1))
    train, test = split_manifest(m, "scene", test_scenes=["scene_4", "scene_5"])
    assert [s.scene_id for s in train.scenes] == ["scene_0", "scene_1", "scene_2", "scene_3"]
    assert [s.scene_id for s in test.scenes] == ["scene_4", "scene_5"]
    with pytest.raises(ValueError):
        split_manifest(m, "scene", test_scenes=["scene_9"])
    with pytest.raises(ValueError):
        split_manifest(m, "random", ratio=0.5)


# ---------------------------------------------------------------- reports

def sample_report(miou=42.1234):
    per_class = {c: None for c in SemanticClass if c != SemanticClass.UNLABELED}
    per_class[SemanticClass.ROAD] = 80.005
    per_class[SemanticClass.CAR] = 4.331
    return MetricsReport(208.94123, 12.5, 81.4249, 0.3, per_class, miou, 1000, 990)


def test_report_round_trip(tmp_path):
    write_report(sample_report(), tmp_path / "a.json")
    back = read_report(tmp_path / "a.json")
    assert back.cd_l1 == 208.94
    assert back.per_class_iou[SemanticClass.CAR] == 4.33
    assert back.per_class_iou[SemanticClass.TREE] is None
    write_report(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_report_validates_against_schema():
    jsonschema.validate(report_to_json(sample_report()), REPORT_SCHEMA)
    doc = report_to_json(sample_report(miou=math.nan))
    assert doc["miou"] is None
    jsonschema.validate(doc, REPORT_SCHEMA)
    doc["f1"] = 120
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, REPORT_SCHEMA)
