"""Cloud (PLY), mask (PGM), manifest and report (JSON) files.

Coordinates are stored as float32 and widened to float64 on load.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES, SCORED_CLASSES, SemanticClass
from .geometry import CameraModel, LabeledCloud, OrientedBox, RigidTransform

SCHEMA_VERSION = 1
SIDES = ("vehicle", "infrastructure")


class FormatError(ValueError):
    pass


class PlyError(FormatError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(FormatError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes):
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise PlyError("not a PLY file: missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("malformed header: no end_header", len(data))
    body = data.find(b"\n", end)
    if body < 0:
        raise PlyError("malformed header: end_header not terminated", end)
    body += 1

    encoding = None
    count = None
    props: list[tuple[str, str]] = []
    current = None
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        words = line.split()
        line_offset = offset
        offset += len(raw) + 1
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        if words[0] == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise PlyError(f"malformed format line {line!r}", line_offset)
            if words[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported encoding {words[1]!r}", line_offset)
            encoding = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"malformed element line {line!r}", line_offset)
            current = words[1]
            if current == "vertex":
                count = int(words[2])
            elif count is None:
                raise PlyError(f"element {current!r} before vertex is not supported", line_offset)
        elif words[0] == "property":
            if current is None:
                raise PlyError("property outside of an element", line_offset)
            if current != "vertex":
                continue
            if len(words) != 3 or words[1] == "list":
                raise PlyError(f"unsupported vertex property {line!r}", line_offset)
            if words[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type {words[1]!r}", line_offset)
            props.append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise PlyError(f"malformed header line {line!r}", line_offset)
    if encoding is None:
        raise PlyError("malformed header: missing format line", 0)
    if count is None:
        raise PlyError("malformed header: missing vertex element", 0)

    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"malformed header: missing property {axis}", 0)
        if dict(props)[axis] not in ("f4", "f8"):
            raise PlyError(f"property type mismatch: {axis} must be float or double", 0)
    if "label" in names and dict(props)["label"] != "u1":
        raise PlyError("property type mismatch: label must be uchar", 0)
    return encoding, count, props, body


def read_ply(path) -> LabeledCloud:
    data = Path(path).read_bytes()
    encoding, count, props, body = _parse_ply_header(data)
    dtype = np.dtype([(name, "<" + t) for name, t in props])
    if encoding == "binary_little_endian":
        need = count * dtype.itemsize
        have = len(data) - body
        if have < need:
            raise PlyError(f"truncated: expected {count} got {have // dtype.itemsize}", len(data))
        rows = np.frombuffer(data, dtype=dtype, count=count, offset=body)
    else:
        rows = _read_ascii_rows(data, body, count, dtype)
    points = np.stack([rows["x"], rows["y"], rows["z"]], axis=1).astype(np.float64)
    labels = None
    if "label" in dtype.names:
        labels = rows["label"].astype(np.int64)
        bad = np.nonzero(labels >= NUM_CLASSES)[0]
        if bad.size:
            raise PlyError(f"invalid label {labels[bad[0]]} at vertex {bad[0]}", body)
    if not np.isfinite(points).all():
        raise PlyError("non-finite coordinate", body)
    return LabeledCloud(points, labels)


def _read_ascii_rows(data: bytes, body: int, count: int, dtype: np.dtype) -> np.ndarray:
    rows = np.empty(count, dtype=dtype)
    offset = body
    got = 0
    nprops = len(dtype.names)
    while got < count:
        if offset >= len(data):
            raise PlyError(f"truncated: expected {count} got {got}", len(data))
        nl = data.find(b"\n", offset)
        if nl < 0:
            nl = len(data)
        words = data[offset:nl].split()
        if words:
            if len(words) != nprops:
                raise PlyError(f"vertex {got}: expected {nprops} values, found {len(words)}", offset)
            try:
                rows[got] = tuple(
                    int(w) if dtype[i].kind in "iu" else float(w) for i, w in enumerate(words)
                )
            except (ValueError, OverflowError):
                raise PlyError(f"vertex {got}: unparsable value", offset) from None
            got += 1
        offset = nl + 1
    return rows


def write_ply(cloud: LabeledCloud, path, encoding: str = "binary") -> None:
    if encoding in ("binary", "binary_little_endian"):
        fmt = "binary_little_endian"
    elif encoding == "ascii":
        fmt = "ascii"
    else:
        raise ValueError(f"unknown PLY encoding {encoding!r}")
    header = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if cloud.has_labels:
        header.append("property uchar label")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    pts32 = cloud.points.astype(np.float32)
    if fmt == "binary_little_endian":
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if cloud.has_labels:
            fields.append(("label", "u1"))
        rows = np.empty(len(cloud), dtype=fields)
        rows["x"], rows["y"], rows["z"] = pts32[:, 0], pts32[:, 1], pts32[:, 2]
        if cloud.has_labels:
            rows["label"] = cloud.labels
        payload = rows.tobytes()
    else:
        # 9 significant digits round-trip any float32 exactly
        if cloud.has_labels:
            lines = [
                "%.9g %.9g %.9g %d" % (x, y, z, lab)
                for (x, y, z), lab in zip(pts32.tolist(), cloud.labels.tolist())
            ]
        else:
            lines = ["%.9g %.9g %.9g" % tuple(p) for p in pts32.tolist()]
        payload = "".join(line + "\n" for line in lines).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head + payload)


# ---------------------------------------------------------------- PGM masks

@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Row-major class id per pixel, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValueError("mask must be 2-D")
        if d.size and (d.min() < 0 or d.max() >= NUM_CLASSES):
            raise ValueError("mask holds an invalid class id")
        object.__setattr__(self, "data", d.astype(np.uint8))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_mask(path) -> SegmentationMask:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height
    if len(data) - pos < need:
        raise FormatError(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width)
    if pixels.max(initial=0) >= NUM_CLASSES:
        raise FormatError(f"{path}: pixel value is not a class id")
    return SegmentationMask(pixels.copy())


def write_mask(mask: SegmentationMask, path) -> None:
    head = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head + np.ascontiguousarray(mask.data, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True, eq=False)
class FrameEntry:
    timestamp: int  # microseconds
    side: str
    cloud_path: Path
    pose: RigidTransform  # sensor -> world
    boxes: tuple[OrientedBox, ...] = ()
    camera: CameraModel | None = None
    mask_path: Path | None = None


@dataclass(frozen=True, eq=False)
class SceneEntry:
    scene_id: str
    frames: tuple[FrameEntry, ...]


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    scenes: tuple[SceneEntry, ...] = field(default_factory=tuple)

    def scene(self, scene_id: str) -> SceneEntry:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)

    def frame_count(self) -> int:
        return sum(len(s.frames) for s in self.scenes)


def _transform_json(t: RigidTransform) -> dict:
    return {"rotation": t.rotation.tolist(), "translation": t.translation.tolist()}


def _camera_json(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "extrinsic": _transform_json(cam.extrinsic),
    }


def _box_json(box: OrientedBox) -> dict:
    return {
        "center": box.center.tolist(),
        "size": box.size.tolist(),
        "yaw": box.yaw,
        "class": box.cls.label,
        "track_id": box.track_id,
    }


def manifest_to_json(m: DatasetManifest, base_dir) -> dict:
    base = os.path.abspath(base_dir)

    def rel(p: Path) -> str:
        return Path(os.path.relpath(os.path.abspath(p), base)).as_posix()

    scenes = []
    for s in m.scenes:
        frames = []
        for f in s.frames:
            entry = {
                "timestamp": f.timestamp,
                "side": f.side,
                "cloud_path": rel(f.cloud_path),
                "pose": _transform_json(f.pose),
                "boxes": [_box_json(b) for b in f.boxes],
            }
            if f.camera is not None:
                entry["camera"] = _camera_json(f.camera)
            if f.mask_path is not None:
                entry["mask_path"] = rel(f.mask_path)
            frames.append(entry)
        scenes.append({"scene_id": s.scene_id, "frames": frames})
    return {"schema": SCHEMA_VERSION, "scenes": scenes}


def write_manifest(m: DatasetManifest, path) -> None:
    doc = manifest_to_json(m, Path(path).parent)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _field(obj, key, where, kind=None):
    if not isinstance(obj, dict):
        raise ManifestError(where, "expected an object")
    if key not in obj:
        raise ManifestError(where, f"missing field {key!r}")
    value = obj[key]
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
        raise ManifestError(f"{where}.{key}", f"wrong type {type(value).__name__}")
    return value


def _vector(value, where, shape=(3,)):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ManifestError(where, "expected numbers") from None
    if arr.shape != shape:
        raise ManifestError(where, f"wrong shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ManifestError(where, "non-finite value")
    return arr


def _parse_transform(obj, where) -> RigidTransform:
    R = _vector(_field(obj, "rotation", where), f"{where}.rotation", (3, 3))
    t = _vector(_field(obj, "translation", where), f"{where}.translation")
    try:
        return RigidTransform(R, t)
    except ValueError as exc:
        raise ManifestError(where, str(exc)) from None


def _parse_camera(obj, where) -> CameraModel:
    vals = {k: _field(obj, k, where, (int, float)) for k in ("fx", "fy", "cx", "cy")}
    w = _field(obj, "width", where, int)
    h = _field(obj, "height", where, int)
    ext = _parse_transform(_field(obj, "extrinsic", where), f"{where}.extrinsic")
    try:
        return CameraModel(width=w, height=h, extrinsic=ext, **vals)
    except ValueError as exc:
        raise ManifestError(where, str(exc)) from None


def _parse_box(obj, where) -> OrientedBox:
    center = _vector(_field(obj, "center", where), f"{where}.center")
    size = _vector(_field(obj, "size", where), f"{where}.size")
    yaw = _field(obj, "yaw", where, (int, float))
    try:
        cls = SemanticClass.from_label(_field(obj, "class", where, str))
    except ValueError as exc:
        raise ManifestError(f"{where}.class", str(exc)) from None
    track = _field(obj, "track_id", where, int)
    try:
        return OrientedBox(center, size, float(yaw), cls, track)
    except ValueError as exc:
        raise ManifestError(where, str(exc)) from None


def manifest_from_json(doc, base_dir, check_paths: bool = True) -> DatasetManifest:
    base = Path(base_dir)
    schema = _field(doc, "schema", "$", int)
    if schema != SCHEMA_VERSION:
        raise ManifestError("$.schema", f"unsupported schema {schema}")

    def path_of(value, where) -> Path:
        p = Path(os.path.abspath(base / value))
        if check_paths and not p.is_file():
            raise ManifestError(where, f"unresolvable path {value!r}")
        return p

    scenes = []
    seen_ids = set()
    for si, s in enumerate(_field(doc, "scenes", "$", list)):
        sw = f"scenes[{si}]"
        scene_id = _field(s, "scene_id", sw, str)
        if scene_id in seen_ids:
            raise ManifestError(f"{sw}.scene_id", f"duplicate scene id {scene_id!r}")
        seen_ids.add(scene_id)
        frames = []
        last_ts: dict[str, int] = {}
        for fi, f in enumerate(_field(s, "frames", sw, list)):
            fw = f"{sw}.frames[{fi}]"
            ts = _field(f, "timestamp", fw, int)
            side = _field(f, "side", fw, str)
            if side not in SIDES:
                raise ManifestError(f"{fw}.side", f"unknown side {side!r}")
            if side in last_ts and ts <= last_ts[side]:
                raise ManifestError(f"{fw}.timestamp", f"non-increasing timestamp {ts} after {last_ts[side]}")
            last_ts[side] = ts
            cloud = path_of(_field(f, "cloud_path", fw, str), f"{fw}.cloud_path")
            pose = _parse_transform(_field(f, "pose", fw), f"{fw}.pose")
            boxes = tuple(
                _parse_box(b, f"{fw}.boxes[{bi}]")
                for bi, b in enumerate(_field(f, "boxes", fw, list))
            )
            camera = _parse_camera(f["camera"], f"{fw}.camera") if "camera" in f else None
            mask = path_of(_field(f, "mask_path", fw, str), f"{fw}.mask_path") if "mask_path" in f else None
            frames.append(FrameEntry(ts, side, cloud, pose, boxes, camera, mask))
        scenes.append(SceneEntry(scene_id, tuple(frames)))
    return DatasetManifest(tuple(scenes))


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError("$", f"invalid JSON: {exc}") from None
    return manifest_from_json(doc, path.parent, check_paths=check_paths)


def split_manifest(m: DatasetManifest, mode: str, ratio: float | None = None,
                   test_scenes=None) -> tuple[DatasetManifest, DatasetManifest]:
    """Time split: each scene's frames cut at floor(ratio * n). Scene split: whole scenes."""
    if mode == "time":
        if ratio is None or not 0.0 < ratio < 1.0:
            raise ValueError("time split needs a ratio in (0, 1)")
        train, test = [], []
        for s in m.scenes:
            # round() guards against products like 0.57 * 100 = 56.999...
            cut = math.floor(round(ratio * len(s.frames), 9))
            train.append(replace(s, frames=s.frames[:cut]))
            test.append(replace(s, frames=s.frames[cut:]))
        return DatasetManifest(tuple(train)), DatasetManifest(tuple(test))
    if mode == "scene":
        if not test_scenes:
            raise ValueError("scene split needs test scene ids")
        wanted = set(test_scenes)
        known = {s.scene_id for s in m.scenes}
        unknown = sorted(wanted - known)
        if unknown:
            raise ValueError(f"unknown scene id(s): {', '.join(unknown)}")
        train = tuple(s for s in m.scenes if s.scene_id not in wanted)
        test = tuple(s for s in m.scenes if s.scene_id in wanted)
        return DatasetManifest(train), DatasetManifest(test)
    raise ValueError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class MetricsReport:
    cd_l1: float  # x1000
    cd_l2: float  # x1000
    f1: float  # percent
    threshold: float
    per_class_iou: dict  # SemanticClass -> percent, or None when absent
    miou: float
    n_pred: int
    n_gt: int


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "cd_l1", "cd_l2", "f1", "threshold", "per_class_iou", "miou", "n_pred", "n_gt"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "cd_l1": {"type": "number", "minimum": 0},
        "cd_l2": {"type": "number", "minimum": 0},
        "f1": {"type": "number", "minimum": 0, "maximum": 100},
        "threshold": {"type": "number", "exclusiveMinimum": 0},
        "per_class_iou": {
            "type": "object",
            "additionalProperties": False,
            "required": [c.label for c in SCORED_CLASSES],
            "properties": {
                c.label: {"type": ["number", "null"], "minimum": 0, "maximum": 100}
                for c in SCORED_CLASSES
            },
        },
        "miou": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "n_pred": {"type": "integer", "minimum": 0},
        "n_gt": {"type": "integer", "minimum": 0},
    },
}


def _r2(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return round(float(x), 2)


def report_to_json(r: MetricsReport) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "cd_l1": _r2(r.cd_l1),
        "cd_l2": _r2(r.cd_l2),
        "f1": _r2(r.f1),
        "threshold": float(r.threshold),
        "per_class_iou": {c.label: _r2(r.per_class_iou.get(c)) for c in SCORED_CLASSES},
        "miou": _r2(r.miou),
        "n_pred": int(r.n_pred),
        "n_gt": int(r.n_gt),
    }


def write_report(r: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report_to_json(r), indent=2) + "\n", encoding="utf-8")


def read_report(path) -> MetricsReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported report schema")
    try:
        per_class = {SemanticClass.from_label(k): v for k, v in doc["per_class_iou"].items()}
        miou = doc["miou"]
        return MetricsReport(
            cd_l1=doc["cd_l1"], cd_l2=doc["cd_l2"], f1=doc["f1"], threshold=doc["threshold"],
            per_class_iou=per_class, miou=float("nan") if miou is None else miou,
            n_pred=doc["n_pred"], n_gt=doc["n_gt"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: malformed report ({exc})") from None
