"""TUM RGB-D sequences, detection files, trajectories and PLY point clouds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .geometry import DEPTH_MAX, Frame, Intrinsics, Pose

log = logging.getLogger(__name__)

DEFAULT_INTRINSICS = Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480,
                                depth_scale=5000.0)
CALIBRATION_FILE = "calibration.txt"


class DatasetError(Exception):
    """Raised when a sequence, listing or data file cannot be loaded."""


class ParseError(DatasetError, ValueError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


# --------------------------------------------------------------------------- listings

def read_listing(path) -> list[tuple[float, list[str]]]:
    """Parse a TUM listing: ``timestamp field...`` lines, '#' comments.

    Timestamps must be strictly increasing.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    rows = []
    last = -math.inf
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            ts = float(parts[0])
        except ValueError:
            raise ParseError(path, lineno, f"bad timestamp {parts[0]!r}") from None
        if not math.isfinite(ts):
            raise ParseError(path, lineno, "non-finite timestamp")
        if ts <= last:
            raise ParseError(path, lineno, f"timestamp {ts} is not after {last}")
        last = ts
        rows.append((ts, parts[1:]))
    return rows


def associate(first: list[float], second: list[float], max_gap: float) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp association; each entry is used at most once.

    Returns index pairs sorted by the first stream's timestamps.
    """
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if a.size == 0 or b.size == 0:
        return []
    # candidate pairs within the gap; both streams are sorted so a window search suffices
    lo = np.searchsorted(b, a - max_gap, side="left")
    hi = np.searchsorted(b, a + max_gap, side="right")
    cand = []
    for i in range(a.size):
        for j in range(lo[i], hi[i]):
            gap = abs(a[i] - b[j])
            if gap <= max_gap:
                cand.append((gap, i, j))
    # ties broken by timestamps, not roles, so swapping the streams gives the same pairs
    cand.sort(key=lambda c: (c[0], min(a[c[1]], b[c[2]]), max(a[c[1]], b[c[2]])))
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


# --------------------------------------------------------------------------- sequences

@dataclass
class SequenceEntry:
    timestamp: float
    rgb_path: Path
    depth_path: Path
    detections_path: Path | None = None


@dataclass
class SequenceIndex:
    entries: list[SequenceEntry]
    intrinsics: Intrinsics
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def read_calibration(path) -> Intrinsics:
    """``fx fy cx cy width height [depth_scale]`` on one line."""
    path = Path(path)
    rows = [l.split() for l in path.read_text().splitlines() if l.strip() and not l.startswith("#")]
    if not rows or len(rows[0]) < 6:
        raise ParseError(path, 1, "expected 'fx fy cx cy width height [depth_scale]'")
    v = rows[0]
    try:
        return Intrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]),
                          float(v[6]) if len(v) > 6 else 5000.0)
    except ValueError as exc:
        raise ParseError(path, 1, str(exc)) from None


def write_calibration(path, K: Intrinsics):
    Path(path).write_text(
        "# fx fy cx cy width height depth_scale\n"
        f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height} {K.depth_scale!r}\n")


def load_tum_sequence(dir_path, max_assoc_gap: float = 0.02, intrinsics: Intrinsics | None = None,
                      detections_dir=None) -> SequenceIndex:
    """Index a TUM-layout directory (``rgb.txt``, ``depth.txt``).

    Intrinsics come from ``calibration.txt`` when present, else ``intrinsics``,
    else the TUM default 525/319.5/239.5 at 640x480.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    for name in ("rgb.txt", "depth.txt"):
        if not (root / name).is_file():
            raise DatasetError(f"missing {name} in {root}")
    rgb = read_listing(root / "rgb.txt")
    depth = read_listing(root / "depth.txt")
    for rows, name in ((rgb, "rgb.txt"), (depth, "depth.txt")):
        for ts, rest in rows:
            if not rest:
                raise DatasetError(f"{root / name}: entry at {ts} has no filename")

    if intrinsics is None:
        calib = root / CALIBRATION_FILE
        intrinsics = read_calibration(calib) if calib.is_file() else DEFAULT_INTRINSICS

    pairs = associate([r[0] for r in rgb], [d[0] for d in depth], max_assoc_gap)
    if not pairs:
        raise DatasetError(f"no associable rgb/depth pairs in {root}")
    det_root = Path(detections_dir) if detections_dir is not None else None
    entries = []
    for i, j in pairs:
        ts = rgb[i][0]
        det = det_root / detection_filename(ts) if det_root is not None else None
        entries.append(SequenceEntry(ts, root / rgb[i][1][0], root / depth[j][1][0], det))
    return SequenceIndex(entries, intrinsics, root)


def read_depth_png(path, depth_scale: float) -> np.ndarray:
    try:
        with Image.open(path) as im:
            raw = np.array(im)
    except OSError as exc:
        raise DatasetError(f"cannot read depth image {path}: {exc}") from exc
    if raw.ndim != 2:
        raise DatasetError(f"depth image {path} is not single channel")
    return raw.astype(np.float64) / depth_scale


def write_depth_png(path, depth: np.ndarray, depth_scale: float):
    raw = np.clip(np.round(np.nan_to_num(depth) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_rgb_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except OSError as exc:
        raise DatasetError(f"cannot read color image {path}: {exc}") from exc


def load_frame(entry: SequenceEntry, K: Intrinsics, index: int = 0,
               depth_max: float = DEPTH_MAX) -> Frame:
    rgb = read_rgb_png(entry.rgb_path)
    depth = read_depth_png(entry.depth_path, K.depth_scale)
    if depth.shape != (K.height, K.width):
        raise DatasetError(f"{entry.depth_path}: size {depth.shape[::-1]} != intrinsics "
                           f"{K.width}x{K.height}")
    return Frame.from_images(entry.timestamp, rgb, depth, K, depth_max, index)


# --------------------------------------------------------------------------- detections

@dataclass
class CategoryTable:
    """class_name -> rigid flag. Names not listed are rigid."""

    rigid: dict[str, bool] = field(default_factory=lambda: {"person": False})
    source: str | None = None  # file the table came from; unknown names are only reported for loaded tables
    _warned: set = field(default_factory=set, repr=False, compare=False)

    @classmethod
    def load(cls, path) -> "CategoryTable":
        """Lines of ``class_name rigid|nonrigid``."""
        path = Path(path)
        table = {}
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise DatasetError(f"cannot read category table {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2 or parts[1] not in ("rigid", "nonrigid"):
                raise ParseError(path, lineno, "expected 'class_name rigid|nonrigid'")
            table[parts[0]] = parts[1] == "rigid"
        return cls(table, str(path))

    def is_rigid(self, class_name: str) -> bool:
        if class_name in self.rigid:
            return self.rigid[class_name]
        if self.source is not None and class_name not in self._warned:
            self._warned.add(class_name)
            log.warning("class %r not in category table %s; treating it as rigid", class_name, self.source)
        return True


@dataclass(frozen=True)
class Detection:
    class_id: int
    class_name: str
    score: float
    bbox: tuple[float, float, float, float]  # x, y, w, h
    rigid: bool = True

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """Integer ``(x0, y0, x1, y1)``, half-open, covering every touched pixel."""
        x, y, w, h = self.bbox
        return int(math.floor(x)), int(math.floor(y)), int(math.ceil(x + w)), int(math.ceil(y + h))


def detection_filename(timestamp: float) -> str:
    return f"{timestamp:.6f}.det"


def parse_detections(text: str, width: int, height: int, score_min: float = 0.5,
                     categories: CategoryTable | None = None, source="<detections>") -> list[Detection]:
    categories = categories or CategoryTable()
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(source, lineno, f"expected 7 fields, got {len(parts)}")
        try:
            class_id = int(parts[0])
            score, x, y, w, h = (float(p) for p in parts[2:])
        except ValueError as exc:
            raise ParseError(source, lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in (score, x, y, w, h)):
            raise ParseError(source, lineno, "non-finite value")
        if not 0.0 <= score <= 1.0:
            raise ParseError(source, lineno, f"score {score} outside [0, 1]")
        if w <= 0 or h <= 0:
            raise ParseError(source, lineno, "box width and height must be positive")
        if score < score_min:
            continue
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = min(float(width), x + w), min(float(height), y + h)
        if x1 <= x0 or y1 <= y0:
            continue  # entirely outside the image
        name = parts[1]
        out.append(Detection(class_id, name, score, (x0, y0, x1 - x0, y1 - y0),
                             categories.is_rigid(name)))
    return out


def load_detections(path, frame_timestamp: float | None, width: int, height: int,
                    score_min: float = 0.5, categories: CategoryTable | None = None) -> list[Detection]:
    """Detections for one frame.

    ``path`` is either a ``.det`` file or a directory holding one file per
    frame named by :func:`detection_filename`. A missing file means no
    detections.
    """
    if path is None:
        return []
    path = Path(path)
    if path.is_dir():
        path = path / detection_filename(frame_timestamp)
    if not path.is_file():
        return []
    return parse_detections(path.read_text(), width, height, score_min, categories, source=path)


def format_detections(detections) -> str:
    lines = ["# class_id class_name score x y w h"]
    for d in detections:
        x, y, w, h = d.bbox
        lines.append(f"{d.class_id} {d.class_name} {d.score:.4f} {x:.2f} {y:.2f} {w:.2f} {h:.2f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- trajectories

@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: float
    translation: np.ndarray
    quaternion: np.ndarray  # qx, qy, qz, qw

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError(f"quaternion {q} is not unit")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def from_pose(cls, timestamp: float, pose: Pose) -> "TrajectoryRecord":
        q = Rotation.from_matrix(pose.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return cls(timestamp, pose.translation.copy(), q / np.linalg.norm(q))

    def to_pose(self) -> Pose:
        return Pose(Rotation.from_quat(self.quaternion).as_matrix(), self.translation)


def format_trajectory(records) -> str:
    lines = []
    for r in records:
        vals = [r.timestamp, *r.translation, *r.quaternion]
        # avoid "-0.000000" so identical poses always print identically
        lines.append(" ".join(f"{v:.6f}".replace("-0.000000", "0.000000") for v in vals))
    return "\n".join(lines) + "\n"


def export_trajectory(records, path):
    records = list(records)
    if not records:
        raise ValueError("no trajectory records to export")
    path = Path(path)
    try:
        path.write_text(format_trajectory(records))
    except OSError as exc:
        raise DatasetError(f"cannot write trajectory {path}: {exc}") from exc
    return path


def load_trajectory(path) -> list[TrajectoryRecord]:
    path = Path(path)
    out = []
    for ts, rest in read_listing(path):
        if len(rest) < 7:
            raise DatasetError(f"{path}: record at {ts} needs 7 values after the timestamp")
        v = np.array([float(x) for x in rest[:7]])
        q = v[3:7]
        n = np.linalg.norm(q)
        if n == 0:
            raise DatasetError(f"{path}: zero quaternion at {ts}")
        out.append(TrajectoryRecord(ts, v[:3], q / n))
    return out


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

SURFEL_PLY_FIELDS = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("nx", "<f4"), ("ny", "<f4"),
                     ("nz", "<f4"), ("radius", "<f4"), ("confidence", "<f4"),
                     ("created", "<f4"), ("updated", "<f4"), ("red", "u1"), ("green", "u1"),
                     ("blue", "u1")]


def export_ply(surfel_map, path):
    """Binary little-endian PLY of a surfel map's position, normal, radius,
    weight, timestamps and color."""
    n = len(surfel_map)
    if n == 0:
        raise ValueError("cannot export an empty map")
    rec = np.empty(n, dtype=SURFEL_PLY_FIELDS)
    rec["x"], rec["y"], rec["z"] = surfel_map.positions.T
    rec["nx"], rec["ny"], rec["nz"] = surfel_map.normals.T
    rec["radius"] = surfel_map.radii
    rec["confidence"] = surfel_map.weights
    rec["created"] = surfel_map.created_at
    rec["updated"] = surfel_map.last_updated
    rec["red"], rec["green"], rec["blue"] = surfel_map.colors.T
    header = ["ply", "format binary_little_endian 1.0",
              f"comment map_id {surfel_map.map_id} kind {surfel_map.kind}"
              + (f" class {surfel_map.class_name}" if surfel_map.class_name else ""),
              f"element vertex {n}"]
    for name, dt in SURFEL_PLY_FIELDS:
        header.append(f"property {'uchar' if dt == 'u1' else 'float'} {name}")
    header.append("end_header")
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(rec.tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return path


def write_points_ply(path, points: np.ndarray):
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\nproperty float x\nproperty float y\nproperty float z\n"
              "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.tobytes())


def read_ply(path) -> np.ndarray:
    """Vertex element of a PLY file (ascii or binary) as a structured array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise DatasetError(f"{path}: list properties before vertex data are unsupported")
            if not elements or parts[1] not in _PLY_TYPES:
                raise DatasetError(f"{path}: bad property line {line!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise DatasetError(f"{path}: first element must be vertex")
    _, count, props = elements[0]
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:count]
        table = np.loadtxt(rows, ndmin=2) if count else np.zeros((0, len(props)))
        out = np.empty(count, dtype=[(n, t) for n, t in props])
        for k, (name, _) in enumerate(props):
            out[name] = table[:, k]
        return out
    endian = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt)
    if endian is None:
        raise DatasetError(f"{path}: unknown PLY format {fmt!r}")
    dt = np.dtype([(n, endian + t) for n, t in props])
    return np.frombuffer(data, dtype=dt, count=count, offset=body_start).copy()


def read_ply_points(path) -> np.ndarray:
    v = read_ply(path)
    return np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(float)
