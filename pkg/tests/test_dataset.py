import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from dynfusion.dataset import (CategoryTable, DatasetError, ParseError, TrajectoryRecord, associate,
                               export_ply, export_trajectory, format_trajectory, load_detections,
                               load_frame, load_trajectory, load_tum_sequence, parse_detections,
                               read_listing, read_ply, read_ply_points, write_depth_png)
from dynfusion.geometry import Intrinsics, Pose, se3_exp
from dynfusion.surfels import SurfelMap


def _write_sequence(root, rgb_ts, depth_ts, K=None, size=(8, 6)):
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    w, h = size
    for ts in rgb_ts:
        Image.fromarray(np.full((h, w, 3), 100, np.uint8)).save(root / "rgb" / f"{ts:.6f}.png")
    for ts in depth_ts:
        write_depth_png(root / "depth" / f"{ts:.6f}.png", np.full((h, w), 1.5), 5000.0)
    (root / "rgb.txt").write_text("# rgb\n" + "".join(f"{t:.6f} rgb/{t:.6f}.png\n" for t in rgb_ts))
    (root / "depth.txt").write_text("# depth\n" + "".join(f"{t:.6f} depth/{t:.6f}.png\n" for t in depth_ts))
    if K is not None:
        (root / "calibration.txt").write_text(f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height} 5000\n")


def test_identical_timestamps_pair_up(tmp_path):
    ts = [1.0, 1.1, 1.2]
    _write_sequence(tmp_path, ts, ts)
    seq = load_tum_sequence(tmp_path)
    assert [e.timestamp for e in seq] == ts
    assert all(e.depth_path.name == e.rgb_path.name for e in seq)


def test_association_threshold(tmp_path):
    assert associate([0.0], [0.015], 0.02) == [(0, 0)]
    assert associate([0.0], [0.015], 0.01) == []


def test_depth_used_at_most_once():
    pairs = associate([0.0, 0.01], [0.005], 0.02)
    assert len(pairs) == 1


@given(st.lists(st.floats(0, 10), min_size=1, max_size=25, unique=True),
       st.lists(st.floats(0, 10), min_size=1, max_size=25, unique=True))
@settings(max_examples=100, deadline=None)
def test_association_symmetric(a, b):
    a, b = sorted(a), sorted(b)
    ab = associate(a, b, 0.05)
    ba = associate(b, a, 0.05)
    assert sorted(ab) == sorted((i, j) for j, i in ba)


def test_out_of_order_listing_names_line(tmp_path):
    p = tmp_path / "rgb.txt"
    p.write_text("# header\n1.0 a.png\n3.0 b.png\n2.0 c.png\n")
    with pytest.raises(ParseError) as exc:
        read_listing(p)
    assert exc.value.lineno == 4
    assert ":4:" in str(exc.value)


def test_missing_listing(tmp_path):
    with pytest.raises(DatasetError, match="rgb.txt"):
        load_tum_sequence(tmp_path)
    with pytest.raises(DatasetError, match="not found"):
        load_tum_sequence(tmp_path / "nope")


def test_no_associable_pairs(tmp_path):
    _write_sequence(tmp_path, [1.0], [2.0])
    with pytest.raises(DatasetError, match="no associable"):
        load_tum_sequence(tmp_path)


def test_depth_decoding_and_calibration(tmp_path):
    K = Intrinsics(10, 10, 3.5, 2.5, 8, 6)
    _write_sequence(tmp_path, [1.0], [1.0], K)
    seq = load_tum_sequence(tmp_path)
    assert seq.intrinsics == K
    f = load_frame(seq.entries[0], seq.intrinsics)
    np.testing.assert_allclose(f.depth[f.depth > 0], 1.5)
    raw = np.array(Image.open(seq.entries[0].depth_path))
    assert raw.dtype == np.uint16 and raw[0, 0] == 7500


def test_frame_size_mismatch(tmp_path):
    _write_sequence(tmp_path, [1.0], [1.0], Intrinsics(10, 10, 3.5, 2.5, 16, 12))
    seq = load_tum_sequence(tmp_path)
    with pytest.raises(DatasetError, match="size"):
        load_frame(seq.entries[0], seq.intrinsics)


def test_detection_line():
    dets = parse_detections("2 car 0.91 100 120 80 60\n", 640, 480)
    assert len(dets) == 1
    d = dets[0]
    assert (d.class_id, d.class_name, d.score, d.bbox, d.rigid) == (2, "car", 0.91, (100, 120, 80, 60), True)


def test_detection_clamped_and_filtered():
    dets = parse_detections("1 cup 0.9 600 10 100 20\n3 dog 0.3 1 1 5 5\n", 640, 480)
    assert len(dets) == 1
    assert dets[0].bbox == (600, 10, 40, 20)


def test_detection_person_nonrigid_by_default():
    assert not parse_detections("0 person 0.8 1 1 5 5", 640, 480)[0].rigid


def test_detection_errors_carry_line():
    with pytest.raises(ParseError) as exc:
        parse_detections("# c\n1 car 0.9 1 1 5\n", 640, 480)
    assert exc.value.lineno == 2
    for bad in ("1 car 1.5 1 1 5 5", "1 car 0.9 1 1 0 5", "x car 0.9 1 1 5 5", "1 car nan 1 1 5 5"):
        with pytest.raises(ParseError):
            parse_detections(bad, 640, 480)


@given(st.text(max_size=200))
@settings(max_examples=300, deadline=None)
def test_detection_parsing_total(text):
    try:
        out = parse_detections(text, 64, 48)
    except ParseError:
        return
    for d in out:
        x, y, w, h = d.bbox
        assert 0 <= x and 0 <= y and w > 0 and h > 0 and x + w <= 64 and y + h <= 48 and 0 <= d.score <= 1


def test_missing_detection_file_is_empty(tmp_path):
    assert load_detections(tmp_path, 1.0, 640, 480) == []
    (tmp_path / "1.000000.det").write_text("2 car 0.9 1 1 5 5\n")
    assert len(load_detections(tmp_path, 1.0, 640, 480)) == 1


def test_category_table_file(tmp_path, caplog):
    p = tmp_path / "cats.txt"
    p.write_text("# table\nperson nonrigid\ncar rigid\nhorse nonrigid\n")
    t = CategoryTable.load(p)
    assert t.is_rigid("car") and not t.is_rigid("horse")
    assert t.is_rigid("boat")
    assert "boat" in caplog.text
    p.write_text("person squishy\n")
    with pytest.raises(ParseError):
        CategoryTable.load(p)


def test_identity_trajectory_line():
    rec = TrajectoryRecord.from_pose(1.0, Pose.identity())
    assert format_trajectory([rec]) == "1.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 1.000000\n"


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [TrajectoryRecord.from_pose(10 + i / 30, se3_exp(rng.normal(size=6))) for i in range(20)]
    back = load_trajectory(export_trajectory(recs, tmp_path / "t.txt"))
    for a, b in zip(recs, back):
        assert abs(a.timestamp - b.timestamp) < 1e-6
        np.testing.assert_allclose(a.translation, b.translation, atol=1e-6)
        np.testing.assert_allclose(a.quaternion, b.quaternion, atol=1e-6)


def test_export_trajectory_io_error(tmp_path):
    with pytest.raises(DatasetError, match="missing_dir"):
        export_trajectory([TrajectoryRecord.from_pose(0, Pose())], tmp_path / "missing_dir" / "t.txt")
    with pytest.raises(ValueError):
        export_trajectory([], tmp_path / "t.txt")


def test_non_unit_quaternion_rejected():
    with pytest.raises(ValueError):
        TrajectoryRecord(0.0, np.zeros(3), np.array([0, 0, 0, 2.0]))


def test_single_surfel_ply(tmp_path):
    m = SurfelMap(0)
    m.add(np.array([[1.0, 2.0, 3.0]]), np.array([[0, 0, -1.0]]), np.array([[10, 20, 30]]),
          np.array([0.01]), np.array([2.0]), 5)
    path = export_ply(m, tmp_path / "m.ply")
    header = path.read_bytes().split(b"end_header")[0].decode()
    assert "element vertex 1" in header
    assert header.count("property float") == 10 and header.count("property uchar") == 3
    v = read_ply(path)
    assert v["radius"][0] == pytest.approx(0.01) and v["red"][0] == 10
    np.testing.assert_allclose(read_ply_points(path), [[1, 2, 3]])


def test_ascii_ply(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 2 3\n")
    np.testing.assert_allclose(read_ply_points(p), [[0, 0, 0], [1, 2, 3]])
    with pytest.raises(DatasetError):
        (tmp_path / "b.ply").write_text("not a ply")
        read_ply(tmp_path / "b.ply")
