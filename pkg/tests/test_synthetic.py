import json

import numpy as np
import pytest

from dynfusion.dataset import load_trajectory, load_tum_sequence, read_depth_png
from dynfusion.synthetic import (SYNTH_INTRINSICS, Box, CameraPath, MovingBody, Plane, SceneError, SyntheticScene,
                                 generate_synthetic, load_scene, preset, render_frame)


def test_plane_preset_is_constant():
    scene = preset("plane", n_frames=4)
    depths = [render_frame(scene, i)[1] for i in range(4)]
    for d in depths[1:]:
        np.testing.assert_array_equal(d, depths[0])
    assert np.allclose(depths[0][SYNTH_INTRINSICS.height // 2], 2.0, atol=0.02)


def test_moving_box_centroid_shift():
    K = SYNTH_INTRINSICS
    z_front = 1.995
    body = MovingBody(Box((0.1, 0.1, 0.005), (0.0, 0.0, 2.0)), velocity=(0.01, 0.0, 0.0))
    scene = SyntheticScene(n_frames=6, planes=[Plane((0, 0, -1.0), 3.0)], bodies=[body],
                           camera=CameraPath(kind="static"))
    cx = [np.nonzero(render_frame(scene, i)[2] == 1)[1].mean() for i in range(6)]
    shifts = np.diff(cx)
    assert shifts.mean() == pytest.approx(K.fx * 0.01 / z_front, abs=0.05)
    # each edge snaps to whole pixels, so single steps are quantised to half pixels
    assert np.all(np.abs(shifts - K.fx * 0.01 / z_front) <= 0.5)


def test_noise_free_and_seeded_noise_are_deterministic():
    a = render_frame(preset("static", n_frames=5), 2)[1]
    b = render_frame(preset("static", n_frames=5), 2)[1]
    np.testing.assert_array_equal(a, b)
    n1 = render_frame(preset("static", n_frames=5, noise=0.002, seed=3), 2)[1]
    n2 = render_frame(preset("static", n_frames=5, noise=0.002, seed=3), 2)[1]
    n3 = render_frame(preset("static", n_frames=5, noise=0.002, seed=4), 2)[1]
    np.testing.assert_array_equal(n1, n2)
    assert not np.array_equal(n1, n3) and not np.array_equal(n1, a)


def test_unknown_preset_and_camera_behind_plane():
    with pytest.raises(SceneError):
        preset("garden")
    scene = SyntheticScene(n_frames=1, planes=[Plane((0, 0, -1.0), -1.0)], camera=CameraPath(kind="static"))
    with pytest.raises(SceneError):
        render_frame(scene, 0)


def test_generated_dataset_round_trips(tmp_path):
    scene = preset("two-body", n_frames=5, detections=True)
    root = generate_synthetic(scene, tmp_path / "ds")
    seq = load_tum_sequence(root, detections_dir=root / "detections")
    assert len(seq) == 5 and seq.intrinsics == scene.intrinsics
    depth = read_depth_png(seq.entries[3].depth_path, scene.intrinsics.depth_scale)
    np.testing.assert_allclose(depth, render_frame(scene, 3)[1], atol=1.0 / scene.intrinsics.depth_scale)
    gt = load_trajectory(root / "groundtruth.txt")
    np.testing.assert_allclose(gt[4].translation, render_frame(scene, 4)[3].translation, atol=1e-6)
    assert len(load_trajectory(root / "object_1.txt")) == 5
    assert load_scene(root / "scene.json").to_dict() == json.loads((root / "scene.json").read_text())
