import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynfusion.geometry import (Intrinsics, Pose, Twist, backproject, compute_vertex_normal_maps, pose_compose,
                                pose_inverse, project, rgb_to_intensity, se3_exp, se3_log, so3_exp,
                                transform_point)

from conftest import make_frame, plane_depth

finite = st.floats(-3.0, 3.0, allow_nan=False)


def _rodrigues_oracle(omega):
    """Matrix exponential by truncated power series, independent of the closed form."""
    W = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
    out, term = np.eye(3), np.eye(3)
    for k in range(1, 60):
        term = term @ W / k
        out = out + term
    return out


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 0, 0, 0, 10)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 0, 0, 10, 10, depth_scale=0)


def test_twist_rejects_nonfinite():
    with pytest.raises(ValueError):
        Twist([np.nan, 0, 0], [0, 0, 0])


def test_zero_twist_is_identity():
    p = se3_exp(np.zeros(6))
    np.testing.assert_allclose(p.matrix, np.eye(4), atol=1e-15)


def test_quarter_turn_about_z():
    p = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(p.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(p.translation, 0, atol=1e-15)


@given(st.lists(finite, min_size=3, max_size=3))
@settings(max_examples=60, deadline=None)
def test_so3_exp_matches_power_series(omega):
    np.testing.assert_allclose(so3_exp(omega), _rodrigues_oracle(np.array(omega)), atol=1e-9)


@given(st.lists(st.floats(-1.7, 1.7), min_size=6, max_size=6))
@settings(max_examples=100, deadline=None)
def test_exp_log_round_trip(xi):
    xi = np.array(xi)
    if np.linalg.norm(xi[:3]) > 3.0:
        xi[:3] *= 3.0 / np.linalg.norm(xi[:3])
    back = se3_log(se3_exp(xi)).as_vector()
    np.testing.assert_allclose(back, xi, atol=1e-9)


def test_log_near_pi():
    omega = np.array([0.0, 1.0, 0.0]) * (math.pi - 1e-6)
    np.testing.assert_allclose(se3_log(se3_exp(np.r_[omega, 0, 0, 0])).omega, omega, atol=1e-6)


def test_inverse_twist_composes_to_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        xi = rng.normal(scale=0.3, size=6)
        p = se3_exp(xi) @ se3_exp(-xi)
        np.testing.assert_allclose(p.matrix, np.eye(4), atol=1e-9)


def test_group_laws():
    rng = np.random.default_rng(2)
    a = se3_exp(rng.normal(size=6))
    b = se3_exp(rng.normal(size=6))
    np.testing.assert_allclose((Pose.identity() @ b).matrix, b.matrix, atol=1e-12)
    np.testing.assert_allclose(pose_compose(a, pose_inverse(a)).matrix, np.eye(4), atol=1e-9)
    np.testing.assert_allclose(pose_compose(a, b).matrix, a.matrix @ b.matrix, atol=1e-9)
    np.testing.assert_allclose(transform_point(Pose(np.eye(3), [1, 2, 3]), [0, 0, 0]), [1, 2, 3])


def test_long_composition_stays_orthonormal():
    rng = np.random.default_rng(3)
    p = Pose.identity()
    for _ in range(2000):
        p = p @ se3_exp(rng.normal(scale=0.5, size=6))
    R = p.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_backproject_examples():
    K = Intrinsics(525, 525, 319.5, 239.5, 640, 480)
    np.testing.assert_allclose(backproject(319.5, 239.5, 2.0, K), [0, 0, 2.0])
    np.testing.assert_allclose(backproject(419.5, 239.5, 1.05, K), [0.2, 0, 1.05], atol=1e-12)
    assert np.all(np.isnan(backproject(10, 10, 0.0, K)))
    assert np.all(np.isnan(backproject(10, 10, -1.0, K)))


def test_project_backproject_round_trip():
    K = Intrinsics(525, 520, 319.5, 239.5, 640, 480)
    rng = np.random.default_rng(4)
    u, v = rng.uniform(0, 640, 500), rng.uniform(0, 480, 500)
    d = rng.uniform(0.1, 6, 500)
    uv = project(backproject(u, v, d, K), K)
    np.testing.assert_allclose(uv, np.stack([u, v], -1), atol=1e-6)


def test_fronto_parallel_normals(K_qvga):
    depth = np.ones((K_qvga.height, K_qvga.width))
    V, N, valid = compute_vertex_normal_maps(depth, K_qvga)
    assert valid[1:-1, 1:-1].all() and not valid[0].any() and not valid[:, -1].any()
    np.testing.assert_allclose(N[valid], np.tile([0, 0, -1.0], (valid.sum(), 1)), atol=1e-12)
    np.testing.assert_allclose(V[valid][:, 2], 1.0)


def test_ramp_normals_tilt(K_qvga):
    # plane z = 1 + s * x (metric slope s along camera x); analytic normal ~ (s, 0, -1)
    s = 0.4
    depth = plane_depth(K_qvga, (-s, 0.0, 1.0), 1.0)
    _, N, valid = compute_vertex_normal_maps(depth, K_qvga)
    expected = np.array([s, 0.0, -1.0]) / math.hypot(s, 1.0)
    np.testing.assert_allclose(N[valid], np.tile(expected, (valid.sum(), 1)), atol=1e-9)
    tilt = math.degrees(math.atan2(N[valid][0, 0], -N[valid][0, 2]))
    assert tilt == pytest.approx(math.degrees(math.atan(s)), abs=1e-6)


def test_hole_invalidates_four_neighbourhood(K_qvga):
    depth = np.ones((K_qvga.height, K_qvga.width))
    depth[50, 60] = 0.0
    _, N, valid = compute_vertex_normal_maps(depth, K_qvga)
    for y, x in ((50, 60), (49, 60), (51, 60), (50, 59), (50, 61)):
        assert not valid[y, x]
        assert np.all(N[y, x] == 0)
    assert valid[49, 59]


def test_depth_range_validity(K_qvga):
    depth = np.full((K_qvga.height, K_qvga.width), 2.0)
    depth[10:20, 10:20] = 0.05
    depth[100:110, 100:110] = 7.0
    f = make_frame(K_qvga, depth)
    assert not f.valid_mask[15, 15] and not f.valid_mask[105, 105] and f.valid_mask[60, 60]
    assert f.depth[15, 15] == 0 and f.depth[105, 105] == 0


def test_frame_invariants(K_qvga):
    depth = plane_depth(K_qvga, (0.2, -0.1, 1.0), 2.0)
    f = make_frame(K_qvga, depth)
    n = np.linalg.norm(f.normal_map[f.valid_mask], axis=1)
    np.testing.assert_allclose(n, 1.0, atol=1e-6)
    np.testing.assert_allclose(f.vertex_map[..., 2][f.valid_mask], f.depth[f.valid_mask])
    assert np.all(np.sum(f.normal_map * f.vertex_map, -1)[f.valid_mask] < 0)


def test_intensity_weights():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    np.testing.assert_allclose(rgb_to_intensity(rgb), [[0.299, 0.587, 0.114]])


def test_frame_rejects_size_mismatch(K_small):
    with pytest.raises(ValueError):
        make_frame(K_small, np.ones((16, 16)), rgb=np.zeros((8, 8, 3), np.uint8))
