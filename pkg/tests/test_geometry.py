"""Rotation algebra and cylindrical projection against independent oracles.

The exponential map is checked against a truncated matrix power series, all
Jacobians against central finite differences, and a handful of poses with
hand-computable projections are frozen as literals.
"""

import numpy as np
import pytest

from evpano.geometry import (
    CameraIntrinsics,
    MapGeometry,
    PoleSingularity,
    axis_angle_from_rotation,
    backproject,
    pixel_grid_rays,
    pixels_to_rays,
    pose_projection_jacobian,
    project,
    project_ray,
    project_rays,
    projection_jacobian,
    projection_jacobians,
    rotation_from_axis_angle,
    rotation_jacobian,
    skew,
    so3_left_jacobian,
    transform_jacobian,
)

INTR = CameraIntrinsics(fx=200.0, fy=210.0, cx=120.0, cy=90.0, width=240, height=180)
GEOM = MapGeometry(width=1200, height=640)


def series_exp(K, terms=30):
    # Independent oracle: exp(K) via its power series.
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms + 1):
        term = term @ K / k
        out = out + term
    return out


def random_axis_angle(rng, max_angle):
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return v * rng.uniform(1e-4, max_angle)


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------

def test_skew_layout_and_cross_product():
    v = np.array([1.0, 2.0, 3.0])
    expected = np.array([
        [0.0, -3.0, 2.0],
        [3.0, 0.0, -1.0],
        [-2.0, 1.0, 0.0],
    ])
    assert np.array_equal(skew(v), expected)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


def test_rotation_matches_power_series():
    rng = np.random.default_rng(1)
    for _ in range(300):
        theta = random_axis_angle(rng, np.pi)
        assert np.abs(rotation_from_axis_angle(theta) - series_exp(skew(theta))).max() < 1e-12


def test_rotation_orthonormal_and_proper():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        R = rotation_from_axis_angle(random_axis_angle(rng, np.pi))
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_rotation_small_angle_series_branch():
    theta = np.array([1e-10, -2e-10, 5e-11])
    assert np.abs(rotation_from_axis_angle(theta) - series_exp(skew(theta))).max() < 1e-15
    assert np.array_equal(rotation_from_axis_angle(np.zeros(3)), np.eye(3))


def test_rotation_frozen_quarter_turn():
    R = rotation_from_axis_angle(np.array([0.0, 0.0, np.pi / 2.0]))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(R - expected).max() < 1e-15


def test_log_roundtrip():
    rng = np.random.default_rng(3)
    for _ in range(300):
        theta = random_axis_angle(rng, np.pi - 1e-3)
        rec = axis_angle_from_rotation(rotation_from_axis_angle(theta))
        assert np.abs(rec - theta).max() < 1e-9


def test_log_near_pi_and_tiny():
    rng = np.random.default_rng(4)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta = axis * (np.pi - 1e-8)
        rec = axis_angle_from_rotation(rotation_from_axis_angle(theta))
        # Log is defined up to axis sign exactly at pi; compare rotations.
        assert np.abs(rotation_from_axis_angle(rec) - rotation_from_axis_angle(theta)).max() < 1e-7
    tiny = np.array([1e-9, 2e-9, -1e-9])
    assert np.abs(axis_angle_from_rotation(rotation_from_axis_angle(tiny)) - tiny).max() < 1e-15


def test_left_jacobian_convention():
    # R(theta + d) == exp([J_l(theta) d]_x) R(theta) to second order in d.
    rng = np.random.default_rng(5)
    for _ in range(100):
        theta = random_axis_angle(rng, 2.0)
        d = rng.normal(size=3) * 1e-6
        lhs = rotation_from_axis_angle(theta + d)
        rhs = rotation_from_axis_angle(so3_left_jacobian(theta) @ d) @ rotation_from_axis_angle(theta)
        assert np.abs(lhs - rhs).max() < 1e-10
    assert np.abs(so3_left_jacobian(np.zeros(3)) - np.eye(3)).max() == 0.0


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

def test_backproject_center_and_corner():
    assert np.array_equal(backproject(120.0, 90.0, INTR), np.array([0.0, 0.0, 1.0]))
    ray = backproject(0.0, 0.0, INTR)
    assert np.allclose(ray, [-120.0 / 200.0, -90.0 / 210.0, 1.0], atol=1e-15)


def test_pixels_to_rays_matches_scalar():
    rng = np.random.default_rng(6)
    xs = rng.uniform(0, 239, size=50)
    ys = rng.uniform(0, 179, size=50)
    rays = pixels_to_rays(xs, ys, INTR)
    for i in range(50):
        assert np.allclose(rays[i], backproject(xs[i], ys[i], INTR), atol=1e-15)


def test_pixel_grid_rays_row_major_and_cached():
    intr = CameraIntrinsics(fx=50.0, fy=50.0, cx=8.0, cy=6.0, width=16, height=12)
    rays = pixel_grid_rays(intr)
    assert rays.shape == (16 * 12, 3)
    assert np.allclose(rays[0], backproject(0.0, 0.0, intr))
    assert np.allclose(rays[3 * 16 + 5], backproject(5.0, 3.0, intr))
    assert pixel_grid_rays(intr) is rays
    assert not rays.flags.writeable
    with pytest.raises(ValueError):
        pixel_grid_rays(intr, stride=0)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=0, height=10)


def test_calibration_file_parsing(tmp_path):
    four = tmp_path / "four.txt"
    four.write_text("# comment\n\n199.0 198.0 119.5 89.5\n")
    intr = CameraIntrinsics.from_file(four)
    assert (intr.fx, intr.fy, intr.cx, intr.cy) == (199.0, 198.0, 119.5, 89.5)
    assert (intr.width, intr.height) == (240, 180)

    six = tmp_path / "six.txt"
    six.write_text("100 101 63.5 63.5 128 128\n")
    intr = CameraIntrinsics.from_file(six)
    assert (intr.width, intr.height) == (128, 128)

    bad = tmp_path / "bad.txt"
    bad.write_text("1 2 3 4 5\n")
    with pytest.raises(ValueError):
        CameraIntrinsics.from_file(bad)

    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing\n")
    with pytest.raises(ValueError):
        CameraIntrinsics.from_file(empty)

    with pytest.raises(OSError):
        CameraIntrinsics.from_file(tmp_path / "missing.txt")


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_map_geometry_for_camera_even_dims():
    geom = MapGeometry.for_camera(CameraIntrinsics(200.0, 200.0, 120.0, 90.0))
    # round(2 pi 200) = 1257 -> 1258, round(pi 200) = 628 (already even)
    assert (geom.width, geom.height) == (1258, 628)
    geom = MapGeometry.for_camera(CameraIntrinsics(200.0, 200.0, 120.0, 90.0), upsample=1.5)
    assert (geom.width, geom.height) == (1886, 942)
    with pytest.raises(ValueError):
        MapGeometry.for_camera(INTR, upsample=0.0)


def test_project_frozen_directions():
    # Optical axis lands on the panorama center.
    assert np.allclose(project_ray(np.array([0.0, 0.0, 1.0]), GEOM), [600.0, 320.0], atol=1e-12)
    # +x viewing direction: quarter turn right of center.
    assert np.allclose(project_ray(np.array([1.0, 0.0, 0.0]), GEOM), [900.0, 320.0], atol=1e-12)
    # -x: quarter turn left.
    assert np.allclose(project_ray(np.array([-1.0, 0.0, 0.0]), GEOM), [300.0, 320.0], atol=1e-12)
    # Backward direction: azimuth pi wraps to the seam at u = 0.
    assert np.allclose(project_ray(np.array([0.0, 0.0, -1.0]), GEOM), [0.0, 320.0], atol=1e-9)
    # 45 degrees down: v offset is p_y * tan(elevation) = p_y (y grows downward).
    assert np.allclose(project_ray(np.array([0.0, 1.0, 1.0]), GEOM), [600.0, 640.0], atol=1e-12)
    assert np.allclose(project_ray(np.array([0.0, -0.5, 1.0]), GEOM), [600.0, 160.0], atol=1e-12)


def test_project_yaw_quarter_turn():
    # Positive rotation about +y turns the optical axis toward +x.
    uv = project(INTR.cx, INTR.cy, np.array([0.0, np.pi / 2.0, 0.0]), INTR, GEOM)
    assert np.allclose(uv, [900.0, 320.0], atol=1e-9)


def test_project_scale_invariance_and_wrap():
    rng = np.random.default_rng(7)
    for _ in range(100):
        X = rng.normal(size=3)
        if np.hypot(X[0], X[2]) < 1e-3:
            continue
        a = project_ray(X, GEOM)
        b = project_ray(X * rng.uniform(0.1, 10.0), GEOM)
        assert np.abs(a - b).max() < 1e-9
    u, v, valid = project_rays(np.array([[0.0, 0.0, 1.0], [0.0, 1e-9, -1.0]]), GEOM)
    assert valid.all()
    assert u[1] < 1e-6 or u[1] > GEOM.width - 1e-6  # seam neighbourhood


def test_pole_handling():
    with pytest.raises(PoleSingularity):
        project_ray(np.array([0.0, 1.0, 0.0]), GEOM)
    with pytest.raises(PoleSingularity):
        projection_jacobian(np.array([1e-9, -1.0, 0.0]), GEOM)
    u, v, valid = project_rays(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), GEOM)
    assert not valid[0] and valid[1]
    assert u[0] == 0.0 and v[0] == 0.0
    jac, jvalid = projection_jacobians(np.array([[0.0, 1.0, 0.0]]), GEOM)
    assert not jvalid[0]
    assert np.array_equal(jac[0], np.zeros((2, 3)))


def test_wrapped_delta_u():
    geom = MapGeometry(width=34, height=10)
    du = geom.wrapped_delta_u(np.array([33.0, -33.0, 1.0, 17.0, -17.0, 0.0]))
    assert np.allclose(du, [-1.0, 1.0, 1.0, 17.0, 17.0, 0.0], atol=1e-12)
    assert float(geom.wrap_u(34.0)) == 0.0
    assert float(geom.wrap_u(-1.0)) == 33.0


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def test_projection_jacobian_frozen_at_axis():
    J = projection_jacobian(np.array([0.0, 0.0, 1.0]), GEOM)
    expected = np.array([[GEOM.p_x / np.pi, 0.0, 0.0], [0.0, GEOM.p_y, 0.0]])
    assert np.abs(J - expected).max() < 1e-12


def test_projection_jacobian_finite_difference():
    rng = np.random.default_rng(8)
    checked = 0
    while checked < 200:
        X = rng.normal(size=3)
        if np.hypot(X[0], X[2]) < 0.3 * np.linalg.norm(X):
            continue
        J = projection_jacobian(X, GEOM)
        fd = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-6
            fd[:, k] = (project_ray(X + e, GEOM) - project_ray(X - e, GEOM)) / 2e-6
        if np.abs(fd[0]).max() > GEOM.p_x / 4.0:  # stepped across the seam
            continue
        assert np.abs(J - fd).max() / max(1.0, np.abs(J).max()) < 1e-6
        checked += 1


def test_projection_jacobian_annihilates_ray():
    rng = np.random.default_rng(9)
    for _ in range(100):
        X = rng.normal(size=3)
        if np.hypot(X[0], X[2]) < 1e-2:
            continue
        assert np.abs(projection_jacobian(X, GEOM) @ X).max() < 1e-9


def test_projection_jacobians_matches_scalar():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(50, 3))
    X[:, 2] += 2.0
    jac, valid = projection_jacobians(X, GEOM)
    assert valid.all()
    for i in range(50):
        assert np.allclose(jac[i], projection_jacobian(X[i], GEOM), atol=1e-13)


def test_rotation_jacobian_identity_blocks():
    J = rotation_jacobian(np.zeros(3))
    expected = np.vstack([-skew(np.eye(3)[:, i]) for i in range(3)])
    assert np.array_equal(J, expected)


def test_rotation_jacobian_finite_difference_at_zero():
    # At theta = 0 a left increment equals a parameter increment, so the
    # blocks alone are the exact derivative of vec(R).
    eps = 1e-7
    J = rotation_jacobian(np.zeros(3))
    fd = np.zeros((9, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd[:, k] = (rotation_from_axis_angle(e) - rotation_from_axis_angle(-e)).flatten(order="F") / (2 * eps)
    assert np.abs(J - fd).max() < 1e-9


def test_rotation_jacobian_composed_with_left_jacobian():
    # d vec(R)/d theta = rotation_jacobian(theta) @ so3_left_jacobian(theta).
    rng = np.random.default_rng(11)
    for _ in range(50):
        theta = random_axis_angle(rng, 2.0)
        J = rotation_jacobian(theta) @ so3_left_jacobian(theta)
        fd = np.zeros((9, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-7
            fd[:, k] = (rotation_from_axis_angle(theta + e)
                        - rotation_from_axis_angle(theta - e)).flatten(order="F") / 2e-7
        assert np.abs(J - fd).max() < 1e-8


def test_transform_jacobian_contraction():
    # transform_jacobian(X) @ rotation_jacobian(theta) == -[R X]_x exactly.
    rng = np.random.default_rng(12)
    for _ in range(50):
        theta = random_axis_angle(rng, np.pi)
        X = rng.normal(size=3)
        R = rotation_from_axis_angle(theta)
        lhs = transform_jacobian(X) @ rotation_jacobian(theta)
        assert np.abs(lhs - (-skew(R @ X))).max() < 1e-14
    # And the kron layout itself.
    T = transform_jacobian(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(T, np.kron(np.array([1.0, 2.0, 3.0]), np.eye(3)))


def test_pose_projection_jacobian_finite_difference():
    # Full chain vs central differences, poses up to |theta| = 2 rad.
    rng = np.random.default_rng(13)
    checked = 0
    while checked < 100:
        theta = random_axis_angle(rng, 2.0)
        x = rng.uniform(0, INTR.width - 1)
        y = rng.uniform(0, INTR.height - 1)
        R = rotation_from_axis_angle(theta)
        Xr = R @ backproject(x, y, INTR)
        if np.hypot(Xr[0], Xr[2]) < np.sin(np.radians(10.0)) * np.linalg.norm(Xr):
            continue
        J = pose_projection_jacobian(x, y, theta, INTR, GEOM)
        fd = np.zeros((2, 3))
        seam = False
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-5
            d = project(x, y, theta + e, INTR, GEOM) - project(x, y, theta - e, INTR, GEOM)
            if abs(d[0]) > GEOM.p_x:
                seam = True
            fd[:, k] = d / 2e-5
        if seam:
            continue
        assert np.abs(J - fd).max() / max(1.0, np.abs(J).max()) < 1e-4
        checked += 1
