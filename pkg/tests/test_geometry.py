import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sahmr.errors import ConfigError, InvalidDepth, PointBehindCamera
from sahmr.geometry import (Camera, Root3D, bilinear_sample, cell_to_crop, crop_camera, crop_to_cell,
                            frustum_select, lift_root, look_at, normalized_depth, project)

coords = st.floats(-2, 2, allow_nan=False)


def cam100():
    return Camera(f=100.0, cx=0.0, cy=0.0)


def test_project_principal_axis():
    np.testing.assert_allclose(project(cam100(), [0, 0, 1]), [0, 0, 1])


def test_project_offset_point():
    np.testing.assert_allclose(project(cam100(), [0.5, 0, 1]), [50, 0, 1])


def test_project_zero_depth_raises():
    with pytest.raises(PointBehindCamera):
        project(cam100(), [0.3, 0.1, 0.0])


def test_lift_root_principal_point():
    cam = Camera(500.0, 112.0, 112.0)
    r = lift_root(cam, 112, 112, 2.0 * 224 / 500)
    np.testing.assert_allclose(r.xyz, [0, 0, 2], atol=1e-12)


def test_lift_root_hand_value():
    cam = Camera(500.0, 112.0, 112.0)
    r = lift_root(cam, 162, 112, 0.896)
    np.testing.assert_allclose(r.xyz, [0.2, 0.0, 2.0], atol=1e-12)


def test_lift_root_rejects_nonpositive_depth():
    with pytest.raises(InvalidDepth):
        lift_root(Camera(500.0, 112.0, 112.0), 10, 10, 0.0)


def test_camera_validation():
    with pytest.raises(ConfigError):
        Camera(f=-1.0, cx=0, cy=0)
    with pytest.raises(ConfigError):
        Camera(f=1.0, cx=0, cy=0, R=np.diag([1.0, 1.0, -1.0]))


def test_camera_json_round_trip(tmp_path):
    R = Rotation.from_rotvec([0.1, -0.3, 0.2]).as_matrix()
    cam = Camera(812.5, 101.25, 99.0, R, [0.1, 0.2, 3.0], 224.0)
    cam.save(tmp_path / "cam.json")
    assert Camera.load(tmp_path / "cam.json") == cam
    assert set(cam.to_dict()) == {"f", "cx", "cy", "w", "R", "t"}


def test_frustum_all_behind():
    cam = Camera(100.0, 112.0, 112.0)
    assert len(frustum_select(cam, [[0, 0, -1], [0.2, 0, -3]])) == 0


def test_frustum_center_and_outside():
    cam = Camera(100.0, 112.0, 112.0)
    # u = 100 x / z + 112 = 224 + 5 for x = 1.17, z = 1
    pts = [[0, 0, 1], [1.17, 0, 1]]
    assert project(cam, pts[1])[0] == pytest.approx(229)
    assert frustum_select(cam, pts).tolist() == [0]


def test_frustum_keeps_duplicates():
    cam = Camera(100.0, 112.0, 112.0)
    assert frustum_select(cam, [[0, 0, 1], [0, 0, 1]]).tolist() == [0, 1]


@given(st.permutations(list(range(12))))
def test_frustum_permutation(perm):
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1.5, 1.5, (12, 3)) + [0, 0, 1]
    cam = Camera(100.0, 112.0, 112.0)
    base = set(frustum_select(cam, pts).tolist())
    got = frustum_select(cam, pts[list(perm)])
    assert {perm[i] for i in got} == base
    assert list(got) == sorted(got)


def test_bilinear_integer_and_midpoint():
    m = np.arange(12.0).reshape(3, 4)
    assert bilinear_sample(m, 2, 1)[0] == m[1, 2]
    two = np.array([[0.0, 1.0]])
    assert bilinear_sample(two, 0.5, 0)[0] == pytest.approx(0.5)


def test_bilinear_clamps_to_border():
    m = np.random.default_rng(0).normal(size=(5, 6, 2))
    np.testing.assert_array_equal(bilinear_sample(m, -3, -3), m[0, 0])


@given(st.floats(0, 6.999), st.floats(0, 4.999), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_bilinear_exact_on_bilinear_functions(u, v, c):
    jj, ii = np.meshgrid(np.arange(8.0), np.arange(6.0))
    f = lambda x, y: c[0] + c[1] * x + c[2] * y + c[3] * x * y  # noqa: E731
    assert abs(bilinear_sample(f(jj, ii), u, v)[0] - f(u, v)) < 1e-12


@given(coords, coords, st.floats(0.2, 8), st.floats(100, 2000), st.floats(0, 224), st.floats(0, 224))
def test_project_lift_round_trip(x, y, z, f, cx, cy):
    cam = Camera(f, cx, cy)
    u, v, d = project(cam, [x, y, z])
    r = lift_root(cam, u, v, normalized_depth(cam, d))
    np.testing.assert_allclose(r.xyz, [x, y, z], atol=1e-9)


def test_crop_camera_scales_then_shifts():
    cam = crop_camera(1000.0, 640.0, 480.0, np.eye(3), np.zeros(3), (540.0, 380.0, 448.0))
    p = np.array([0.1, -0.05, 3.0])
    full_u = 1000.0 * p[0] / p[2] + 640.0
    crop_u = project(cam, p)[0]
    # pixel centres map to pixel centres under the (side -> w) resize
    assert crop_u == pytest.approx((full_u - 540.0 + 0.5) * 224 / 448 - 0.5)


def test_cell_crop_inverse():
    idx = np.arange(56)
    np.testing.assert_allclose(crop_to_cell(cell_to_crop(idx, 4), 4), idx)


def test_look_at_faces_target():
    R, t = look_at([3.0, 0.5, 1.5], [0.0, 0.0, 1.0])
    cam = Camera(500.0, 112.0, 112.0, R, t)
    u, v, _ = project(cam, [0.0, 0.0, 1.0])
    assert (u, v) == pytest.approx((112.0, 112.0))
    # scene up (+z) points up in the image (-v)
    assert project(cam, [0.0, 0.0, 1.5])[1] < v


def test_root3d_scene_round_trip():
    R = Rotation.from_rotvec([0.2, 0.1, -0.4]).as_matrix()
    cam = Camera(500.0, 112.0, 112.0, R, [0.3, -0.1, 2.0])
    r = Root3D.from_xyz([0.1, 0.2, 2.5])
    np.testing.assert_allclose(cam.to_camera(r.in_scene(cam)), r.xyz, atol=1e-12)
