import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sahmr.errors import ConfigError, EmptyScene
from sahmr.scene import SceneModel, box_sdf, ray_scene_depth, roi_select, signed_distance, voxelize
from sahmr.synth import box_mesh, quad_mesh


def _segment_dist(p, a, b):
    ab = b - a
    s = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + s * ab))


def oracle_unsigned(p, V, F):
    """Brute force: interior projection via least squares, else the three edges."""
    best = np.inf
    for tri in F:
        a, b, c = V[tri]
        E = np.stack([b - a, c - a], axis=1)
        (s, t), *_ = np.linalg.lstsq(E, p - a, rcond=None)
        if s >= 0 and t >= 0 and s + t <= 1:
            d = np.linalg.norm(p - (a + E @ [s, t]))
        else:
            d = min(_segment_dist(p, a, b), _segment_dist(p, b, c), _segment_dist(p, c, a))
        best = min(best, d)
    return best


def plane():
    V, F = quad_mesh([-5, -5, 0], [10, 0, 0], [0, 10, 0])
    return SceneModel(V, F, V)


def unit_cube():
    V, F = box_mesh([0, 0, 0], [1, 1, 1])
    return SceneModel(V, F, V)


def random_boxes(rng, n=3):
    Vs, Fs, boxes, off = [], [], [], 0
    for _ in range(n):
        lo = rng.uniform(-1, 1, 3)
        hi = lo + rng.uniform(0.2, 0.8, 3)
        V, F = box_mesh(lo, hi)
        Vs.append(V)
        Fs.append(F + off)
        off += len(V)
        boxes.append((lo, hi))
    V = np.concatenate(Vs)
    return SceneModel(V, np.concatenate(Fs), V), boxes


def test_plane_sdf_above_and_below():
    s = plane()
    assert signed_distance(s, [0, 0, 0.3]) == pytest.approx(0.3)
    assert signed_distance(s, [0, 0, -0.2]) == pytest.approx(-0.2)


def test_cube_center_is_minus_half():
    assert signed_distance(unit_cube(), [0.5, 0.5, 0.5]) == pytest.approx(-0.5, abs=1e-12)


def test_empty_scene_raises():
    with pytest.raises(EmptyScene):
        signed_distance(SceneModel(np.zeros((0, 3)), np.zeros((0, 3))), [0, 0, 0])


def test_scene_validation():
    V, F = box_mesh([0, 0, 0], [1, 1, 1])
    with pytest.raises(ConfigError):
        SceneModel(V, F + 10)
    with pytest.raises(ConfigError):  # zero-area triangle
        SceneModel(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), [[0, 1, 2]])
    flipped = F.copy()
    flipped[0] = flipped[0, ::-1]
    with pytest.raises(ConfigError):
        SceneModel(V, flipped)


def test_sdf_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(4):
        scene, boxes = random_boxes(rng)
        q = rng.uniform(-1.5, 2.0, (250, 3))
        sd = signed_distance(scene, q)
        want = np.array([oracle_unsigned(p, scene.vertices, scene.triangles) for p in q])
        closed = np.min([box_sdf(q, lo, hi) for lo, hi in boxes], axis=0)
        outside = closed > 0
        np.testing.assert_allclose(np.abs(sd[outside]), want[outside], atol=1e-9)
        np.testing.assert_allclose(sd, closed, atol=1e-9)


def test_sdf_gradient_is_unit_and_matches_differences():
    scene, _ = random_boxes(np.random.default_rng(8), 2)
    q = np.random.default_rng(9).uniform(-1.5, 2.0, (50, 3))
    sd, g = signed_distance(scene, q, return_gradient=True)
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-9)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd = (signed_distance(scene, q + e) - signed_distance(scene, q - e)) / (2 * eps)
        ok = np.abs(fd - g[:, k]) < 1e-4
        assert ok.mean() > 0.9  # a few probes sit on medial-axis kinks


@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_abs_sdf_is_one_lipschitz(c):
    scene = unit_cube()
    p, q = np.array(c[:3]), np.array(c[3:])
    assert abs(abs(scene.signed_distance(p)) - abs(scene.signed_distance(q))) <= np.linalg.norm(p - q) + 1e-9


def test_transformed_scene_preserves_distances():
    from scipy.spatial.transform import Rotation

    scene = unit_cube()
    R = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    t = np.array([0.4, 1.0, -2.0])
    q = np.random.default_rng(0).uniform(-1, 2, (40, 3))
    np.testing.assert_allclose(scene.transformed(R, t).signed_distance(q @ R.T + t),
                               scene.signed_distance(q), atol=1e-12)


def test_ray_depth_hits_plane():
    t, tri = ray_scene_depth(plane(), [0.1, 0.2, 2.0], [0, 0, -1])
    assert t == pytest.approx(2.0) and tri >= 0
    assert ray_scene_depth(plane(), [0.1, 0.2, 2.0], [0, 0, 1]) == (np.inf, -1)


def test_voxelize_single_point():
    g = voxelize([[0.12, 0.3, -0.4]], 0.05)
    assert len(g) == 1 and g.point_voxel.tolist() == [0]


def test_voxelize_two_points_same_cell():
    g = voxelize([[0.005, 0.01, 0.01], [0.045, 0.01, 0.01]], 0.05, origin=np.zeros(3))
    assert len(g) == 1 and len(g.members[0]) == 2


def test_voxelize_straddling_boundary():
    g = voxelize([[0.049, 0.01, 0.01], [0.051, 0.01, 0.01]], 0.05, origin=np.zeros(3))
    assert g.indices.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert g.point_voxel.tolist() == [0, 1]


def test_voxel_centers_and_order():
    pts = np.random.default_rng(2).uniform(-1, 1, (300, 3))
    g = voxelize(pts, 0.1)
    np.testing.assert_allclose(g.centers, g.origin + (g.indices + 0.5) * 0.1)
    keys = [tuple(i) for i in g.indices]
    assert keys == sorted(keys)
    np.testing.assert_array_equal(np.floor((pts - g.origin) / 0.1).astype(int), g.indices[g.point_voxel])


@given(st.integers(1, 200), st.floats(0.01, 0.5), st.integers(0, 10_000))
def test_voxelize_partitions_points(n, size, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    g = voxelize(pts, size)
    members = g.members
    assert sorted(np.concatenate(members).tolist()) == list(range(n))
    back = np.concatenate([pts[m] for m in members])
    assert sorted(map(tuple, back)) == sorted(map(tuple, pts))


def test_voxelize_rejects_bad_size():
    with pytest.raises(ConfigError):
        voxelize(np.zeros((2, 3)), 0.0)


def test_roi_far_points_empty():
    pts = np.array([[5.0, 0, 0], [0, -6.0, 0]])
    assert roi_select(pts, np.zeros(3), 1.25, 0.5).size == 0


def test_roi_keeps_point_within_gamma1():
    assert roi_select([[1.2, 0, 0]], np.zeros(3), 1.25, 0.5).tolist() == [0]


def test_roi_extra_anchor_along_axis():
    # 1.5 m along the axis is 1.0 m from the +gamma2 anchor
    assert roi_select([[0, 0, 1.5]], np.zeros(3), 1.25, 0.5).tolist() == [0]
    assert roi_select([[1.5, 0, 0]], np.zeros(3), 1.25, 0.5).size == 0


@given(st.integers(0, 1000), st.floats(0.1, 2.0))
def test_roi_gamma2_zero_is_single_ball(seed, g1):
    pts = np.random.default_rng(seed).uniform(-2, 2, (100, 3))
    want = np.flatnonzero(np.linalg.norm(pts, axis=1) <= g1)
    np.testing.assert_array_equal(roi_select(pts, np.zeros(3), g1, 0.0), want)


def test_roi_rejects_bad_radii():
    with pytest.raises(ConfigError):
        roi_select(np.zeros((1, 3)), np.zeros(3), 0.0, 0.5)
