import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse
from scipy.spatial.transform import Rotation

from sahmr.body import (N_REGIONS, BodyMesh, BodyModel, ContactLabels, gt_contact_labels, pose_body,
                        regress_joints, rotation)
from sahmr.errors import ConfigError, DimensionMismatch, EmptyRegion


def tiny_body(M):
    """Seven single-vertex regions plus one unlabelled vertex."""
    V = np.arange(24.0).reshape(8, 3)
    regions = np.array([0, 1, 2, 3, 4, 5, 6, -1])
    return BodyModel(V, sparse.csr_matrix(M), regions)


def test_toy_body_shape(body):
    assert body.n_vertices == 432 and body.n_joints == 14
    np.testing.assert_allclose(body.dense_regressor.sum(axis=1), 1.0, atol=1e-9)
    for k in range(N_REGIONS):
        assert len(body.region_vertices(k)) > 0
    height = np.ptp(body.template[:, 2])
    assert 1.6 < height < 1.9


def test_regressor_selector_rows():
    M = np.zeros((3, 8))
    M[[0, 1, 2], [5, 0, 7]] = 1.0
    b = tiny_body(M)
    np.testing.assert_array_equal(regress_joints(b, b.template), b.template[[5, 0, 7]])


def test_regressor_uniform_row_is_centroid():
    M = np.zeros((1, 8))
    M[0, [1, 2, 3, 6]] = 0.25
    b = tiny_body(M)
    np.testing.assert_allclose(regress_joints(b, b.template)[0], b.template[[1, 2, 3, 6]].mean(axis=0))


def test_regressor_matches_dense_product():
    rng = np.random.default_rng(0)
    M = sparse.random(5, 8, density=0.4, random_state=1, format="csr")
    M = M + sparse.csr_matrix(np.eye(5, 8))
    M = sparse.diags(1 / np.asarray(M.sum(axis=1)).ravel()) @ M
    b = tiny_body(M)
    V = rng.normal(size=(8, 3))
    np.testing.assert_allclose(regress_joints(b, BodyMesh(V, "scene")), M.toarray() @ V, atol=1e-12)


def test_regressor_dimension_mismatch(body):
    with pytest.raises(DimensionMismatch):
        regress_joints(body, np.zeros((10, 3)))


def test_body_validation():
    M = np.full((1, 8), 1 / 8)
    with pytest.raises(ConfigError):
        tiny_body(M * 2)
    with pytest.raises(EmptyRegion):
        BodyModel(np.zeros((8, 3)), sparse.csr_matrix(M), np.array([0, 1, 2, 3, 4, 5, 5, -1]))
    with pytest.raises(ConfigError):
        BodyMesh(np.zeros((2, 3)), "world")
    with pytest.raises(ConfigError):
        ContactLabels([0, 1], n_categories=7)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_regress_joints_linear(a, b_, seed):
    from sahmr.synth import default_body

    body = default_body()
    rng = np.random.default_rng(seed)
    V1, V2 = rng.normal(size=(2, body.n_vertices, 3))
    np.testing.assert_allclose(regress_joints(body, a * V1 + b_ * V2),
                               a * regress_joints(body, V1) + b_ * regress_joints(body, V2), atol=1e-9)


def test_contact_within_threshold():
    b = tiny_body(np.full((1, 8), 1 / 8))
    p = b.template[2] + [0.05, 0, 0]
    assert gt_contact_labels(b.template, b, [p], 0.07).categories.tolist() == [3]  # region 2 -> category 3


def test_contact_far_is_none():
    b = tiny_body(np.full((1, 8), 1 / 8))
    p = b.template[0] - [0.1, 0.0, 0.0]
    assert gt_contact_labels(b.template, b, [p], 0.07).categories.tolist() == [0]


def test_contact_tie_prefers_smaller_region():
    V = np.array([[0.0, 0, 0], [0.1, 0, 0]] + [[5.0 + i, 5, 5] for i in range(6)])
    regions = np.array([4, 1, 0, 2, 3, 5, 6, -1])
    b = BodyModel(V, sparse.csr_matrix(np.full((1, 8), 1 / 8)), regions)
    assert gt_contact_labels(V, b, [[0.05, 0, 0]], 0.07).categories.tolist() == [2]  # region 1


def test_contact_rejects_bad_threshold(body):
    with pytest.raises(ConfigError):
        gt_contact_labels(body.template, body, np.zeros((1, 3)), 0.0)


def test_contact_rigid_invariance(frames, body):
    fr = frames["sit_box"]
    R = Rotation.from_rotvec([0.4, -0.7, 1.1]).as_matrix()
    t = np.array([3.0, -1.0, 0.5])
    a = gt_contact_labels(fr.body_gt, body, fr.scene.points)
    b = gt_contact_labels(fr.body_gt @ R.T + t, body, fr.scene.points @ R.T + t)
    np.testing.assert_array_equal(a.categories, b.categories)


@given(st.floats(0.01, 0.2), st.floats(0.01, 0.2))
def test_contact_threshold_monotone(t1, t2):
    from sahmr.synth import default_body

    body = default_body()
    fr = _lie(body)
    lo, hi = sorted((t1, t2))
    small = gt_contact_labels(fr.body_gt, body, fr.scene.points, lo).is_contact
    big = gt_contact_labels(fr.body_gt, body, fr.scene.points, hi).is_contact
    assert not np.any(small & ~big)


_cache = {}


def _lie(body):
    from sahmr.synth import gen_frame

    if "lie" not in _cache:
        _cache["lie"] = gen_frame(3, "lie_plane", body)
    return _cache["lie"]


def test_pose_identity_is_template(body):
    np.testing.assert_allclose(pose_body(body, {}), body.template, atol=1e-12)


def test_pose_keeps_parts_rigid(body):
    rots = {"elbow_L": rotation([1, 0, 0], 70), "knee_R": rotation([1, 0, 0], -80), "pelvis": rotation([0, 0, 1], 30)}
    V = pose_body(body, rots, scale=1.1)
    for pid in range(len(body.part_names)):
        m = body.part_of_vertex == pid
        a, b = 1.1 * body.template[m], V[m]
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        np.testing.assert_allclose(da, db, atol=1e-9)


def test_regions_json_round_trip(body, tmp_path):
    body.save_regions(tmp_path / "regions.json")
    np.testing.assert_array_equal(BodyModel.load_regions(tmp_path / "regions.json", body.n_vertices),
                                  body.region_of_vertex)


def test_from_files(body, tmp_path):
    from sahmr.meshio import write_obj

    write_obj(tmp_path / "t.obj", body.template, body.faces)
    body.save_regions(tmp_path / "r.json")
    np.save(tmp_path / "m.npy", body.dense_regressor)
    b = BodyModel.from_files(tmp_path / "t.obj", tmp_path / "r.json", tmp_path / "m.npy")
    np.testing.assert_allclose(b.template, body.template, atol=1e-8)
    np.testing.assert_array_equal(b.faces, body.faces)
    assert b.n_joints == 14
