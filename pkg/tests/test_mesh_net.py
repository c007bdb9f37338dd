import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sahmr import autodiff as ad
from sahmr.body import N_REGIONS
from sahmr.errors import ConfigError, NonFiniteLoss
from sahmr.mesh_net import (MeshNet, MeshNetConfig, MeshSample, farthest_point_order, make_mesh_sample,
                            mesh_loss, pool_region_tokens, train_mesh_net, train_step)
from sahmr.nn import SGD
from sahmr.root_contact import OracleStage1


@pytest.fixture(scope="module")
def net(body):
    return MeshNet(body, seed=3)


@pytest.fixture(scope="module")
def sample(body, frames):
    fr = frames["sit_box"]
    return make_mesh_sample(fr, OracleStage1(body).run(fr))


def test_config_validation():
    with pytest.raises(ConfigError):
        MeshNetConfig(dims=())
    with pytest.raises(ConfigError):
        MeshNetConfig(dims=(16, 32))
    MeshNetConfig(dims=(32, 32, 16))


def test_pool_constant_tokens(body):
    t = np.random.default_rng(0).normal(size=5)
    pooled = pool_region_tokens(np.tile(t, (body.n_vertices, 1)), body)
    np.testing.assert_allclose(pooled, np.tile(t, (N_REGIONS, 1)), atol=1e-12)


def test_pool_matches_region_means(body):
    T = np.random.default_rng(1).normal(size=(body.n_vertices, 6))
    pooled = pool_region_tokens(T, body)
    for k in range(N_REGIONS):
        ids = body.region_vertices(k)
        np.testing.assert_allclose(pooled[k], T[ids].mean(axis=0), atol=1e-12)
    # a two-member region averages its pair
    a, b = T[:2]
    np.testing.assert_allclose((a + b) / 2, T[:2].mean(axis=0))


def test_pool_accepts_tensors(body):
    T = np.random.default_rng(2).normal(size=(2, body.n_vertices, 4))
    np.testing.assert_allclose(pool_region_tokens(ad.as_tensor(T), body).data, pool_region_tokens(T, body))


def test_zero_contacts_equals_trunk_bitwise(net, sample):
    out = net.forward(sample.feature)
    assert "no-contact-points" in out.flags
    np.testing.assert_array_equal(out.vertices, net.forward_trunk(sample.feature))
    empty = net.forward(sample.feature, np.zeros((0, 3)), np.zeros(0, int))
    np.testing.assert_array_equal(empty.vertices, out.vertices)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_body_output_invariant_to_point_order(net, sample, seed):
    p = np.random.default_rng(seed).permutation(len(sample.points))
    a = net.forward(sample.feature, sample.points, sample.categories)
    b = net.forward(sample.feature, sample.points[p], sample.categories[p])
    assert np.abs(a.vertices - b.vertices).max() <= 1e-12
    np.testing.assert_allclose(a.scene_points[p], b.scene_points, atol=1e-12)


def test_regressor_is_shared(body, sample):
    net = MeshNet(body, seed=4)
    a = net.forward(sample.feature, sample.points, sample.categories)
    net.regressor.b.data = net.regressor.b.data + np.array([1.0, 0.0, 0.0])
    b = net.forward(sample.feature, sample.points, sample.categories)
    np.testing.assert_allclose(b.vertices - a.vertices, np.tile([1.0, 0, 0], (body.n_vertices, 1)), atol=1e-12)
    np.testing.assert_allclose(b.scene_points - a.scene_points, np.tile([1.0, 0, 0], (len(a.scene_points), 1)),
                               atol=1e-12)
    assert sum(p is net.regressor.W for p in net.parameters()) == 1


def test_root_centred_inputs_ignore_the_root(frames, body, net):
    fr = frames["lie_plane"]
    s1 = OracleStage1(body).run(fr)
    a = make_mesh_sample(fr, s1)
    shifted = OracleStage1(body).run(fr)
    shift = np.array([0.2, -0.1, 0.3])
    shifted.root_refined = type(s1.root_refined).from_xyz(s1.root_refined.xyz + shift)
    shifted.contact_points = fr.camera.to_scene(fr.camera.to_camera(s1.contact_points) + shift)
    b = make_mesh_sample(fr, shifted)
    np.testing.assert_allclose(a.points, b.points, atol=1e-12)
    va = net.forward(a.feature, a.points, a.categories).vertices
    vb = net.forward(b.feature, b.points, b.categories).vertices
    np.testing.assert_allclose(va, vb, atol=1e-9)


def test_point_cap_subsamples_deterministically(body, sample):
    net = MeshNet(body, MeshNetConfig(point_cap=64), seed=0)
    a = net.forward(sample.feature, sample.points, sample.categories)
    b = net.forward(sample.feature, sample.points, sample.categories)
    assert "subsampled" in a.flags and len(a.used_points) == 64
    np.testing.assert_array_equal(a.vertices, b.vertices)


def test_farthest_point_order_set_is_order_free():
    pts = np.random.default_rng(5).normal(size=(80, 3))
    p = np.random.default_rng(6).permutation(80)
    a = set(map(tuple, pts[farthest_point_order(pts, 20)]))
    b = set(map(tuple, pts[p][farthest_point_order(pts[p], 20)]))
    assert a == b and len(a) == 20
    np.testing.assert_array_equal(farthest_point_order(pts, 200), np.arange(80))


def test_zero_learning_rate_keeps_params(body, sample):
    net = MeshNet(body, seed=1)
    before = net.state_dict()
    train_step(net, SGD(net.parameters(), lr=0.0), [sample], body)
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_deterministic(body, sample):
    h1 = train_mesh_net([sample], body, steps=3, seed=2)[1]
    h2 = train_mesh_net([sample], body, steps=3, seed=2)[1]
    assert h1 == h2


def test_loss_gradient_on_frozen_batch(body, sample):
    net = MeshNet(body, MeshNetConfig(dims=(16, 8)), seed=0)
    small = MeshSample(sample.feature, sample.root, sample.points[:20], sample.categories[:20], sample.gt_verts)
    blk = net.blocks[-1]
    params = [net.regressor.W, net.regressor.b, blk.cross.q.W, blk.s_proj.b, net.blocks[0].ln_self.gamma]
    assert ad.gradcheck(lambda: mesh_loss(net, [small], body)[0], params, 1e-5) < 1e-4


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_loss_raises(body, sample):
    net = MeshNet(body, seed=0)
    bad = MeshSample(sample.feature, sample.root, sample.points, sample.categories,
                     np.full_like(sample.gt_verts, 1e308))
    with pytest.raises(NonFiniteLoss):
        train_step(net, SGD(net.parameters(), lr=0.1), [bad], body)


def test_single_frame_overfit(body, sample):
    net, hist = train_mesh_net([sample], body, steps=500, lr=0.15, seed=0)
    totals = [h["total"] for h in hist]
    assert totals[-1] < 0.1 * totals[0]
    # smoothed loss decreases over the run
    window = np.convolve(totals, np.ones(50) / 50, mode="valid")
    assert window[-1] < window[0] and np.mean(np.diff(window) <= 1e-9) > 0.8
    out = net.forward(sample.feature, sample.points, sample.categories)
    err = np.linalg.norm(out.vertices + sample.root - sample.gt_verts, axis=1).mean()
    assert err < 0.02
