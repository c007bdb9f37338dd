import csv

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sahmr import autodiff as ad
from sahmr import saopt
from sahmr.errors import ConfigError, Diverged, MaxIterations
from sahmr.metrics import pen_e
from sahmr.synth import SCENARIOS, gen_frame


def problem(fr, body, **cfg):
    config = saopt.SAOptConfig(**cfg)
    return saopt.SAOptProblem.build(fr.body_camera(), fr.root_gt.xyz, fr.camera, fr.scene, fr.scene.points,
                                    fr.scene_labels.categories, fr.joints2d(body), body, config)


def perturbed(fr, seed, dist=0.3):
    d = np.random.default_rng(seed).normal(size=3)
    return saopt.SAOptState.from_root(fr.root_gt.xyz + dist * d / np.linalg.norm(d))


def test_config_validation():
    with pytest.raises(ConfigError):
        saopt.SAOptConfig(w_pen=-1)
    with pytest.raises(ConfigError):
        saopt.SAOptConfig(max_iters=0)
    with pytest.raises(ConfigError):
        saopt.SAOptConfig(variables="rotation")
    assert saopt.SAOptConfig().weights == dict(reproj=1.0, pen=10.0, contact=10.0, ordinal=1.0)


def test_state_vector_round_trip():
    for variables in saopt.VARIABLE_SETS:
        cfg = saopt.SAOptConfig(variables=variables)
        st = saopt.SAOptState.from_root(np.array([0.2, -0.1, 2.5]))
        back = saopt.SAOptState.from_vector(st.vector(cfg), cfg)
        np.testing.assert_allclose(back.root, [0.2, -0.1, 2.5], atol=1e-12)


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_ground_truth_is_a_global_minimum(frames, body, scenario):
    fr = frames[scenario]
    E, parts = saopt.energy(saopt.SAOptState.from_root(fr.root_gt.xyz), problem(fr, body))
    assert E < 1e-6
    assert set(parts) == set(saopt.TERMS)


def test_depth_shift_increases_reprojection(frames, body):
    fr = frames["sit_box"]
    prob = problem(fr, body)
    _, gt = saopt.energy(saopt.SAOptState.from_root(fr.root_gt.xyz), prob)
    _, far = saopt.energy(saopt.SAOptState.from_root(fr.root_gt.xyz + [0, 0, 0.1]), prob)
    assert far["reproj"] > gt["reproj"]


def test_reprojection_only_weights(frames, body):
    fr = frames["lean_wall"]
    prob = problem(fr, body, w_pen=0, w_contact=0, w_ordinal=0)
    E, parts = saopt.energy(perturbed(fr, 0), prob)
    assert E == pytest.approx(parts["reproj"])
    full, _ = saopt.energy(perturbed(fr, 0), problem(fr, body, w_pen=0, w_contact=0, w_ordinal=0, w_reproj=2))
    assert full == pytest.approx(2 * E)


def test_fit_at_optimum_stops_immediately(frames, body):
    fr = frames["stand_floor"]
    res = saopt.fit(problem(fr, body), saopt.SAOptState.from_root(fr.root_gt.xyz))
    assert res.iterations <= 1 and res.converged


@pytest.mark.parametrize("scenario", SCENARIOS)
def test_recovers_translation(frames, body, scenario):
    fr = frames[scenario]
    res = saopt.fit(problem(fr, body), perturbed(fr, 1))
    assert np.linalg.norm(res.state.root - fr.root_gt.xyz) < 0.01
    assert saopt.trace_monotone(res.trace) and res.converged


def test_contradictory_contacts_stay_monotone(frames, body):
    fr = frames["lean_wall"]
    cfg = saopt.SAOptConfig()
    pts = fr.scene.points.copy()
    lab = fr.scene_labels.categories
    pts[lab > 0] += fr.camera.optical_axis * 0.3  # behind the wall, against the image evidence
    prob = saopt.SAOptProblem.build(fr.body_camera(), fr.root_gt.xyz, fr.camera, fr.scene, pts, lab,
                                    fr.joints2d(body), body, cfg)
    res = saopt.fit(prob, perturbed(fr, 2))
    assert saopt.trace_monotone(res.trace)
    assert res.converged


def test_pose_variables_fit(frames, body):
    fr = frames["sit_box"]
    res = saopt.fit(problem(fr, body, variables="translation+scale+pose"), perturbed(fr, 3, 0.1))
    assert saopt.trace_monotone(res.trace)
    assert res.trace[-1]["total"] < res.trace[0]["total"]


def test_heavy_penetration_weight_never_worsens_pen_e(body):
    for i, scenario in enumerate(SCENARIOS * 2):
        fr = gen_frame(300 + i, scenario, body)
        prob = problem(fr, body, w_pen=1e4)
        init = perturbed(fr, i, 0.15)
        start = saopt.energy_tensor(prob, ad.as_tensor(init.vector(prob.config)))[2].data
        res = saopt.fit(prob, init)
        # the smoothed penalty is quadratic at the surface, so sub-micron
        # grazing contact can survive even a huge weight
        assert pen_e(res.vertices, prob.scene) <= pen_e(start, prob.scene) + 1e-5


def test_rigid_equivariance(frames, body):
    fr = frames["sit_box"]
    R = Rotation.from_rotvec([0.3, -1.2, 0.4]).as_matrix()
    t = np.array([2.0, -3.0, 0.7])
    cam2 = fr.camera.rigid(R, t)
    scene2 = fr.scene.transformed(R, t)
    lab = fr.scene_labels.categories
    args = (fr.body_camera(), fr.root_gt.xyz + [0.1, -0.05, 0.2])
    a = saopt.fit_mesh(*args, fr.camera, fr.scene, fr.scene.points, lab, fr.joints2d(body), body)
    b = saopt.fit_mesh(*args, cam2, scene2, scene2.points, lab, fr.joints2d(body), body)
    assert len(a.trace) == len(b.trace)
    for ra, rb in zip(a.trace, b.trace):
        assert ra["total"] == pytest.approx(rb["total"], abs=1e-9)
    np.testing.assert_allclose(a.vertices_scene(fr.camera) @ R.T + t, b.vertices_scene(cam2), atol=1e-9)


def test_max_iterations_flag_and_strict(frames, body):
    fr = frames["lie_plane"]
    prob = problem(fr, body, max_iters=1)
    res = saopt.fit(prob, perturbed(fr, 4))
    assert "max-iterations" in res.flags and not res.converged
    with pytest.raises(MaxIterations):
        saopt.fit(prob, perturbed(fr, 4), strict=True)


def test_non_finite_start_diverges(frames, body):
    fr = frames["sit_box"]
    j = fr.joints2d(body)
    j[0, 0] = np.inf
    prob = saopt.SAOptProblem.build(fr.body_camera(), fr.root_gt.xyz, fr.camera, fr.scene, fr.scene.points,
                                    fr.scene_labels.categories, j, body)
    with pytest.raises(Diverged):
        saopt.fit(prob)


def test_fit_is_deterministic(frames, body):
    fr = frames["stand_floor"]
    a = saopt.fit(problem(fr, body), perturbed(fr, 5))
    b = saopt.fit(problem(fr, body), perturbed(fr, 5))
    assert a.trace == b.trace


def test_write_trace(tmp_path, frames, body):
    fr = frames["stand_floor"]
    res = saopt.fit(problem(fr, body), perturbed(fr, 6))
    saopt.write_trace(tmp_path / "trace.csv", res.trace)
    rows = list(csv.DictReader((tmp_path / "trace.csv").open()))
    assert list(rows[0]) == ["iteration", "total", *saopt.TERMS, "step"]
    assert len(rows) == len(res.trace)


def test_kink_margin_is_positive_off_kinks(frames, body):
    fr = frames["sit_box"]
    prob = problem(fr, body)
    assert saopt.kink_margin(prob, perturbed(fr, 7).vector(prob.config)) >= 0
