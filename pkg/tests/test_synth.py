import dataclasses
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sahmr.body import gt_contact_labels, regress_joints
from sahmr.errors import MissingInputError, RootOutsideFrustum, UnknownScenario
from sahmr.geometry import Root3D, crop_to_cell
from sahmr.metrics import conf_e, pen_e
from sahmr.root_contact import initial_root_from_maps
from sahmr.synth import (SCENARIOS, gen_frame, load_dataset, primitive_sdf, render_root_maps, scenario_for,
                         write_dataset)


def categories(fr):
    return set(np.unique(fr.scene_labels.categories[fr.scene_labels.is_contact]).tolist())


def test_stand_floor_touches_with_feet_only(frames):
    assert categories(frames["stand_floor"]) <= {5, 6}
    assert categories(frames["stand_floor"])


def test_sit_box_regions(frames):
    cats = categories(frames["sit_box"])
    assert {2, 7} <= cats  # gluteus and thighs on the box
    assert {5, 6} & cats  # feet on the floor


def test_same_seed_same_frame(body):
    a, b = gen_frame(42, "lean_wall", body), gen_frame(42, "lean_wall", body)
    np.testing.assert_array_equal(a.body_gt, b.body_gt)
    np.testing.assert_array_equal(a.scene.points, b.scene.points)
    np.testing.assert_array_equal(a.maps.heatmap, b.maps.heatmap)
    assert a.camera == b.camera


def test_unknown_scenario():
    with pytest.raises(UnknownScenario):
        gen_frame(0, "fly")


@settings(max_examples=12)
@given(st.integers(0, 10**6), st.sampled_from(SCENARIOS))
def test_generated_frames_are_consistent(seed, scenario):
    from sahmr.synth import default_body

    body = default_body()
    fr = gen_frame(seed, scenario, body)
    again = gt_contact_labels(fr.body_gt, body, fr.scene.points)
    np.testing.assert_array_equal(again.categories, fr.scene_labels.categories)
    assert pen_e(fr.body_gt, fr.scene) < 1e-3
    assert conf_e(fr.body_gt, fr.scene, fr.vertex_contact) < 0.05 * max(int(fr.vertex_contact.sum()), 1)
    np.testing.assert_allclose(fr.root_gt.xyz, fr.camera.to_camera(regress_joints(body, fr.body_gt)[0]), atol=1e-12)
    assert fr.scene_labels.is_contact.any()
    # mesh SDF agrees with the closed-form union of primitives near the body
    q = fr.body_gt[::20]
    np.testing.assert_allclose(fr.scene.signed_distance(q), primitive_sdf(fr.primitives, q), atol=1e-9)


def test_heatmap_argmax_is_projected_cell(frames):
    for fr in frames.values():
        u, v, _ = fr.camera.f * fr.root_gt.xyz / fr.root_gt.Z + [fr.camera.cx, fr.camera.cy, 0]
        row, col = np.unravel_index(np.argmax(fr.maps.heatmap), fr.maps.heatmap.shape)
        assert (row, col) == (round(float(crop_to_cell(v, 4))), round(float(crop_to_cell(u, 4))))


def test_lift_from_rendered_maps_within_quantization(frames):
    for fr in frames.values():
        r = initial_root_from_maps(fr.maps, fr.camera)
        # half a cell diagonal in crop pixels, back-projected at the root depth
        bound = 4 * np.sqrt(2) / 2 * fr.root_gt.Z / fr.camera.f + 1e-9
        assert np.linalg.norm(r.xyz[:2] - fr.root_gt.xyz[:2]) <= bound
        assert abs(r.Z - fr.root_gt.Z) < 1e-9


def test_zero_sigma_is_one_hot(frames):
    maps = render_root_maps(frames["sit_box"], sigma=0)
    assert maps.heatmap.sum() == 1.0 and maps.heatmap.max() == 1.0
    assert np.count_nonzero(maps.depthmap) == 1


def test_root_outside_frustum(frames):
    fr = frames["sit_box"]
    off = dataclasses.replace(fr, root_gt=Root3D.from_xyz(fr.root_gt.xyz + [50.0, 0, 0]))
    with pytest.raises(RootOutsideFrustum):
        render_root_maps(off)
    behind = dataclasses.replace(fr, root_gt=Root3D.from_xyz([0.0, 0.0, -1.0]))
    with pytest.raises(RootOutsideFrustum):
        render_root_maps(behind)


def test_scenarios_cycle():
    assert [scenario_for(i) for i in range(5)] == list(SCENARIOS) + [SCENARIOS[0]]


def test_dataset_round_trip(tmp_path, frames, body):
    fl = [frames["sit_box"], frames["lean_wall"]]
    write_dataset(fl, tmp_path / "ds", body, seed=7)
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and [f["id"] for f in manifest["frames"]] == [f.frame_id for f in fl]
    d = tmp_path / "ds" / fl[0].frame_id
    assert {p.name for p in d.iterdir()} >= {"scene.ply", "body_gt.obj", "camera.json", "labels.json", "maps.bin"}
    raw = (d / "maps.bin").read_bytes()
    assert raw[:6] == b"SAHMRM" and struct.unpack_from("<III", raw, 6) == (56, 56, 11)
    back = load_dataset(tmp_path / "ds")
    for a, b in zip(fl, back):
        np.testing.assert_allclose(b.body_gt, a.body_gt, atol=1e-8)
        np.testing.assert_array_equal(b.scene.points, a.scene.points)
        np.testing.assert_array_equal(b.scene_labels.categories, a.scene_labels.categories)
        np.testing.assert_allclose(b.maps.heatmap, a.maps.heatmap, atol=1e-6)
        assert b.camera == a.camera


def test_missing_inputs(tmp_path):
    with pytest.raises(MissingInputError):
        load_dataset(tmp_path)
