"""Synthetic scenes, posed toy bodies, cameras and rendered inputs.

Scenes are built from axis-aligned boxes and planes so every signed
distance has a closed form to cross-check against. Each scenario poses the
body by rigid part placement and builds the supporting geometry around it,
so designated regions touch the scene without penetrating it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .body import (BodyModel, ContactLabels, build_toy_body, gt_contact_labels, pose_body,
                   regress_joints, rotation, vertex_contacts)
from .errors import ConfigError, MissingInputError, RootOutsideFrustum, UnknownScenario
from .geometry import (Camera, Root3D, crop_camera, crop_to_cell, look_at, normalized_depth,
                       project_camera_frame, square_bbox)
from .meshio import read_obj, read_ply, write_obj, write_ply
from .scene import SceneModel, box_sdf

SCENARIOS = ("sit_box", "lie_plane", "stand_floor", "lean_wall")
CROP = 224
STRIDE = 4
MAP_RES = CROP // STRIDE
FEATURE_GRID = 14
POINT_SPACING = 0.03
MAPS_MAGIC = b"SAHMRM"


@dataclass
class RootMaps:
    heatmap: np.ndarray
    depthmap: np.ndarray

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        self.depthmap = np.asarray(self.depthmap, dtype=np.float64)
        if self.heatmap.shape != self.depthmap.shape or self.heatmap.ndim != 2:
            raise ConfigError("heatmap and depth map must be equal-sized 2-D arrays")
        if np.any(self.heatmap < 0):
            raise ConfigError("heatmap must be nonnegative")


@dataclass(eq=False)
class SynthFrame:
    frame_id: str
    seed: int
    scenario: str
    scene: SceneModel
    primitives: list  # ("box", lo, hi) | ("plane", z or axis info)
    body_gt: np.ndarray  # scene-frame vertices
    camera: Camera
    root_gt: Root3D
    scene_labels: ContactLabels
    vertex_contact: np.ndarray
    body_scale: float
    maps: RootMaps = None
    feature_map: np.ndarray = None  # (56, 56, 8) silhouette + region masks
    intensity: np.ndarray = None  # (56, 56) shaded part image
    extras: dict = field(default_factory=dict)

    @property
    def image_feature(self) -> np.ndarray:
        return image_feature(self.intensity)

    @property
    def root_scene(self):
        return self.camera.to_scene(self.root_gt.xyz)

    def body_camera(self):
        return self.camera.to_camera(self.body_gt)

    def joints2d(self, body: BodyModel):
        J = regress_joints(body, self.body_camera())
        return project_camera_frame(self.camera, J)


# -- scene primitives -----------------------------------------------------

def box_mesh(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    V = np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])
    # outward-facing, counter-clockwise seen from outside
    F = np.array([
        [0, 2, 1], [1, 2, 3],  # bottom (-z)
        [4, 5, 6], [5, 7, 6],  # top (+z)
        [0, 1, 4], [1, 5, 4],  # -y
        [2, 6, 3], [3, 6, 7],  # +y
        [0, 4, 2], [2, 4, 6],  # -x
        [1, 3, 5], [3, 7, 5],  # +x
    ])
    return V, F


def quad_mesh(origin, u, v):
    """Single-sided rectangle ``origin + a u + b v`` (a, b in [0, 1]); normal ``u x v``."""
    o, u, v = (np.asarray(a, float) for a in (origin, u, v))
    V = np.array([o, o + u, o + u + v, o + v])
    return V, np.array([[0, 1, 2], [0, 2, 3]])


def _sample_rect(rng, origin, u, v, spacing):
    nu = max(1, int(np.ceil(np.linalg.norm(u) / spacing)))
    nv = max(1, int(np.ceil(np.linalg.norm(v) / spacing)))
    a = (np.arange(nu)[:, None] + rng.uniform(0, 1, (nu, nv))) / nu
    b = (np.arange(nv)[None, :] + rng.uniform(0, 1, (nu, nv))) / nv
    return origin + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v


def _sample_box(rng, lo, hi, spacing):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    ex, ey, ez = np.diag(d)
    faces = [
        (lo + ez, ex, ey),  # top
        (lo, ex, ez), (lo + ey, ex, ez),  # -y, +y
        (lo, ey, ez), (lo + ex, ey, ez),  # -x, +x
    ]
    return np.concatenate([_sample_rect(rng, o, u, v, spacing) for o, u, v in faces])


def primitive_sdf(primitives, p):
    """Closed-form signed distance of the union of primitives (min rule)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.full(p.shape[:-1], np.inf)
    for prim in primitives:
        if prim[0] == "box":
            out = np.minimum(out, box_sdf(p, prim[1], prim[2]))
        elif prim[0] == "floor":
            out = np.minimum(out, p[..., 2] - prim[1])
        elif prim[0] == "wall":
            axis, sign, offset = prim[1], prim[2], prim[3]
            out = np.minimum(out, sign * (p[..., axis] - offset))
    return out


def build_scene(rng, primitives, center, spacing=POINT_SPACING, floor_half=3.5):
    """Mesh and point cloud for a list of primitives around ``center``."""
    verts, faces, pts = [], [], []
    offset = 0
    boxes = [p for p in primitives if p[0] == "box"]

    def add(V, F):
        nonlocal offset
        verts.append(V)
        faces.append(F + offset)
        offset += len(V)

    for prim in primitives:
        if prim[0] == "box":
            add(*box_mesh(prim[1], prim[2]))
            pts.append(_sample_box(rng, prim[1], prim[2], spacing))
        elif prim[0] == "floor":
            z = prim[1]
            o = np.array([center[0] - floor_half, center[1] - floor_half, z])
            u, v = np.array([2 * floor_half, 0, 0]), np.array([0, 2 * floor_half, 0])
            add(*quad_mesh(o, u, v))
            fp = _sample_rect(rng, o, u, v, spacing)
            fp = fp[np.linalg.norm(fp[:, :2] - center[:2], axis=1) <= floor_half]
            for b in boxes:  # floor under a box is hidden
                inside = np.all((fp[:, :2] >= b[1][:2]) & (fp[:, :2] <= b[2][:2]), axis=1)
                fp = fp[~inside]
            pts.append(fp)
        elif prim[0] == "wall":
            axis, sign, off = prim[1], prim[2], prim[3]
            other = 1 - axis
            o = np.zeros(3)
            o[axis] = off
            o[other] = center[other] - floor_half
            u = np.zeros(3)
            u[other] = 2 * floor_half
            v = np.array([0.0, 0.0, 2.5])
            # orient so the normal points along sign * axis
            n = np.cross(u, v)
            if np.sign(n[axis]) != sign:
                o, u = o + u, -u
            add(*quad_mesh(o, u, v))
            pts.append(_sample_rect(rng, o, u, v, spacing))
    V = np.concatenate(verts)
    F = np.concatenate(faces)
    return SceneModel(V, F, np.concatenate(pts))


# -- posing per scenario ----------------------------------------------------

def _arm_jitter(rng, rots, spread=12.0):
    for side, sgn in (("L", 1.0), ("R", -1.0)):
        rots[f"shoulder_{side}"] = rotation((1, 0, 0), rng.uniform(-spread, spread)) @ rotation(
            (0, 1, 0), sgn * rng.uniform(0, spread))
        rots[f"elbow_{side}"] = rotation((1, 0, 0), rng.uniform(0, 2 * spread))
    return rots


def _pose(rng, scenario):
    r = {}
    if scenario == "stand_floor":
        _arm_jitter(rng, r)
        for side in "LR":
            a = rng.uniform(-8, 8)
            r[f"hip_{side}"] = rotation((1, 0, 0), a)
            r[f"ankle_{side}"] = rotation((1, 0, 0), -a)
    elif scenario == "sit_box":
        hip = rng.uniform(80, 95)
        knee = rng.uniform(80, 100)
        for side in "LR":
            r[f"hip_{side}"] = rotation((1, 0, 0), hip)
            r[f"knee_{side}"] = rotation((1, 0, 0), -knee)
            r[f"ankle_{side}"] = rotation((1, 0, 0), knee - hip)
            # forearms resting forward over the lap
            r[f"shoulder_{side}"] = rotation((1, 0, 0), rng.uniform(5, 20))
            r[f"elbow_{side}"] = rotation((1, 0, 0), rng.uniform(60, 80))
    elif scenario == "lie_plane":
        r["pelvis"] = rotation((1, 0, 0), 90.0)
        for side, sgn in (("L", 1.0), ("R", -1.0)):
            r[f"shoulder_{side}"] = rotation((0, 1, 0), sgn * rng.uniform(5, 25))
            r[f"hip_{side}"] = rotation((0, 1, 0), sgn * rng.uniform(0, 8))
    elif scenario == "lean_wall":
        lean = rng.uniform(4, 10)
        r["pelvis"] = rotation((1, 0, 0), lean)
        _arm_jitter(rng, r, spread=8.0)
        for side in "LR":
            r[f"ankle_{side}"] = rotation((1, 0, 0), -lean)
    else:
        raise UnknownScenario(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return r


def _rot_z(k90):
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k90 % 4]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def _distractor(rng, center, away_dir, dist_range=(1.2, 1.8)):
    ang = np.arctan2(away_dir[1], away_dir[0]) + rng.uniform(-1.0, 1.0)
    d = rng.uniform(*dist_range)
    c = center[:2] + d * np.array([np.cos(ang), np.sin(ang)])
    half = rng.uniform(0.2, 0.4, 2)
    h = rng.uniform(0.3, 0.8)
    return ("box", np.array([c[0] - half[0], c[1] - half[1], 0.0]), np.array([c[0] + half[0], c[1] + half[1], h]))


def _place(rng, body, scenario, scale):
    """Posed scene-frame vertices plus the primitives supporting them."""
    V = pose_body(body, _pose(rng, scenario), scale=scale)
    feet = np.isin(body.region_of_vertex, (4, 5))
    prims = []
    if scenario in ("stand_floor", "lean_wall", "sit_box"):
        V[:, 2] -= V[feet, 2].min()
    else:
        V[:, 2] -= V[:, 2].min()
    if scenario == "sit_box":
        legs = np.isin(body.part_of_vertex, [body.part_names.index(n) for n in
                                             ("lower_leg_L", "lower_leg_R", "foot_L", "foot_R")])
        thigh = body.region_of_vertex == 6
        glute = body.region_of_vertex == 1
        y_front = V[legs, 1].min() - 0.02
        y_back = V[glute, 1].min() - rng.uniform(0.1, 0.25)
        x_lo = V[thigh, 0].min() - 0.02
        x_hi = V[thigh, 0].max() + 0.02
        inside = (V[:, 0] >= x_lo) & (V[:, 0] <= x_hi) & (V[:, 1] >= y_back) & (V[:, 1] <= y_front)
        z_top = V[inside, 2].min()
        prims.append(("box", np.array([x_lo, y_back, 0.0]), np.array([x_hi, y_front, z_top])))
    if scenario == "lean_wall":
        prims.append(("wall", 1, +1.0, V[:, 1].min()))

    k = int(rng.integers(4))
    Rz = _rot_z(k)
    if scenario == "stand_floor":
        Rz = rotation((0, 0, 1), rng.uniform(0, 360))
    shift = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0])
    V = V @ Rz.T + shift
    placed = [("floor", 0.0)]
    for p in prims:
        if p[0] == "box":
            corners = np.array([p[1], p[2]]) @ Rz.T + shift
            placed.append(("box", corners.min(axis=0), corners.max(axis=0)))
        else:  # wall along an axis after a 90-degree turn
            n = Rz @ np.eye(3)[p[1]] * p[2]
            axis = int(np.argmax(np.abs(n)))
            sign = float(np.sign(n[axis]))
            point = Rz @ (np.eye(3)[p[1]] * p[3]) + shift
            placed.append(("wall", axis, sign, float(point[axis])))
    facing = Rz @ np.array([0.0, 1.0, 0.0])
    return V, placed, facing


def _camera(rng, V, facing, scenario, f_full=1000.0, size=(1280, 960)):
    center = 0.5 * (V.min(axis=0) + V.max(axis=0))
    base = np.arctan2(facing[1], facing[0])
    spread = 1.0 if scenario != "lie_plane" else np.pi
    az = base + rng.uniform(-spread, spread)
    dist = rng.uniform(2.5, 4.5)
    height = rng.uniform(1.6, 2.4) if scenario == "lie_plane" else rng.uniform(1.0, 2.2)
    eye = np.array([center[0] + dist * np.cos(az), center[1] + dist * np.sin(az), height])
    target = center + rng.normal(0, 0.05, 3)
    R, t = look_at(eye, target)
    f = f_full * rng.uniform(0.9, 1.1)
    cx, cy = (size[0] - 1) / 2, (size[1] - 1) / 2
    full = Camera(f, cx, cy, R, t, float(max(size)))
    uv = project_camera_frame(full, full.to_camera(V))
    return crop_camera(f, cx, cy, R, t, square_bbox(uv, 1.25), CROP), az


# -- rendering ----------------------------------------------------------------

def render_body(body: BodyModel, camera: Camera, V_scene, res=MAP_RES, stride=STRIDE):
    """Splat body vertices into a ``res x res`` grid with a depth test.

    Returns the 8-channel feature map (silhouette + contact-region masks)
    and a shaded intensity image encoding part identity.
    """
    pc = camera.to_camera(V_scene)
    uv = project_camera_frame(camera, pc)
    cu, cv = crop_to_cell(uv[:, 0], stride), crop_to_cell(uv[:, 1], stride)
    radius = np.maximum(1.0, camera.f * 0.07 / pc[:, 2] / stride)
    zbuf = np.full((res, res), np.inf)
    owner = np.full((res, res), -1)
    for i in np.argsort(-pc[:, 2]):
        r = radius[i]
        j0, j1 = int(np.floor(cu[i] - r)), int(np.ceil(cu[i] + r))
        i0, i1 = int(np.floor(cv[i] - r)), int(np.ceil(cv[i] + r))
        j0, i0 = max(j0, 0), max(i0, 0)
        j1, i1 = min(j1, res - 1), min(i1, res - 1)
        if j0 > j1 or i0 > i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
        inside = (jj - cu[i]) ** 2 + (ii - cv[i]) ** 2 <= r * r
        closer = pc[i, 2] <= zbuf[ii, jj]
        m = inside & closer
        zbuf[ii[m], jj[m]] = pc[i, 2]
        owner[ii[m], jj[m]] = i
    sil = owner >= 0
    fmap = np.zeros((res, res, 8))
    fmap[..., 0] = sil
    reg = np.where(sil, body.region_of_vertex[np.maximum(owner, 0)], -1)
    for k in range(7):
        fmap[..., k + 1] = reg == k
    fmap = gaussian_filter(fmap, sigma=(0.7, 0.7, 0))
    n_parts = max(1, len(body.part_names))
    part = body.part_of_vertex if body.part_of_vertex is not None else np.zeros(len(V_scene), int)
    shade = np.where(sil, 0.25 + 0.75 * (part[np.maximum(owner, 0)] + 1) / n_parts, 0.0)
    return fmap, shade


def image_feature(intensity, grid=FEATURE_GRID):
    """Average-pooled intensity grid, flattened (196-d for a 56 map)."""
    res = intensity.shape[0]
    k = res // grid
    return intensity[: grid * k, : grid * k].reshape(grid, k, grid, k).mean(axis=(1, 3)).reshape(-1)


def render_root_maps(frame: SynthFrame, res=MAP_RES, stride=STRIDE, sigma=2.0) -> RootMaps:
    """Gaussian heatmap at the projected root plus a constant normalized-depth
    disc of radius ``3 sigma`` around it."""
    cam = frame.camera
    r = frame.root_gt.xyz
    if r[2] <= 1e-9:
        raise RootOutsideFrustum("root is behind the camera")
    u, v = project_camera_frame(cam, r)
    if not (0 <= u < cam.w and 0 <= v < cam.w):
        raise RootOutsideFrustum(f"root projects outside the crop at ({u:.1f}, {v:.1f})")
    cu, cv = crop_to_cell(u, stride), crop_to_cell(v, stride)
    jj, ii = np.meshgrid(np.arange(res), np.arange(res))
    d2 = (jj - cu) ** 2 + (ii - cv) ** 2
    zn = normalized_depth(cam, r[2])
    if sigma <= 0:
        heat = np.zeros((res, res))
        ci = int(np.clip(np.round(cv), 0, res - 1))
        cj = int(np.clip(np.round(cu), 0, res - 1))
        heat[ci, cj] = 1.0
        depth = heat * zn
    else:
        heat = np.exp(-d2 / (2 * sigma ** 2))
        depth = np.where(d2 <= (3 * sigma) ** 2, zn, 0.0)
    return RootMaps(heat, depth)


# -- frame generation -----------------------------------------------------------

@lru_cache(maxsize=1)
def default_body() -> BodyModel:
    return build_toy_body()


def gen_frame(seed: int, scenario: str, body: BodyModel | None = None, threshold=0.07,
              frame_id: str | None = None) -> SynthFrame:
    if scenario not in SCENARIOS:
        raise UnknownScenario(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    body = body or default_body()
    rng = np.random.default_rng([int(seed), SCENARIOS.index(scenario)])
    scale = float(rng.uniform(0.88, 1.12))
    V, prims, facing = _place(rng, body, scenario, scale)
    camera, az = _camera(rng, V, facing, scenario)
    center = 0.5 * (V.min(axis=0) + V.max(axis=0))
    away = center[:2] - camera.center[:2]
    away /= np.linalg.norm(away)
    if scenario == "stand_floor":
        # a back wall and a side box keep the floor from being the whole scene
        dist = rng.uniform(1.0, 1.6)
        axis = int(np.argmax(np.abs(away)))
        sign = float(np.sign(away[axis]))
        edge = V[:, axis].max() if sign > 0 else V[:, axis].min()
        prims.append(("wall", axis, -sign, float(edge + sign * dist)))
    for _ in range(50):  # keep the distractor clear of the body
        box = _distractor(rng, center, away)
        if box_sdf(V, box[1], box[2]).min() > 0.25:
            prims.append(box)
            break
    scene = build_scene(rng, prims, center)
    J = regress_joints(body, V)
    root_cam = camera.to_camera(J[0])
    frame = SynthFrame(
        frame_id=frame_id or f"{scenario}_{seed:06d}",
        seed=int(seed),
        scenario=scenario,
        scene=scene,
        primitives=prims,
        body_gt=V,
        camera=camera,
        root_gt=Root3D.from_xyz(root_cam, "ground-truth"),
        scene_labels=gt_contact_labels(V, body, scene.points, threshold),
        vertex_contact=vertex_contacts(V, body, scene, threshold),
        body_scale=scale,
    )
    frame.maps = render_root_maps(frame)
    frame.feature_map, frame.intensity = render_body(body, camera, V)
    return frame


def scenario_for(i: int) -> str:
    return SCENARIOS[i % len(SCENARIOS)]


def gen_frames(n, seed=0, body=None):
    """``n`` frames cycling through the scenarios with per-frame seeds."""
    return [gen_frame(seed * 100003 + i, scenario_for(i), body) for i in range(n)]


# -- dataset I/O -------------------------------------------------------------------

def write_maps(path, channels):
    """``channels``: ``(H, W, C)`` array written as little-endian float32."""
    arr = np.asarray(channels, dtype="<f4")
    H, W, C = arr.shape
    with open(path, "wb") as fh:
        fh.write(MAPS_MAGIC + struct.pack("<III", H, W, C))
        fh.write(arr.tobytes())


def read_maps(path):
    buf = Path(path).read_bytes()
    if buf[:6] != MAPS_MAGIC:
        raise ConfigError(f"{path}: bad maps magic")
    H, W, C = struct.unpack_from("<III", buf, 6)
    return np.frombuffer(buf, "<f4", H * W * C, 18).reshape(H, W, C).astype(np.float64)


def save_frame(frame: SynthFrame, directory, body: BodyModel | None = None):
    body = body or default_body()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "scene.ply", frame.scene.vertices, frame.scene.triangles)
    write_ply(d / "scene_points.ply", frame.scene.points, labels=frame.scene_labels.categories)
    write_obj(d / "body_gt.obj", frame.body_gt, body.faces)
    frame.camera.save(d / "camera.json")
    labels = {
        "frame_id": frame.frame_id,
        "seed": frame.seed,
        "scenario": frame.scenario,
        "scene_categories": frame.scene_labels.categories.tolist(),
        "vertex_contact": frame.vertex_contact.astype(int).tolist(),
        "root_gt": frame.root_gt.xyz.tolist(),
        "body_scale": frame.body_scale,
        "primitives": [[p[0]] + [np.asarray(x).tolist() if isinstance(x, np.ndarray) else x for x in p[1:]]
                       for p in frame.primitives],
    }
    (d / "labels.json").write_text(json.dumps(labels))
    stack = np.concatenate([frame.maps.heatmap[..., None], frame.maps.depthmap[..., None],
                            frame.feature_map, frame.intensity[..., None]], axis=-1)
    write_maps(d / "maps.bin", stack)


def load_frame(directory) -> SynthFrame:
    d = Path(directory)
    for name in ("scene.ply", "scene_points.ply", "body_gt.obj", "camera.json", "labels.json", "maps.bin"):
        if not (d / name).exists():
            raise MissingInputError(f"{d / name} missing")
    V, F, _ = read_ply(d / "scene.ply")
    P, _, extra = read_ply(d / "scene_points.ply")
    body_v, _ = read_obj(d / "body_gt.obj")
    labels = json.loads((d / "labels.json").read_text())
    maps = read_maps(d / "maps.bin")
    prims = []
    for p in labels["primitives"]:
        if p[0] == "box":
            prims.append(("box", np.array(p[1]), np.array(p[2])))
        else:
            prims.append(tuple(p))
    frame = SynthFrame(
        frame_id=labels["frame_id"], seed=labels["seed"], scenario=labels["scenario"],
        scene=SceneModel(V, F, P), primitives=prims, body_gt=body_v,
        camera=Camera.load(d / "camera.json"),
        root_gt=Root3D.from_xyz(labels["root_gt"], "ground-truth"),
        scene_labels=ContactLabels(labels["scene_categories"]),
        vertex_contact=np.asarray(labels["vertex_contact"], dtype=bool),
        body_scale=labels["body_scale"],
    )
    frame.maps = RootMaps(maps[..., 0], maps[..., 1])
    frame.feature_map = maps[..., 2:10]
    frame.intensity = maps[..., 10]
    return frame


def write_dataset(frames, directory, body=None, seed=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for fr in frames:
        save_frame(fr, d / fr.frame_id, body)
    manifest = {"seed": seed, "frames": [{"id": f.frame_id, "seed": f.seed, "scenario": f.scenario}
                                         for f in frames]}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(directory):
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise MissingInputError(f"no manifest.json in {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    return [load_frame(d / entry["id"]) for entry in manifest["frames"]]
