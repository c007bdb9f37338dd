"""Toy parametric body: template, joint regressor, contact-region partition,
rigid-part posing and ground-truth contact labelling.

The procedural template stands in for SMPL. Its seven contact regions
(back, gluteus, hands, feet, thighs) use our own vertex ids, not SMPL's.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DimensionMismatch, EmptyRegion

N_REGIONS = 7
N_CATEGORIES = N_REGIONS + 1
REGION_NAMES = ("back", "gluteus", "L_hand", "R_hand", "L_foot", "R_foot", "thighs")
CATEGORY_NAMES = ("none",) + REGION_NAMES
NONE = -1  # region id of vertices outside every contact region

JOINT_NAMES = (
    "pelvis", "hip_L", "knee_L", "ankle_L", "hip_R", "knee_R", "ankle_R",
    "neck", "shoulder_L", "elbow_L", "wrist_L", "shoulder_R", "elbow_R", "wrist_R",
)

# skeleton: joint -> (parent, rest position at unit scale); body faces +y, z up, left is +x
SKELETON = {
    "pelvis": (None, (0.0, 0.0, 0.92)),
    "neck": ("pelvis", (0.0, 0.0, 1.50)),
    "shoulder_L": ("pelvis", (0.19, 0.0, 1.45)),
    "elbow_L": ("shoulder_L", (0.21, 0.0, 1.17)),
    "wrist_L": ("elbow_L", (0.22, 0.0, 0.92)),
    "shoulder_R": ("pelvis", (-0.19, 0.0, 1.45)),
    "elbow_R": ("shoulder_R", (-0.21, 0.0, 1.17)),
    "wrist_R": ("elbow_R", (-0.22, 0.0, 0.92)),
    "hip_L": ("pelvis", (0.09, 0.0, 0.92)),
    "knee_L": ("hip_L", (0.09, 0.0, 0.50)),
    "ankle_L": ("knee_L", (0.09, 0.0, 0.09)),
    "hip_R": ("pelvis", (-0.09, 0.0, 0.92)),
    "knee_R": ("hip_R", (-0.09, 0.0, 0.50)),
    "ankle_R": ("knee_R", (-0.09, 0.0, 0.09)),
}


@dataclass
class BodyModel:
    template: np.ndarray
    joint_regressor: sparse.csr_matrix
    region_of_vertex: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    part_of_vertex: np.ndarray | None = None
    part_names: tuple = ()
    part_joint: tuple = ()

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64).reshape(-1, 3)
        self.joint_regressor = sparse.csr_matrix(self.joint_regressor, dtype=np.float64)
        self.region_of_vertex = np.asarray(self.region_of_vertex, dtype=np.int64)
        n = len(self.template)
        if self.joint_regressor.shape[1] != n or len(self.region_of_vertex) != n:
            raise DimensionMismatch("regressor / region partition do not match the template")
        if self.joint_regressor.data.min(initial=0.0) < 0:
            raise ConfigError("joint regressor must be nonnegative")
        if np.abs(np.asarray(self.joint_regressor.sum(axis=1)).ravel() - 1).max() > 1e-9:
            raise ConfigError("joint regressor rows must sum to 1")
        for k in range(N_REGIONS):
            if not np.any(self.region_of_vertex == k):
                raise EmptyRegion(f"contact region {k} ({REGION_NAMES[k]}) is empty")

    @property
    def n_vertices(self):
        return len(self.template)

    @property
    def n_joints(self):
        return self.joint_regressor.shape[0]

    @property
    def dense_regressor(self):
        return self.joint_regressor.toarray()

    def region_vertices(self, k):
        return np.flatnonzero(self.region_of_vertex == k)

    def save_regions(self, path):
        regions = [self.region_vertices(k).tolist() for k in range(N_REGIONS)]
        Path(path).write_text(json.dumps({"regions": regions}))

    @staticmethod
    def load_regions(path, n_vertices):
        data = json.loads(Path(path).read_text())
        regions = data["regions"]
        if len(regions) != N_REGIONS:
            raise ConfigError(f"region file must list {N_REGIONS} regions")
        out = np.full(n_vertices, NONE, dtype=np.int64)
        for k, ids in enumerate(regions):
            out[np.asarray(ids, dtype=np.int64)] = k
        return out

    @classmethod
    def from_files(cls, template_obj, regions_json, regressor_npy=None):
        """SMPL-compatible mode: a user-supplied template OBJ and region file.

        Without a regressor the single root row averages the whole mesh.
        """
        from .meshio import read_obj

        V, F = read_obj(template_obj)
        regions = cls.load_regions(regions_json, len(V))
        if regressor_npy is not None:
            M = np.load(regressor_npy)
        else:
            M = np.full((1, len(V)), 1.0 / len(V))
        return cls(V, sparse.csr_matrix(M), regions, F)


@dataclass
class BodyMesh:
    vertices: np.ndarray
    frame: str  # camera | scene | root-centered

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        if self.frame not in ("camera", "scene", "root-centered"):
            raise ConfigError(f"unknown frame tag {self.frame!r}")
        if not np.all(np.isfinite(self.vertices)):
            raise ConfigError("body mesh has non-finite coordinates")


@dataclass
class ContactLabels:
    """Per-point categories: 0 = none, ``k + 1`` = contact region ``k``."""

    categories: np.ndarray
    n_categories: int = N_CATEGORIES

    def __post_init__(self):
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        if self.n_categories != N_CATEGORIES:
            raise ConfigError("contact labels must use exactly 8 categories")

    @property
    def is_contact(self):
        return self.categories > 0

    def __len__(self):
        return len(self.categories)


def regress_joints(body: BodyModel, mesh) -> np.ndarray:
    V = mesh.vertices if isinstance(mesh, BodyMesh) else np.asarray(mesh, dtype=np.float64)
    if V.shape != (body.n_vertices, 3):
        raise DimensionMismatch(f"mesh has shape {V.shape}, body model expects ({body.n_vertices}, 3)")
    return np.asarray(body.joint_regressor @ V)


def gt_contact_labels(mesh, body: BodyModel, scene_points, threshold=0.07) -> ContactLabels:
    """Label scene points by the region of their nearest body vertex.

    Points farther than ``threshold`` from every vertex are ``none``. When
    several vertices tie for nearest (within 1e-12 m) the smallest region id
    among them wins; a tie between a region vertex and an unlabelled vertex
    goes to the region.
    """
    if not threshold > 0:
        raise ConfigError("contact threshold must be positive")
    V = mesh.vertices if isinstance(mesh, BodyMesh) else np.asarray(mesh, dtype=np.float64)
    pts = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    cats = np.zeros(len(pts), dtype=np.int64)
    if len(pts) == 0:
        return ContactLabels(cats)
    tree = cKDTree(V)
    k = min(8, len(V))
    d, idx = tree.query(pts, k=k, distance_upper_bound=threshold + 1e-9)
    d, idx = d.reshape(len(pts), k), idx.reshape(len(pts), k)
    near = np.isfinite(d[:, 0]) & (d[:, 0] <= threshold)
    region = np.where(idx < len(V), body.region_of_vertex[np.minimum(idx, len(V) - 1)], NONE)
    tied = d <= d[:, :1] + 1e-12
    # smallest region id among tied candidates; NONE sorts last
    cand = np.where(tied & (region >= 0), region, N_REGIONS)
    best = cand.min(axis=1)
    has_region = near & (best < N_REGIONS)
    cats[has_region] = best[has_region] + 1
    return ContactLabels(cats)


def vertex_contacts(mesh_vertices, body: BodyModel, scene, threshold=0.07) -> np.ndarray:
    """Boolean contact flag per body vertex: inside a contact region and
    within ``threshold`` of the scene surface."""
    sd = scene.signed_distance(mesh_vertices)
    return (body.region_of_vertex >= 0) & (np.abs(sd) <= threshold)


# -- procedural template ----------------------------------------------------

def _ring_basis(d):
    d = d / np.linalg.norm(d)
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = ref - d * (ref @ d)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _tube(p0, p1, n_rings, n_around, rx, ry, phase=0.0):
    """Elliptic tube rings from p0 to p1. Returns vertices, faces and per-vertex (cos, sin)."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    e1, e2 = _ring_basis(p1 - p0)
    th = phase + 2 * np.pi * np.arange(n_around) / n_around
    verts, cs = [], []
    for t in np.linspace(0.0, 1.0, n_rings):
        c = p0 + t * (p1 - p0)
        for a in th:
            verts.append(c + rx * np.cos(a) * e1 + ry * np.sin(a) * e2)
            cs.append((np.cos(a), np.sin(a)))
    faces = []
    for i in range(n_rings - 1):
        for j in range(n_around):
            a, b = i * n_around + j, i * n_around + (j + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [(a, b, d), (a, d, c)]
    return np.array(verts), np.array(faces), np.array(cs)


def _sphere(center, r, n_rings, n_around):
    verts = []
    for i in range(n_rings):
        pol = np.pi * (i + 1) / (n_rings + 1)
        for j in range(n_around):
            az = 2 * np.pi * j / n_around
            verts.append(np.asarray(center) + r * np.array(
                [np.sin(pol) * np.cos(az), np.sin(pol) * np.sin(az), np.cos(pol)]))
    faces = []
    for i in range(n_rings - 1):
        for j in range(n_around):
            a, b = i * n_around + j, i * n_around + (j + 1) % n_around
            c, d = a + n_around, b + n_around
            faces += [(a, d, b), (a, c, d)]
    return np.array(verts), np.array(faces)


def build_toy_body() -> BodyModel:
    """The 432-vertex capsule humanoid at unit scale (about 1.75 m tall)."""
    S = {k: np.array(v[1]) for k, v in SKELETON.items()}
    parts = []  # (name, joint, verts, faces, regions)

    def add(name, joint, verts, faces, regions):
        parts.append((name, joint, verts, faces, np.asarray(regions, dtype=np.int64)))

    v, f = _sphere((0.0, 0.0, 1.62), 0.11, 6, 8)
    add("head", "neck", v, f, np.full(len(v), NONE))

    v, f, cs = _tube((0, 0, 0.88), (0, 0, 1.50), 8, 12, 0.16, 0.11)
    back = (v[:, 1] < -0.05) & (v[:, 2] < 1.45)
    add("torso", "pelvis", v, f, np.where(back, 0, NONE))

    # gluteal patch: half-ring behind the pelvis
    gv = []
    for z in np.linspace(0.80, 0.95, 4):
        for a in np.linspace(np.radians(205), np.radians(335), 6):
            gv.append((0.15 * np.cos(a), 0.125 * np.sin(a), z))
    gf = []
    for i in range(3):
        for j in range(5):
            a = i * 6 + j
            gf += [(a, a + 1, a + 7), (a, a + 7, a + 6)]
    add("gluteus", "pelvis", np.array(gv), np.array(gf), np.full(24, 1))

    for side, sgn, hand_region, foot_region in (("L", 1.0, 2, 4), ("R", -1.0, 3, 5)):
        v, f, _ = _tube(S[f"shoulder_{side}"], S[f"elbow_{side}"], 4, 6, 0.045, 0.045)
        add(f"upper_arm_{side}", f"shoulder_{side}", v, f, np.full(len(v), NONE))
        v, f, _ = _tube(S[f"elbow_{side}"], S[f"wrist_{side}"], 4, 6, 0.038, 0.038)
        add(f"lower_arm_{side}", f"elbow_{side}", v, f, np.full(len(v), NONE))
        tip = S[f"wrist_{side}"] + np.array([sgn * 0.005, 0.0, -0.12])
        v, f, _ = _tube(S[f"wrist_{side}"], tip, 3, 4, 0.02, 0.04)
        add(f"hand_{side}", f"wrist_{side}", v, f, np.full(len(v), hand_region))
        v, f, cs = _tube(S[f"hip_{side}"], S[f"knee_{side}"], 4, 6, 0.07, 0.07, phase=np.pi / 6)
        posterior = v[:, 1] < -0.02
        add(f"upper_leg_{side}", f"hip_{side}", v, f, np.where(posterior, 6, NONE))
        v, f, _ = _tube(S[f"knee_{side}"], S[f"ankle_{side}"], 4, 6, 0.05, 0.05)
        add(f"lower_leg_{side}", f"knee_{side}", v, f, np.full(len(v), NONE))
        ax = S[f"ankle_{side}"]
        v, f, cs = _tube((ax[0], -0.05, 0.045), (ax[0], 0.17, 0.045), 4, 6, 0.045, 0.045, phase=np.pi / 6)
        sole = v[:, 2] < 0.03
        add(f"foot_{side}", f"ankle_{side}", v, f, np.where(sole, foot_region, NONE))

    verts, faces, regions, part_ids = [], [], [], []
    offset = 0
    for pid, (name, joint, v, f, r) in enumerate(parts):
        verts.append(v)
        faces.append(f + offset)
        regions.append(r)
        part_ids.append(np.full(len(v), pid))
        offset += len(v)
    V = np.concatenate(verts)
    F = np.concatenate(faces)
    regions = np.concatenate(regions)
    part_ids = np.concatenate(part_ids)
    names = tuple(p[0] for p in parts)
    start = {p[0]: s for p, s in zip(parts, np.cumsum([0] + [len(p[2]) for p in parts]))}

    def ring(part, i, n_around):
        s = start[part] + i * n_around
        return np.arange(s, s + n_around)

    rows = [np.concatenate([ring("upper_leg_L", 0, 6), ring("upper_leg_R", 0, 6)])]
    for side in "LR":
        rows += [ring(f"upper_leg_{side}", 0, 6), ring(f"lower_leg_{side}", 0, 6), ring(f"lower_leg_{side}", 3, 6)]
    rows.append(ring("torso", 7, 12))
    for side in "LR":
        rows += [ring(f"upper_arm_{side}", 0, 6), ring(f"lower_arm_{side}", 0, 6), ring(f"lower_arm_{side}", 3, 6)]
    M = np.zeros((len(rows), len(V)))
    for j, ids in enumerate(rows):
        M[j, ids] = 1.0 / len(ids)
    return BodyModel(V, sparse.csr_matrix(M), regions, F, part_ids, names, tuple(p[1] for p in parts))


def rotation(axis, degrees):
    return Rotation.from_rotvec(np.radians(degrees) * np.asarray(axis, dtype=float) / np.linalg.norm(axis)).as_matrix()


def pose_body(body: BodyModel, local_rot: dict, scale=1.0, global_rot=None, translation=None) -> np.ndarray:
    """Pose the toy template by rigid per-part rotations about skeleton joints.

    ``local_rot`` maps joint names to 3x3 rotations relative to the parent.
    Returns posed vertices; the body frame is z-up with feet near z = 0.
    """
    if body.part_of_vertex is None:
        raise ConfigError("posing needs the procedural toy body")
    rest = {k: scale * np.array(v[1]) for k, v in SKELETON.items()}
    glob_R, glob_p = {}, {}
    for name, (parent, _) in SKELETON.items():  # parents precede children
        R_loc = local_rot.get(name, np.eye(3))
        if parent is None:
            glob_R[name] = R_loc
            glob_p[name] = rest[name]
        else:
            glob_R[name] = glob_R[parent] @ R_loc
            glob_p[name] = glob_R[parent] @ (rest[name] - rest[parent]) + glob_p[parent]
    V = scale * body.template
    out = np.empty_like(V)
    for pid, joint in enumerate(body.part_joint):
        m = body.part_of_vertex == pid
        out[m] = (V[m] - rest[joint]) @ glob_R[joint].T + glob_p[joint]
    if global_rot is not None:
        out = out @ np.asarray(global_rot).T
    if translation is not None:
        out = out + np.asarray(translation)
    return out
