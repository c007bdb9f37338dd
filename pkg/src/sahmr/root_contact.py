"""Stage 1: initial root, voxel features, offset voting and contact labels.

Two predictors share one result type: ``OracleStage1`` returns ground truth
(optionally jittered) and ``LearnedStage1`` runs the toy heads plus a
per-voxel point network standing in for a sparse 3D CNN.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .body import N_CATEGORIES, ContactLabels, gt_contact_labels
from .errors import EmptyGrid, EmptyHeatmap, UnnormalizedConfidence
from .geometry import (Camera, Root3D, bilinear_sample, cell_to_crop, crop_to_cell, frustum_select,
                       lift_root, normalized_depth, project_camera_frame)
from .nn import MLP, Adam, Module
from .scene import SparseVoxelGrid, roi_select, voxelize

STRIDE = 4


@dataclass
class Stage1Config:
    gamma1: float = 1.25
    gamma2: float = 0.5
    voxel_size: float = 0.05
    w_rz: float = 10.0


@dataclass(eq=False)
class VoxelFeatures:
    offsets: np.ndarray  # (V, 3) scene frame, root minus voxel centre
    features: np.ndarray  # (V, C) unprojected image features
    behind: np.ndarray  # (V,) voxel centre behind the camera
    refined_offsets: np.ndarray | None = None
    confidences: np.ndarray | None = None
    category_scores: np.ndarray | None = None

    def __len__(self):
        return len(self.offsets)


@dataclass(eq=False)
class Stage1Result:
    root_initial: Root3D
    root_refined: Root3D
    scene_labels: ContactLabels  # over every scene point
    contact_points: np.ndarray  # (K, 3) scene frame
    contact_categories: np.ndarray  # (K,) values 1..7
    grid: SparseVoxelGrid | None = None
    voxels: VoxelFeatures | None = None
    flags: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


# -- the four core operations -------------------------------------------------

def initial_root_from_maps(maps, camera: Camera, stride=STRIDE) -> Root3D:
    heat = np.asarray(maps.heatmap)
    if heat.size == 0 or not heat.max() > 0:
        raise EmptyHeatmap("heatmap has no positive response")
    # np.argmax returns the first maximum, i.e. the smallest row-major index
    row, col = np.unravel_index(int(np.argmax(heat)), heat.shape)
    x, y = cell_to_crop(col, stride), cell_to_crop(row, stride)
    return lift_root(camera, float(x), float(y), float(maps.depthmap[row, col]), "initial")


def build_voxel_features(grid: SparseVoxelGrid, root: Root3D, feature_map, camera: Camera,
                         stride=STRIDE) -> VoxelFeatures:
    if len(grid) == 0:
        raise EmptyGrid("no occupied voxels")
    centers = grid.centers
    offsets = root.in_scene(camera)[None, :] - centers
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[..., None]
    pc = camera.to_camera(centers)
    behind = pc[:, 2] <= 1e-9
    z = np.where(behind, 1.0, pc[:, 2])
    u = camera.f * pc[:, 0] / z + camera.cx
    v = camera.f * pc[:, 1] / z + camera.cy
    feats = bilinear_sample(fmap, crop_to_cell(u, stride), crop_to_cell(v, stride)).reshape(len(grid), -1)
    feats[behind] = 0.0
    return VoxelFeatures(offsets, feats, behind)


def refine_root(vf: VoxelFeatures, grid: SparseVoxelGrid, camera: Camera | None = None) -> Root3D:
    """Confidence-weighted vote ``sum_i c_i (o*_i + s_i)``.

    The vote is formed in the scene frame; with a camera the result is
    returned in camera coordinates like every other ``Root3D``.
    """
    c = np.asarray(vf.confidences, dtype=np.float64)
    if abs(c.sum() - 1.0) > 1e-6:
        raise UnnormalizedConfidence(f"confidences sum to {c.sum():.9f}")
    r = (c[:, None] * (vf.refined_offsets + grid.centers)).sum(axis=0)
    if camera is not None:
        r = camera.to_camera(r)
    return Root3D.from_xyz(r, "refined")


def voxel_categories(grid: SparseVoxelGrid, vf: VoxelFeatures) -> np.ndarray:
    # argmax keeps the first maximum, so ties go to the smaller id (0 = none)
    return np.argmax(vf.category_scores, axis=1)


def propagate_labels(grid: SparseVoxelGrid, vf: VoxelFeatures):
    """Label every voxelised point with its voxel's top category.

    Returns ``(labels, contact_points, contact_categories)``; labels follow
    the order of ``grid.points``.
    """
    cats = voxel_categories(grid, vf)[grid.point_voxel]
    labels = ContactLabels(cats)
    m = cats != 0
    return labels, grid.points[m], cats[m]


def voxel_gt_categories(grid: SparseVoxelGrid, point_labels) -> np.ndarray:
    """Majority label of the member points; ties go to the smaller id."""
    counts = np.zeros((len(grid), N_CATEGORIES), dtype=np.int64)
    np.add.at(counts, (grid.point_voxel, np.asarray(point_labels)), 1)
    return np.argmax(counts, axis=1)


def oracle_stage1(scene, body_gt, camera: Camera, body, noise_sigma=0.0, seed=0, threshold=0.07):
    """Ground-truth root (optionally jittered per axis) and contact labels."""
    from .body import regress_joints

    root = camera.to_camera(regress_joints(body, body_gt)[0])
    if noise_sigma > 0:
        root = root + np.random.default_rng(seed).normal(0.0, noise_sigma, 3)
    return Root3D.from_xyz(root, "ground-truth" if noise_sigma == 0 else "oracle-noisy"), \
        gt_contact_labels(body_gt, body, scene.points, threshold)


# -- shared plumbing -------------------------------------------------------------

def _aligned_origin(root_scene, cfg: Stage1Config):
    # grid anchored on the initial root so the whole stage is translation equivariant
    k = np.ceil((cfg.gamma1 + cfg.gamma2) / cfg.voxel_size) + 1
    return root_scene - k * cfg.voxel_size


@dataclass(eq=False)
class Stage1Input:
    root_initial: Root3D
    roi: np.ndarray  # indices into scene.points
    grid: SparseVoxelGrid
    vf: VoxelFeatures
    inputs: np.ndarray  # (V, D) network input
    R: np.ndarray  # scene -> camera rotation


def prepare_stage1(scene, camera: Camera, feature_map, root_initial: Root3D, cfg: Stage1Config):
    fr = frustum_select(camera, scene.points)
    r_scene = root_initial.in_scene(camera)
    roi = fr[roi_select(scene.points[fr], r_scene, cfg.gamma1, cfg.gamma2, camera.optical_axis)]
    grid = voxelize(scene.points[roi], cfg.voxel_size, _aligned_origin(r_scene, cfg))
    vf = build_voxel_features(grid, root_initial, feature_map, camera)
    R = camera.R
    spread = (grid.member_means() - grid.centers) / cfg.voxel_size
    gravity = np.broadcast_to(R[:, 2], (len(grid), 3))
    X = np.concatenate([vf.offsets @ R.T / cfg.gamma1, spread @ R.T, vf.features,
                        vf.behind[:, None].astype(float), gravity], axis=1)
    return Stage1Input(root_initial, roi, grid, vf, X, R)


def _finish(scene, camera, prep: Stage1Input, root_refined, flags, timings):
    labels, pts, cats = propagate_labels(prep.grid, prep.vf)
    full = np.zeros(len(scene.points), dtype=np.int64)
    full[prep.roi] = labels.categories
    return Stage1Result(prep.root_initial, root_refined, ContactLabels(full), pts, cats,
                        prep.grid, prep.vf, flags, timings)


# -- toy initial-root head ----------------------------------------------------------

def depth_features(feature_map, image_feature):
    """Global descriptor for the depth head: pooled intensities, silhouette
    extent and per-region area fractions."""
    sil = feature_map[..., 0] > 0.5
    H, W = sil.shape
    if sil.any():
        ii, jj = np.nonzero(sil)
        ext = [(ii.max() - ii.min() + 1) / H, (jj.max() - jj.min() + 1) / W, sil.mean()]
    else:
        ext = [0.0, 0.0, 0.0]
    regions = feature_map[..., 1:].sum(axis=(0, 1)) / max(sil.sum(), 1)
    return np.concatenate([image_feature, ext, regions, [1.0]])


class InitialRootHead:
    """Stand-in for the 2D root heatmap and normalized-depth heads.

    The heatmap comes from a simulated 2D detector: a Gaussian at the true
    root projection displaced by seeded pixel noise. The normalized depth
    is a ridge regression on a global image descriptor, so body-size
    variation leaves it genuinely uncertain.
    """

    def __init__(self, ridge=1.0, pixel_noise=1.5, sigma=2.0):
        self.ridge = ridge
        self.pixel_noise = pixel_noise
        self.sigma = sigma
        self.w_depth = None

    def fit(self, frames):
        F = np.array([depth_features(fr.feature_map, fr.image_feature) for fr in frames])
        z = np.array([normalized_depth(fr.camera, fr.root_gt.Z) for fr in frames])
        self.w_depth = np.linalg.solve(F.T @ F + self.ridge * np.eye(F.shape[1]), F.T @ z)
        return self

    def predict_depth(self, feature_map, image_feature):
        if self.w_depth is None:
            raise EmptyHeatmap("initial-root head is not fitted")
        return max(float(depth_features(feature_map, image_feature) @ self.w_depth), 1e-3)

    def predict_maps(self, frame):
        from .synth import RootMaps

        cam = frame.camera
        H = frame.feature_map.shape[0]
        uv = project_camera_frame(cam, frame.root_gt.xyz)
        uv = uv + np.random.default_rng([frame.seed, 7]).normal(0.0, self.pixel_noise, 2)
        cu, cv = crop_to_cell(uv, STRIDE)
        jj, ii = np.meshgrid(np.arange(H), np.arange(H))
        heat = np.exp(-((jj - cu) ** 2 + (ii - cv) ** 2) / (2 * self.sigma ** 2))
        zn = self.predict_depth(frame.feature_map, frame.image_feature)
        return RootMaps(heat, np.full((H, H), zn))

    def state(self):
        return {"w_depth": self.w_depth, "config": np.array([self.ridge, self.pixel_noise, self.sigma])}

    def load_state(self, state):
        self.w_depth = np.asarray(state["w_depth"], dtype=np.float64)
        self.ridge, self.pixel_noise, self.sigma = (float(v) for v in state["config"])
        return self


# -- toy per-voxel network --------------------------------------------------------

N_INPUT = 3 + 3 + 8 + 1 + 3
OFFSET_SCALE = 0.25


class Stage1Net(Module):
    """Shared per-voxel MLP with mean+max pooled frame context.

    Outputs per voxel: an offset correction in camera axes, a confidence
    logit and 8 category scores.
    """

    def __init__(self, rng, hidden=128, n_in=N_INPUT):
        self.encode = MLP([n_in, hidden, hidden], rng)
        self.decode = MLP([3 * hidden, hidden, hidden, 3 + 1 + N_CATEGORIES], rng, final_gain=0.1)

    def __call__(self, X, seg, n):
        h = ad.relu(self.encode(X))
        inv = (1.0 / np.bincount(seg, minlength=n))[:, None]
        ctx = ad.concat([ad.segment_sum(h, seg, n) * inv, ad.segment_max(h, seg, n)], axis=1)
        out = self.decode(ad.concat([h, ctx[seg]], axis=1))
        return out[:, 0:3] * OFFSET_SCALE, out[:, 3], out[:, 4:]


def _rows(prep, pick=None):
    idx = slice(None) if pick is None else pick
    n = len(prep.grid) if pick is None else len(pick)
    return prep.inputs[idx], prep.vf.offsets[idx], prep.grid.centers[idx], np.broadcast_to(prep.R, (n, 3, 3))


def stage1_forward(net, preps, picks=None):
    """Batched forward over frames (optionally over a voxel subset of each).

    Returns tensors (refined offsets, confidences, scores, roots) plus the
    per-row frame ids; roots are in the scene frame.
    """
    picks = picks or [None] * len(preps)
    parts = [_rows(p, k) for p, k in zip(preps, picks)]
    X, offsets, centers, R = (np.concatenate(c) for c in zip(*parts))
    seg = np.concatenate([np.full(len(c[0]), i) for i, c in enumerate(parts)])
    n = len(preps)
    delta_cam, logit, scores = net(ad.as_tensor(X), seg, n)
    # back to scene axes: R^T delta, row by row
    delta = ad.Tensor.op(np.einsum("nji,nj->ni", R, delta_cam.data), (delta_cam,),
                         lambda g: (np.einsum("nij,nj->ni", R, g),))
    refined = delta + offsets
    conf = ad.segment_softmax(logit, seg, n)
    roots = ad.segment_sum(conf.reshape(-1, 1) * (refined + centers), seg, n)
    return refined, conf, scores, roots, seg, centers


@dataclass(eq=False)
class Stage1Sample:
    prep: Stage1Input
    root_gt_scene: np.ndarray
    voxel_labels: np.ndarray


def make_stage1_sample(frame, head: InitialRootHead, cfg: Stage1Config):
    maps = head.predict_maps(frame)
    root0 = initial_root_from_maps(maps, frame.camera)
    prep = prepare_stage1(frame.scene, frame.camera, frame.feature_map, root0, cfg)
    labels = frame.scene_labels.categories[prep.roi]
    return Stage1Sample(prep, frame.root_scene, voxel_gt_categories(prep.grid, labels))


def stage1_loss(net, samples, picks=None, weights=None):
    from .metrics import loss_rc

    picks = picks or [None] * len(samples)
    refined, conf, scores, roots, seg, centers = stage1_forward(net, [s.prep for s in samples], picks)
    r_gt = np.array([s.root_gt_scene for s in samples])
    labels = np.concatenate([s.voxel_labels if k is None else s.voxel_labels[k] for s, k in zip(samples, picks)])
    pred = {"offsets": refined, "root": roots, "class_logits": scores}
    gt = {"offsets": r_gt[seg] - centers, "root": r_gt, "classes": labels}
    return loss_rc(pred, gt, weights)


def train_stage1(samples, seed=0, steps=1100, lr=2e-3, voxels_per_frame=192, hidden=128, time_budget=None, log=None):
    """Adam on the stage-1 loss, each step on a seeded random voxel subset per frame."""
    rng = np.random.default_rng(seed)
    net = Stage1Net(rng, hidden)
    opt = Adam(net.parameters(), lr)
    history = []
    t0 = time.perf_counter()
    for step in range(steps):
        picks = [None if len(s.prep.grid) <= voxels_per_frame else
                 np.sort(rng.choice(len(s.prep.grid), voxels_per_frame, replace=False)) for s in samples]
        total, terms = stage1_loss(net, samples, picks)
        opt.zero_grad()
        ad.backward(total, net.parameters())
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * step / steps))  # cosine decay
        opt.step()
        history.append(terms)
        if log and step % 50 == 0:
            log(f"stage1 step {step}: " + " ".join(f"{k}={v:.4f}" for k, v in terms.items()))
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return net, history


# -- predictors ---------------------------------------------------------------------

class LearnedStage1:
    def __init__(self, head: InitialRootHead, net: Stage1Net, cfg: Stage1Config | None = None):
        self.head, self.net, self.cfg = head, net, cfg or Stage1Config()

    def run(self, frame) -> Stage1Result:
        scene, camera, feature_map = frame.scene, frame.camera, frame.feature_map
        t0 = time.perf_counter()
        maps = self.head.predict_maps(frame)
        root0 = initial_root_from_maps(maps, camera)
        flags = []
        try:
            prep = prepare_stage1(scene, camera, feature_map, root0, self.cfg)
        except EmptyGrid:
            labels = ContactLabels(np.zeros(len(scene.points), dtype=np.int64))
            return Stage1Result(root0, Root3D.from_xyz(root0.xyz, "refined"), labels,
                                np.zeros((0, 3)), np.zeros(0, np.int64), flags=["empty-roi"])
        with ad.no_grad():
            refined, conf, scores, _, _, _ = stage1_forward(self.net, [prep])
        prep.vf.refined_offsets = refined.data
        prep.vf.confidences = conf.data
        prep.vf.category_scores = scores.data
        root = refine_root(prep.vf, prep.grid, camera)
        return _finish(scene, camera, prep, root, flags, {"stage1": time.perf_counter() - t0})


class OracleStage1:
    """Ground truth in the same result shape; toggles choose which half is oracle.

    ``learned`` fills whichever half is not oracle (root, contacts, or neither).
    """

    def __init__(self, body, oracle_root=True, oracle_contact=True, learned: LearnedStage1 | None = None,
                 noise_sigma=0.0, seed=0, threshold=0.07):
        self.body = body
        self.oracle_root, self.oracle_contact = oracle_root, oracle_contact
        self.learned = learned
        self.noise_sigma, self.seed, self.threshold = noise_sigma, seed, threshold

    def run(self, frame):
        t0 = time.perf_counter()
        root, labels = oracle_stage1(frame.scene, frame.body_gt, frame.camera, self.body,
                                     self.noise_sigma, self.seed + frame.seed, self.threshold)
        base = self.learned.run(frame) if self.learned is not None and not (
            self.oracle_root and self.oracle_contact) else None
        if not self.oracle_root:
            root = base.root_refined
        if not self.oracle_contact:
            labels = base.scene_labels
        cats = labels.categories
        m = cats != 0
        res = Stage1Result(base.root_initial if base else root, root, labels,
                           frame.scene.points[m], cats[m], flags=["oracle"])
        res.timings["stage1"] = time.perf_counter() - t0
        return res
