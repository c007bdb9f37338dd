"""Scene-aware optimization of a recovered mesh (post-processing baseline).

The body is refined over global translation and scale, and optionally
small per-part rotations, by minimizing a weighted sum of reprojection,
penetration, contact and ordinal-depth energies. Everything is evaluated
in the camera frame so that a rigid move of scene and camera together
leaves the optimization unchanged.

Translation and scale are parametrized as

    root  = exp(l) * (xn, yn, 1)
    scale = exp(b) * exp(l) / Z0

so moving ``l`` slides the body along its viewing ray at constant image
size. Steps are preconditioned by the Gauss-Newton diagonal of the
reprojection term plus a fixed damping.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .body import JOINT_NAMES, SKELETON, BodyModel
from .errors import ConfigError, Diverged, MaxIterations, NonFiniteError
from .geometry import Camera
from .scene import SceneModel, ray_scene_depth

VARIABLE_SETS = ("translation", "translation+scale", "translation+scale+pose")
TERMS = ("reproj", "pen", "contact", "ordinal")


@dataclass
class SAOptConfig:
    w_reproj: float = 1.0
    w_pen: float = 10.0
    w_contact: float = 10.0
    w_ordinal: float = 1.0
    max_iters: int = 200
    step: float = 1.0
    max_halvings: int = 40
    tol_energy: float = 1e-8
    tol_step: float = 1e-6  # metres of root motion
    variables: str = "translation+scale"
    pen_sharpness: float = 100.0
    contact_threshold: float = 0.07
    damping: float = 1e3
    max_move: float = 0.05  # cap on root motion per iteration (metres)

    def __post_init__(self):
        if min(self.w_reproj, self.w_pen, self.w_contact, self.w_ordinal) < 0:
            raise ConfigError("energy weights must be nonnegative")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.variables not in VARIABLE_SETS:
            raise ConfigError(f"variables must be one of {VARIABLE_SETS}, got {self.variables!r}")
        if not (self.step > 0 and self.damping > 0 and self.contact_threshold > 0 and self.max_move > 0):
            raise ConfigError("step, damping, max_move and contact threshold must be positive")

    @property
    def weights(self):
        return dict(reproj=self.w_reproj, pen=self.w_pen, contact=self.w_contact, ordinal=self.w_ordinal)


@dataclass
class SAOptState:
    """Optimization variables (see the module docstring)."""

    xn: float
    yn: float
    log_depth: float
    log_scale: float = 0.0
    pose: np.ndarray | None = None  # (n_joints, 3) rotation vectors

    def vector(self, config: SAOptConfig):
        v = [self.xn, self.yn, self.log_depth]
        if config.variables != "translation":
            v.append(self.log_scale)
        v = np.array(v, dtype=np.float64)
        if config.variables.endswith("pose"):
            pose = np.zeros((len(SKELETON), 3)) if self.pose is None else self.pose
            v = np.concatenate([v, np.ravel(pose)])
        return v

    @classmethod
    def from_vector(cls, v, config: SAOptConfig):
        v = np.asarray(v, dtype=np.float64)
        b = float(v[3]) if config.variables != "translation" else 0.0
        pose = v[4:].reshape(-1, 3).copy() if config.variables.endswith("pose") else None
        return cls(float(v[0]), float(v[1]), float(v[2]), b, pose)

    @classmethod
    def from_root(cls, root_cam):
        x, y, z = np.asarray(root_cam, dtype=np.float64)
        return cls(x / z, y / z, float(np.log(z)))

    @property
    def root(self):
        return np.exp(self.log_depth) * np.array([self.xn, self.yn, 1.0])


@dataclass
class SAOptProblem:
    """Constants of one fit, all in the camera frame."""

    mesh_rc: np.ndarray  # root-centred initial vertices
    depth0: float
    camera: Camera
    scene: SceneModel
    contact_points: np.ndarray
    contact_categories: np.ndarray
    joints2d: np.ndarray
    body: BodyModel
    config: SAOptConfig

    @classmethod
    def build(cls, verts_cam, root_cam, camera, scene, contact_points, contact_categories,
              joints2d, body, config=None):
        """``scene`` and ``contact_points`` are given in the scene frame."""
        config = config or SAOptConfig()
        verts_cam = np.asarray(verts_cam, dtype=np.float64)
        root_cam = np.asarray(root_cam, dtype=np.float64)
        pts = np.asarray(contact_points, dtype=np.float64).reshape(-1, 3)
        cats = np.asarray(contact_categories, dtype=np.int64).reshape(-1)
        keep = cats > 0
        if config.variables.endswith("pose") and body.part_of_vertex is None:
            raise ConfigError("per-part rotations need the procedural toy body")
        return cls(verts_cam - root_cam, float(root_cam[2]), camera,
                   scene.transformed(camera.R, camera.t), camera.to_camera(pts[keep]) if keep.any()
                   else np.zeros((0, 3)), cats[keep], np.asarray(joints2d, dtype=np.float64), body, config)


@dataclass
class SAOptResult:
    state: SAOptState
    vertices: np.ndarray  # camera frame
    trace: list
    iterations: int
    converged: bool
    flags: list = field(default_factory=list)

    def vertices_scene(self, camera: Camera):
        return camera.to_scene(self.vertices)


# -- differentiable pieces -----------------------------------------------------

_GENERATORS = np.array([
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=np.float64)


def _rotation(w):
    """Rodrigues rotation matrix of a rotation-vector tensor ``(3,)``."""
    K = w[0] * _GENERATORS[0] + w[1] * _GENERATORS[1] + w[2] * _GENERATORS[2]
    theta2 = (w * w).sum() + 1e-12
    theta = ad.sqrt(theta2)
    a = ad.sin(theta) / theta
    b = (1.0 - ad.cos(theta)) / theta2
    return K * a + ad.matmul(K, K) * b + np.eye(3)


def _posed(problem: SAOptProblem, pose):
    """Per-part rotations about the initial mesh's own joints."""
    body = problem.body
    V = problem.mesh_rc
    J0 = body.dense_regressor @ V
    jidx = {n: i for i, n in enumerate(JOINT_NAMES)}
    G, P = {}, {}
    for i, (name, (parent, _)) in enumerate(SKELETON.items()):
        R = _rotation(pose[i])
        j = J0[jidx[name]]
        if parent is None:
            G[name], P[name] = R, ad.as_tensor(j)
        else:
            G[name] = ad.matmul(G[parent], R)
            P[name] = ad.matmul(G[parent], j - J0[jidx[parent]]) + P[parent]
    pieces, order = [], []
    for pid, joint in enumerate(body.part_joint):
        ids = np.flatnonzero(body.part_of_vertex == pid)
        local = V[ids] - J0[jidx[joint]]
        pieces.append(ad.matmul(local, ad.swapaxes(G[joint])) + P[joint])
        order.append(ids)
    inv = np.argsort(np.concatenate(order))
    return ad.concat(pieces, axis=0)[inv]


def _vertices(problem: SAOptProblem, x):
    """Camera-frame vertices as a tensor function of the variable vector."""
    cfg = problem.config
    depth = ad.exp(x[2])
    ray = ad.concat([x[0:2], ad.as_tensor(np.ones(1))], axis=0)
    root = ray * depth
    base = _posed(problem, x[4:].reshape(-1, 3)) if cfg.variables.endswith("pose") else problem.mesh_rc
    if cfg.variables == "translation":
        return ad.as_tensor(base) + root, root
    scale = ad.exp(x[3]) * depth * (1.0 / problem.depth0)
    return ad.as_tensor(base) * scale + root, root


def _scene_sdf(scene: SceneModel, V):
    sd, grad = scene.signed_distance(V.data, return_gradient=True)
    return ad.Tensor.op(sd, (V,), lambda g: (g[:, None] * grad,))


def _reproj(problem, V):
    J = ad.matmul(problem.body.dense_regressor, V)
    cam = problem.camera
    z = J[:, 2:3]
    uv = J[:, 0:2] / z * cam.f + np.array([cam.cx, cam.cy])
    r = uv - problem.joints2d
    return (r * r).sum() * (1.0 / len(problem.joints2d))


def _penetration(problem, V):
    depth = ad.relu(-_scene_sdf(problem.scene, V))
    soft = 1.0 - ad.exp(depth * -problem.config.pen_sharpness)
    return (depth * soft).sum()


def _contact(problem, V):
    """Mean hinge on the distance from each contact point to its region."""
    pts, cats = problem.contact_points, problem.contact_categories
    if len(pts) == 0:
        return ad.as_tensor(0.0)
    nearest = np.empty(len(pts), dtype=np.int64)
    for c in np.unique(cats):
        ids = problem.body.region_vertices(c - 1)
        sel = cats == c
        d2 = ((pts[sel][:, None, :] - V.data[ids][None]) ** 2).sum(-1)
        nearest[sel] = ids[np.argmin(d2, axis=1)]
    diff = V[nearest] - pts
    d = ad.sqrt((diff * diff).sum(axis=1) + 1e-12)
    return ad.relu(d - problem.config.contact_threshold).mean()


def _ordinal(problem, root):
    """Root must not lie behind the first scene surface along its ray."""
    dist = float(np.linalg.norm(root.data))
    t, tri = ray_scene_depth(problem.scene, np.zeros(3), root.data / dist)
    if tri < 0:
        return ad.as_tensor(0.0)
    F, Vs = problem.scene.triangles[tri], problem.scene.vertices
    n = np.cross(Vs[F[1]] - Vs[F[0]], Vs[F[2]] - Vs[F[0]])
    c = float(n @ Vs[F[0]])
    # distance to the plane along the current ray: c * |root| / (n . root)
    norm = ad.sqrt((root * root).sum())
    hit = norm * c / (root * n).sum()
    return ad.relu(norm - hit)


def kink_margin(problem: SAOptProblem, x) -> float:
    """Smallest distance (metres) from any nonsmooth switch of the energy:
    surface crossings, contact hinges, nearest-vertex ties and the ordinal hinge."""
    with ad.no_grad():
        V, root = _vertices(problem, ad.as_tensor(np.asarray(x, dtype=np.float64)))
    V, root = V.data, root.data
    margins = [np.abs(problem.scene.signed_distance(V)).min()]
    pts, cats = problem.contact_points, problem.contact_categories
    for c in np.unique(cats):
        ids = problem.body.region_vertices(c - 1)
        d = np.sqrt(((pts[cats == c][:, None, :] - V[ids][None]) ** 2).sum(-1))
        d.sort(axis=1)
        margins.append(np.abs(d[:, 0] - problem.config.contact_threshold).min())
        if d.shape[1] > 1:
            margins.append((d[:, 1] - d[:, 0]).min())
    dist = float(np.linalg.norm(root))
    t, tri = ray_scene_depth(problem.scene, np.zeros(3), root / dist)
    if tri >= 0:
        margins.append(abs(dist - t))
    return float(min(margins))


def energy_tensor(problem: SAOptProblem, x):
    V, root = _vertices(problem, x)
    w = problem.config.weights
    terms = {"reproj": _reproj(problem, V)}
    terms["pen"] = _penetration(problem, V) if w["pen"] > 0 else ad.as_tensor(0.0)
    terms["contact"] = _contact(problem, V) if w["contact"] > 0 else ad.as_tensor(0.0)
    terms["ordinal"] = _ordinal(problem, root) if w["ordinal"] > 0 else ad.as_tensor(0.0)
    total = None
    for k in TERMS:
        t = terms[k] * w[k]
        total = t if total is None else total + t
    return total, {k: float(v.data) for k, v in terms.items()}, V


def energy(state: SAOptState, problem: SAOptProblem):
    """Total energy and the unweighted per-term breakdown."""
    with ad.no_grad():
        total, parts, _ = energy_tensor(problem, ad.as_tensor(state.vector(problem.config)))
    return float(total.data), parts


def _value_and_grad(problem, x):
    xt = ad.parameter(x.copy())
    total, parts, V = energy_tensor(problem, xt)
    ad.backward(total)
    g = np.zeros_like(x) if xt.grad is None else xt.grad
    return float(total.data), parts, g, V.data


def _reproj_diag(problem, x, eps=1e-6):
    """Gauss-Newton diagonal of the reprojection term by central differences."""
    def residual(v):
        with ad.no_grad():
            V, _ = _vertices(problem, ad.as_tensor(v))
        J = problem.body.dense_regressor @ V.data
        cam = problem.camera
        return (J[:, :2] / J[:, 2:3] * cam.f + [cam.cx, cam.cy]).ravel()

    diag = np.empty(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = eps
        col = (residual(x + e) - residual(x - e)) / (2 * eps)
        diag[i] = 2.0 * col @ col / len(problem.joints2d)
    return diag


def fit(problem: SAOptProblem, init: SAOptState | None = None, strict=False) -> SAOptResult:
    """Preconditioned descent with step halving; the trace never increases.

    Hitting ``max_iters`` returns the best state with a ``max-iterations``
    flag, or raises :class:`MaxIterations` when ``strict``.
    """
    cfg = problem.config
    state = init or SAOptState.from_root(np.array([0.0, 0.0, problem.depth0]))
    x = state.vector(cfg)
    try:
        E, parts, g, V = _value_and_grad(problem, x)
    except NonFiniteError as exc:
        raise Diverged(f"initial energy is not finite ({exc})") from exc
    if not np.isfinite(E):
        raise Diverged("initial energy is not finite")
    precond = cfg.w_reproj * _reproj_diag(problem, x) + cfg.damping
    trace = [dict(iteration=0, total=E, **parts, step=0.0)]
    flags, converged, it = [], False, 0
    for it in range(1, cfg.max_iters + 1):
        direction = -g / precond
        root = SAOptState.from_vector(x, cfg).root
        move = np.linalg.norm(SAOptState.from_vector(x + cfg.step * direction, cfg).root - root)
        if move > cfg.max_move:
            direction *= cfg.max_move / move
        alpha, accepted = cfg.step, None
        for _ in range(cfg.max_halvings):
            x_new = x + alpha * direction
            try:
                with ad.no_grad():
                    E_new = float(energy_tensor(problem, ad.as_tensor(x_new))[0].data)
            except NonFiniteError:  # overshoot into an overflow: treat as a rejected step
                E_new = np.inf
            if np.isfinite(E_new) and E_new <= E:
                accepted = x_new
                break
            alpha *= 0.5
        if accepted is None:
            converged = True
            it -= 1
            break
        root_move = np.linalg.norm(SAOptState.from_vector(accepted, cfg).root - root)
        drop = E - E_new
        x = accepted
        E, parts, g, V = _value_and_grad(problem, x)
        trace.append(dict(iteration=it, total=E, **parts, step=alpha))
        if drop < cfg.tol_energy or root_move < cfg.tol_step:
            converged = True
            break
    if not converged:
        if strict:
            raise MaxIterations(f"no convergence after {cfg.max_iters} iterations")
        flags.append("max-iterations")
    return SAOptResult(SAOptState.from_vector(x, cfg), V, trace, it, converged, flags)


def fit_mesh(verts_cam, root_cam, camera, scene, contact_points, contact_categories, joints2d,
             body, config=None, strict=False) -> SAOptResult:
    """Convenience wrapper: build the problem and start from the given root."""
    problem = SAOptProblem.build(verts_cam, root_cam, camera, scene, contact_points,
                                 contact_categories, joints2d, body, config)
    init = SAOptState.from_root(root_cam)
    return fit(problem, init, strict)


def trace_monotone(trace) -> bool:
    totals = [r["total"] for r in trace]
    return all(b <= a for a, b in zip(totals, totals[1:]))


def write_trace(path, trace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ("iteration", "total") + TERMS + ("step",)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in trace:
            w.writerow([r["iteration"]] + [f"{r[k]:.10g}" for k in cols[1:]])


def config_dict(config: SAOptConfig) -> dict:
    return asdict(config)
