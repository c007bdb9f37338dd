"""Scene geometry: triangle mesh with signed-distance queries, point cloud,
sparse voxelization and root-anchored region-of-interest selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyScene

log = logging.getLogger(__name__)

# closest-feature codes returned by closest_points_on_triangles
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)
_CHUNK = 2048


def closest_points_on_triangles(p, a, b, c):
    """Closest point on each triangle to each query (Ericson's region test).

    ``p`` is ``(Q, 3)``; ``a, b, c`` are ``(T, 3)``. Returns the closest
    points ``(Q, T, 3)`` and the feature code ``(Q, T)`` of the region the
    closest point lies in.
    """
    p = p[:, None, :]
    ab, ac = (b - a)[None], (c - a)[None]
    ap = p - a[None]
    d1 = np.einsum("qtk,qtk->qt", np.broadcast_to(ab, ap.shape), ap)
    d2 = np.einsum("qtk,qtk->qt", np.broadcast_to(ac, ap.shape), ap)
    bp = p - b[None]
    d3 = np.einsum("qtk,qtk->qt", np.broadcast_to(ab, bp.shape), bp)
    d4 = np.einsum("qtk,qtk->qt", np.broadcast_to(ac, bp.shape), bp)
    cp = p - c[None]
    d5 = np.einsum("qtk,qtk->qt", np.broadcast_to(ab, cp.shape), cp)
    d6 = np.einsum("qtk,qtk->qt", np.broadcast_to(ac, cp.shape), cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = d1.shape
    code = np.full(shape, FACE, dtype=np.int8)
    # barycentric weights of b and c; a gets the rest
    wv = np.zeros(shape)
    ww = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)

    def assign(mask, cd, v, w):
        m = mask & ~done
        code[m] = cd
        wv[m] = v[m] if isinstance(v, np.ndarray) else v
        ww[m] = w[m] if isinstance(w, np.ndarray) else w
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), VERT_A, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), VERT_B, 1.0, 0.0)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), EDGE_AB, d1 / (d1 - d3), 0.0)
        assign((d6 >= 0) & (d5 <= d6), VERT_C, 0.0, 1.0)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), EDGE_CA, 0.0, d2 / (d2 - d6))
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), EDGE_BC, 1.0 - t_bc, t_bc)
        denom = 1.0 / (va + vb + vc)
        assign(np.ones(shape, dtype=bool), FACE, vb * denom, vc * denom)
    closest = a[None] + wv[..., None] * ab + ww[..., None] * ac
    return closest, code


@dataclass
class _Component:
    tri: np.ndarray  # (T, 3) global vertex ids
    normals: np.ndarray  # (T, 7, 3) pseudo-normal per feature code


def _pseudo_normals(V, F):
    """Angle-weighted pseudo-normals for every (triangle, feature) pair."""
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    fn = np.cross(b - a, c - a)
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)

    def angle(p, q, r):
        u, v = q - p, r - p
        cosv = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        return np.arccos(np.clip(cosv, -1.0, 1.0))

    vn = np.zeros_like(V)
    for k, (p, q, r) in enumerate(((a, b, c), (b, c, a), (c, a, b))):
        np.add.at(vn, F[:, k], angle(p, q, r)[:, None] * fn)
    nrm = np.linalg.norm(vn, axis=1, keepdims=True)
    vn = np.divide(vn, nrm, out=np.zeros_like(vn), where=nrm > 0)

    edges = {}
    for t, (i, j, k) in enumerate(F):
        for e in ((i, j), (j, k), (k, i)):
            edges.setdefault(tuple(sorted(e)), []).append(t)
    out = np.empty((len(F), 7, 3))
    out[:, FACE] = fn
    out[:, VERT_A] = vn[F[:, 0]]
    out[:, VERT_B] = vn[F[:, 1]]
    out[:, VERT_C] = vn[F[:, 2]]
    for t, (i, j, k) in enumerate(F):
        for code, e in ((EDGE_AB, (i, j)), (EDGE_BC, (j, k)), (EDGE_CA, (k, i))):
            s = fn[edges[tuple(sorted(e))]].sum(axis=0)
            n = np.linalg.norm(s)
            # opposite faces cancel only on a mis-oriented mesh, rejected by the caller
            out[t, code] = s / n if n > 0 else fn[t]
    return out, edges


def _components(F, n_vertices):
    parent = np.arange(n_vertices)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j, k in F:
        for u, v in ((i, j), (j, k)):
            ru, rv = find(u), find(v)
            if ru != rv:
                parent[max(ru, rv)] = min(ru, rv)
    roots = np.array([find(i) for i in F[:, 0]])
    return [np.flatnonzero(roots == r) for r in np.unique(roots)]


@dataclass(eq=False)
class SceneModel:
    """Triangle mesh plus sampled point cloud. Immutable after construction.

    Signed distance is negative inside. Disconnected mesh components are
    treated as separate solids and combined by taking the minimum.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        V, F = self.vertices, self.triangles
        if len(F):
            if F.min() < 0 or F.max() >= len(V):
                raise ConfigError("triangle index out of range")
            area = 0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]), axis=1)
            if np.any(area < 1e-12):
                raise ConfigError(f"{int(np.sum(area < 1e-12))} degenerate triangle(s)")
            normals, edges = _pseudo_normals(V, F)
            self._check_orientation(F, edges)
            self._components = [_Component(F[ids], normals[ids]) for ids in _components(F, len(V))]
        else:
            self._components = []
        for arr in (self.vertices, self.triangles, self.points):
            arr.setflags(write=False)

    @staticmethod
    def _check_orientation(F, edges):
        directed = {}
        for i, j, k in F:
            for e in ((i, j), (j, k), (k, i)):
                directed[e] = directed.get(e, 0) + 1
        if any(n > 1 for n in directed.values()):
            raise ConfigError("inconsistently oriented triangles")
        nonmanifold = sum(1 for ts in edges.values() if len(ts) > 2)
        if nonmanifold:
            log.warning("scene mesh has %d non-manifold edges", nonmanifold)

    def signed_distance(self, p, return_gradient=False):
        return signed_distance(self, p, return_gradient)

    def transformed(self, R, t) -> "SceneModel":
        R = np.asarray(R, dtype=np.float64)
        return SceneModel(self.vertices @ R.T + t, self.triangles, self.points @ R.T + t)


def _component_sdf(V, comp, q):
    a, b, c = V[comp.tri[:, 0]], V[comp.tri[:, 1]], V[comp.tri[:, 2]]
    closest, code = closest_points_on_triangles(q, a, b, c)
    diff = q[:, None, :] - closest
    d2 = np.einsum("qtk,qtk->qt", diff, diff)
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(q))
    dist = np.sqrt(d2[rows, best])
    n = comp.normals[best, code[rows, best]]
    vec = diff[rows, best]
    sign = np.where(np.einsum("ij,ij->i", vec, n) < 0, -1.0, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = np.where(dist[:, None] > 1e-12, sign[:, None] * vec / dist[:, None], n)
    return sign * dist, grad


def signed_distance(scene: SceneModel, p, return_gradient=False):
    """Signed distance from point(s) to the scene mesh (exhaustive search).

    With ``return_gradient`` also returns the spatial gradient of the
    distance field (a unit vector per query).
    """
    if len(scene.triangles) == 0:
        raise EmptyScene("scene has no triangles")
    q = np.asarray(p, dtype=np.float64)
    scalar = q.ndim == 1
    q = q.reshape(-1, 3)
    sd = np.full(len(q), np.inf)
    grad = np.zeros((len(q), 3))
    for start in range(0, len(q), _CHUNK):
        qs = q[start:start + _CHUNK]
        s_best = np.full(len(qs), np.inf)
        g_best = np.zeros((len(qs), 3))
        for comp in scene._components:
            s, g = _component_sdf(scene.vertices, comp, qs)
            take = s < s_best
            s_best = np.where(take, s, s_best)
            g_best = np.where(take[:, None], g, g_best)
        sd[start:start + len(qs)] = s_best
        grad[start:start + len(qs)] = g_best
    if scalar:
        sd, grad = float(sd[0]), grad[0]
    return (sd, grad) if return_gradient else sd


def box_sdf(p, lo, hi):
    """Closed-form signed distance to an axis-aligned box."""
    p = np.asarray(p, dtype=np.float64)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    c, h = (lo + hi) / 2, (hi - lo) / 2
    q = np.abs(p - c) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def ray_scene_depth(scene: SceneModel, origin, direction):
    """First hit of a ray with the scene: ``(distance, triangle index)`` or ``(inf, -1)``."""
    V, F = scene.vertices, scene.triangles
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    e1, e2 = b - a, c - a
    d = np.asarray(direction, dtype=np.float64)
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = np.asarray(origin, dtype=np.float64) - a
    u = inv * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = inv * (qv @ d)
    t = inv * np.einsum("ij,ij->i", e2, qv)
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
    if not hit.any():
        return np.inf, -1
    t = np.where(hit, t, np.inf)
    k = int(np.argmin(t))
    return float(t[k]), k


# -- voxels ---------------------------------------------------------------

@dataclass(eq=False)
class SparseVoxelGrid:
    voxel_size: float
    origin: np.ndarray
    indices: np.ndarray  # (V, 3) int
    centers: np.ndarray  # (V, 3)
    point_voxel: np.ndarray  # (N,) voxel id of every input point
    points: np.ndarray  # (N, 3) the voxelized points

    def __len__(self):
        return len(self.indices)

    @property
    def members(self):
        order = np.argsort(self.point_voxel, kind="stable")
        splits = np.cumsum(np.bincount(self.point_voxel, minlength=len(self)))[:-1]
        return np.split(order, splits)

    def member_means(self):
        """Mean of member points per voxel."""
        sums = np.zeros((len(self), 3))
        np.add.at(sums, self.point_voxel, self.points)
        counts = np.bincount(self.point_voxel, minlength=len(self))
        return sums / counts[:, None]


def default_origin(points, voxel_size):
    return np.floor(np.asarray(points).min(axis=0) / voxel_size) * voxel_size


def voxelize(points, voxel_size, origin=None) -> SparseVoxelGrid:
    if not voxel_size > 0:
        raise ConfigError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if origin is None:
        origin = default_origin(pts, voxel_size) if len(pts) else np.zeros(3)
    origin = np.asarray(origin, dtype=np.float64)
    if len(pts) == 0:
        return SparseVoxelGrid(voxel_size, origin, np.zeros((0, 3), np.int64), np.zeros((0, 3)),
                               np.zeros(0, np.int64), pts)
    idx = np.floor((pts - origin) / voxel_size).astype(np.int64)
    # np.unique over rows sorts lexicographically
    uniq, inverse = np.unique(idx, axis=0, return_inverse=True)
    centers = origin + (uniq + 0.5) * voxel_size
    return SparseVoxelGrid(float(voxel_size), origin, uniq, centers, inverse.reshape(-1), pts)


def roi_select(points, root, gamma1, gamma2, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Indices of points within ``gamma1`` of the root or of the two extra
    anchors ``root +- gamma2 * axis``; order preserving."""
    if not gamma1 > 0 or gamma2 < 0:
        raise ConfigError("need gamma1 > 0 and gamma2 >= 0")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    root = np.asarray(root, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    keep = np.zeros(len(pts), dtype=bool)
    for anchor in (root, root + gamma2 * axis, root - gamma2 * axis):
        keep |= np.linalg.norm(pts - anchor, axis=1) <= gamma1
    return np.flatnonzero(keep)
