"""Stage 2: transformer trunk over body-vertex tokens plus a parallel scene
branch over contact points, joined by cross-attention.

Everything runs in root-centred camera coordinates. Both branches finish
with one shared linear regressor from tokens to 3D coordinates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .body import N_REGIONS, BodyModel
from .errors import ConfigError, EmptyRegion, NonFiniteError, NonFiniteLoss
from .nn import SGD, Adam, LayerNorm, Linear, Module


@dataclass
class MeshNetConfig:
    dims: tuple = (64, 32, 16)
    feature_dim: int = 196
    n_vertices: int = 432
    point_cap: int = 512

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if not self.dims:
            raise ConfigError("mesh network needs at least one block")
        if any(b > a for a, b in zip(self.dims[:-1], self.dims[1:])):
            raise ConfigError("block dims must be non-increasing")
        if self.point_cap < 1:
            raise ConfigError("point cap must be positive")


def fourier_encoding(xyz, n_freq=6):
    """``sin``/``cos`` of the coordinates at octave frequencies (metres)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    ang = xyz[..., None] * freqs  # (..., 3, F)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return np.concatenate([xyz, enc.reshape(xyz.shape[:-1] + (-1,))], axis=-1)


def region_pool_matrix(body: BodyModel) -> np.ndarray:
    """``(7, N)`` row-stochastic matrix averaging vertices of each region."""
    A = np.zeros((N_REGIONS, body.n_vertices))
    for k in range(N_REGIONS):
        ids = np.flatnonzero(body.region_of_vertex == k)
        if len(ids) == 0:
            raise EmptyRegion(f"region {k} has no vertices")
        A[k, ids] = 1.0 / len(ids)
    return A


def pool_region_tokens(vertex_tokens, body: BodyModel):
    """Mean token per contact region; accepts arrays or tensors, batched or not."""
    A = region_pool_matrix(body)
    if isinstance(vertex_tokens, ad.Tensor):
        return ad.matmul(A, vertex_tokens)
    return A @ np.asarray(vertex_tokens, dtype=np.float64)


def farthest_point_order(points, k):
    """Indices of ``k`` points by farthest-point sampling.

    Starts from the point farthest from the centroid (lexicographic tie
    break), so the chosen set does not depend on input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k >= n:
        return np.arange(n)
    d0 = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    cand = np.flatnonzero(d0 == d0.max())
    start = cand[np.lexsort(pts[cand].T[::-1])[0]]
    chosen = [start]
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        far = np.flatnonzero(dist == dist[nxt])
        if len(far) > 1:
            nxt = int(far[np.lexsort(pts[far].T[::-1])[0]])
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.sort(np.array(chosen))


class Attention(Module):
    """Single-head linear attention with bias-free projections."""

    def __init__(self, d, rng):
        self.q = Linear(d, d, rng, bias=False)
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng, bias=False)
        self.o = Linear(d, d, rng, bias=False, gain=0.5)

    def __call__(self, x, ctx=None, key_mask=None):
        ctx = x if ctx is None else ctx
        return self.o(ad.linear_attention(self.q(x), self.k(ctx), self.v(ctx), key_mask=key_mask))


class FeedForward(Module):
    def __init__(self, d, rng, expand=2):
        self.a = Linear(d, expand * d, rng)
        self.b = Linear(expand * d, d, rng, gain=0.5)

    def __call__(self, x):
        return self.b(ad.gelu(self.a(x)))


class Block(Module):
    def __init__(self, d_prev, d, rng):
        self.proj = Linear(d_prev + 3, d, rng)
        self.ln_self, self.attn = LayerNorm(d), Attention(d, rng)
        self.ln_q, self.ln_kv, self.cross = LayerNorm(d), LayerNorm(d), Attention(d, rng)
        self.ln_ff, self.ff = LayerNorm(d), FeedForward(d, rng)
        # scene branch
        self.s_proj = Linear(d_prev + 3, d, rng)
        self.s_ln_self, self.s_attn = LayerNorm(d), Attention(d, rng)
        self.s_ln_ff, self.s_ff = LayerNorm(d), FeedForward(d, rng)

    def scene(self, S, pos, mask):
        S = self.s_proj(ad.concat([S, pos], axis=-1))
        S = S + self.s_attn(self.s_ln_self(S), key_mask=mask)
        return S + self.s_ff(self.s_ln_ff(S))

    def trunk(self, T, template, S=None, mask=None, gate=None):
        T = self.proj(ad.concat([T, template], axis=-1))
        T = T + self.attn(self.ln_self(T))
        if S is not None:
            x = self.cross(self.ln_q(T), self.ln_kv(S), key_mask=mask)
            T = T + (x if gate is None else x * gate)
        return T + self.ff(self.ln_ff(T))


@dataclass(eq=False)
class MeshOutput:
    vertices: np.ndarray  # (N, 3) root-centred camera frame
    scene_points: np.ndarray  # (K, 3) reconstructed contact points, root-centred
    used_points: np.ndarray  # indices of the input points kept after subsampling
    flags: list = field(default_factory=list)


class MeshNet(Module):
    def __init__(self, body: BodyModel, config: MeshNetConfig | None = None, seed=0):
        cfg = config or MeshNetConfig(n_vertices=body.n_vertices)
        if cfg.n_vertices != body.n_vertices:
            raise ConfigError(f"config expects {cfg.n_vertices} vertices, body has {body.n_vertices}")
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.template = body.template - body.dense_regressor[0] @ body.template
        self.pool = region_pool_matrix(body)
        d0 = cfg.dims[0]
        self.pos_code = fourier_encoding(self.template)
        self.embed_pos = Linear(self.pos_code.shape[1], d0, rng)
        self.embed_feat = Linear(cfg.feature_dim, d0, rng, bias=False)
        self.blocks = [Block(a, b, rng) for a, b in zip((d0,) + cfg.dims[:-1], cfg.dims)]
        self.regressor = Linear(cfg.dims[-1], 3, rng)

    # -- batched core -------------------------------------------------------------

    def forward_batch(self, features, points=None, categories=None, mask=None):
        """``features`` (B, F); ``points`` (B, K, 3) root-centred; ``categories``
        (B, K) in 1..7; ``mask`` (B, K) marks real points.

        Returns tensors (vertices (B, N, 3), reconstructed points (B, K, 3) or None).
        """
        F = np.asarray(features, dtype=np.float64)
        B = F.shape[0]
        N = len(self.template)
        tmpl = np.broadcast_to(self.template, (B, N, 3)).copy()
        T = self.embed_pos(self.pos_code) + self.embed_feat(F).reshape(B, 1, -1)
        S = recon = None
        gate = None
        if points is not None and np.shape(points)[1] > 0:
            pts = np.asarray(points, dtype=np.float64)
            mask = np.ones(pts.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
            onehot = np.zeros(pts.shape[:2] + (N_REGIONS,))
            cats = np.asarray(categories, dtype=np.int64)
            valid = (cats >= 1) & (cats <= N_REGIONS) & (mask > 0)
            b_idx, k_idx = np.nonzero(valid)
            onehot[b_idx, k_idx, cats[valid] - 1] = 1.0
            S = ad.matmul(onehot, ad.matmul(self.pool, T))
            gate = (mask.sum(axis=1) > 0).astype(np.float64).reshape(B, 1, 1)
        for blk in self.blocks:
            if S is not None:
                S = blk.scene(S, pts, mask)
            T = blk.trunk(T, tmpl, S, mask, gate)
        verts = self.regressor(T)
        if S is not None:
            recon = self.regressor(S)
        return verts, recon

    # -- single frame ------------------------------------------------------------------

    def forward(self, image_feature, points=None, categories=None) -> MeshOutput:
        """Root-centred body mesh from a global image feature and root-centred
        contact points. No points means trunk-only mode (flagged)."""
        pts = np.zeros((0, 3)) if points is None else np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cats = np.zeros(0, np.int64) if categories is None else np.asarray(categories, dtype=np.int64)
        flags = []
        keep = np.arange(len(pts))
        if len(pts) > self.config.point_cap:
            keep = farthest_point_order(pts, self.config.point_cap)
            flags.append("subsampled")
        with ad.no_grad():
            if len(keep) == 0:
                flags.append("no-contact-points")
                verts, _ = self.forward_batch(np.asarray(image_feature)[None])
                return MeshOutput(verts.data[0], np.zeros((0, 3)), keep, flags)
            verts, recon = self.forward_batch(np.asarray(image_feature)[None], pts[keep][None], cats[keep][None])
        return MeshOutput(verts.data[0], recon.data[0], keep, flags)

    def forward_trunk(self, image_feature) -> np.ndarray:
        with ad.no_grad():
            verts, _ = self.forward_batch(np.asarray(image_feature)[None])
        return verts.data[0]


# -- training -----------------------------------------------------------------------

@dataclass(eq=False)
class MeshSample:
    feature: np.ndarray  # (F,)
    root: np.ndarray  # (3,) camera frame root the inputs are centred on
    points: np.ndarray  # (K, 3) root-centred contact points
    categories: np.ndarray  # (K,)
    gt_verts: np.ndarray  # (N, 3) camera frame


def make_mesh_sample(frame, stage1, cap=512, use_contacts=True):
    """Training/inference sample from a frame and a stage-1 result."""
    cam = frame.camera
    root = stage1.root_refined.xyz
    if use_contacts and len(stage1.contact_points):
        pts = cam.to_camera(stage1.contact_points) - root
        cats = np.asarray(stage1.contact_categories)
        if len(pts) > cap:
            keep = farthest_point_order(pts, cap)
            pts, cats = pts[keep], cats[keep]
    else:
        pts, cats = np.zeros((0, 3)), np.zeros(0, np.int64)
    return MeshSample(frame.image_feature, root, pts, cats, frame.body_camera())


def collate(samples):
    B = len(samples)
    K = max((len(s.points) for s in samples), default=0)
    F = np.array([s.feature for s in samples])
    pts = np.zeros((B, K, 3))
    cats = np.zeros((B, K), dtype=np.int64)
    mask = np.zeros((B, K))
    for i, s in enumerate(samples):
        n = len(s.points)
        pts[i, :n], cats[i, :n], mask[i, :n] = s.points, s.categories, 1.0
    return F, pts, cats, mask


def mesh_loss(net: MeshNet, samples, body: BodyModel):
    from .metrics import loss_hmr

    F, pts, cats, mask = collate(samples)
    verts, recon = net.forward_batch(F, pts if pts.shape[1] else None, cats, mask)
    pred = {"verts": verts, "root": np.array([s.root for s in samples])}
    gt = {"verts": np.array([s.gt_verts for s in samples])}
    if recon is not None:
        b, k = np.nonzero(mask)
        flat = recon.reshape(-1, 3)
        pred["contacts"] = flat[b * pts.shape[1] + k]
        gt["contacts"] = pts[b, k]
    return loss_hmr(pred, gt, body)


def train_step(net: MeshNet, opt: SGD, samples, body: BodyModel):
    """One momentum-SGD step on the mesh loss; returns the per-term values."""
    try:
        total, terms = mesh_loss(net, samples, body)
    except NonFiniteError as exc:
        raise NonFiniteLoss(f"mesh loss is not finite ({exc})") from exc
    if not np.isfinite(total.data):
        raise NonFiniteLoss("mesh loss is not finite")
    opt.zero_grad()
    # without contact points the scene branch is legitimately unused
    has_points = any(len(s.points) for s in samples)
    ad.backward(total, net.parameters() if has_points else None)
    opt.step()
    terms["total"] = float(total.data)
    return terms


def train_mesh_net(samples, body: BodyModel, steps=1500, lr=0.15, momentum=0.9, batch=None, seed=0,
                   config=None, time_budget=None, log=None, clip=1.0, optimizer="sgd"):
    net = MeshNet(body, config, seed)
    if optimizer == "adam":
        opt = Adam(net.parameters(), lr)
    else:
        opt = SGD(net.parameters(), lr, momentum, clip=clip)
    rng = np.random.default_rng(seed + 1)
    history = []
    t0 = time.perf_counter()
    for step in range(steps):
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * step / steps))
        if batch is None or batch >= len(samples):
            chosen = samples
        else:
            chosen = [samples[i] for i in np.sort(rng.choice(len(samples), batch, replace=False))]
        terms = train_step(net, opt, chosen, body)
        history.append(terms)
        if log and step % 100 == 0:
            log(f"mesh step {step}: " + " ".join(f"{k}={v:.4f}" for k, v in terms.items()))
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    return net, history
