"""Benchmark harness: train the toy stages, run every method variant on a
held-out synthetic set and write one metric report per variant.

Variants
    sa-hmr          learned root and contacts, scene-aware mesh network
    oracle-root     ground-truth root, learned contacts
    oracle-contact  learned root, ground-truth contacts
    oracle-both     ground truth for both
    trunk-only      scene-blind network placed at the initial root
    trunk-saopt     trunk-only followed by scene-aware optimization
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .body import BodyModel
from .config import VARIANTS, RunConfig
from .errors import ConfigError, MissingCheckpoint
from .mesh_net import MeshNet, make_mesh_sample, train_mesh_net
from .metrics import FIELDS, MetricReport, evaluate_frame
from .root_contact import (InitialRootHead, LearnedStage1, OracleStage1, Stage1Config, Stage1Net,
                           make_stage1_sample, train_stage1)
from .saopt import SAOptConfig, fit_mesh
from .synth import default_body, gen_frame, scenario_for

CHECKPOINTS = ("head", "stage1", "mesh", "trunk")


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _gen(args):
    seed, scenario, threshold = args
    return gen_frame(seed, scenario, default_body(), threshold)


def make_frames(cfg: RunConfig, split: str, n: int | None = None):
    n = {"train": cfg.n_train, "test": cfg.n_test, "pretrain": cfg.n_pretrain}[split] if n is None else n
    jobs = [(cfg.frame_seed(split, i), scenario_for(i), cfg.contact_threshold) for i in range(n)]
    return _map(_gen, jobs, cfg.workers)


def stage1_config(cfg: RunConfig) -> Stage1Config:
    return Stage1Config(cfg.gamma1, cfg.gamma2, cfg.voxel_size, cfg.w_rz)


def saopt_config(cfg: RunConfig) -> SAOptConfig:
    w = cfg.saopt_weights
    return SAOptConfig(w[0], w[1], w[2], w[3], max_iters=cfg.saopt_iters,
                       contact_threshold=cfg.contact_threshold)


@dataclass(eq=False)
class Models:
    head: InitialRootHead
    stage1: LearnedStage1
    mesh: MeshNet
    trunk: MeshNet

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(d / "head.ckpt", self.head.state())
        self.stage1.net.save(d / "stage1.ckpt")
        self.mesh.save(d / "mesh.ckpt")
        self.trunk.save(d / "trunk.ckpt")

    @classmethod
    def load(cls, directory, cfg: RunConfig, body: BodyModel):
        d = Path(directory)
        missing = [n for n in CHECKPOINTS if not (d / f"{n}.ckpt").exists()]
        if missing:
            raise MissingCheckpoint(f"{d}: missing checkpoints {missing}")
        head = InitialRootHead(pixel_noise=cfg.detector_noise).load_state(ad.load_checkpoint(d / "head.ckpt"))
        net = Stage1Net(np.random.default_rng(0), cfg.stage1_hidden)
        net.load(d / "stage1.ckpt")
        mesh, trunk = MeshNet(body), MeshNet(body)
        mesh.load(d / "mesh.ckpt")
        trunk.load(d / "trunk.ckpt")
        return cls(head, LearnedStage1(head, net, stage1_config(cfg)), mesh, trunk)


# -- training --------------------------------------------------------------------

def fit_head(cfg: RunConfig, frames=None):
    frames = make_frames(cfg, "pretrain") if frames is None else frames
    return InitialRootHead(pixel_noise=cfg.detector_noise).fit(frames)


def fit_stage1(cfg: RunConfig, head, frames, log=None):
    s1 = stage1_config(cfg)
    samples = [make_stage1_sample(fr, head, s1) for fr in frames]
    net, history = train_stage1(samples, seed=cfg.seed, steps=cfg.stage1_steps, lr=cfg.stage1_lr,
                                voxels_per_frame=cfg.voxels_per_frame, hidden=cfg.stage1_hidden, log=log)
    return LearnedStage1(head, net, s1), history


def mesh_training_samples(cfg: RunConfig, frames, body, use_contacts=True):
    """Stage-2 inputs from ground truth with a jittered root."""
    oracle = OracleStage1(body, noise_sigma=cfg.root_noise, seed=cfg.seed * 7919,
                          threshold=cfg.contact_threshold)
    return [make_mesh_sample(fr, oracle.run(fr), use_contacts=use_contacts) for fr in frames]


def fit_mesh_net(cfg: RunConfig, frames, body, use_contacts=True, log=None):
    samples = mesh_training_samples(cfg, frames, body, use_contacts)
    return train_mesh_net(samples, body, steps=cfg.mesh_steps, lr=cfg.mesh_lr, batch=cfg.mesh_batch,
                          seed=cfg.seed, log=log)


def train_models(cfg: RunConfig, body=None, log=None) -> Models:
    body = body or default_body()
    say = log or (lambda s: None)
    t0 = time.perf_counter()
    head = fit_head(cfg)
    say(f"initial-root head fitted ({time.perf_counter() - t0:.1f}s)")
    train = make_frames(cfg, "train")
    stage1, _ = fit_stage1(cfg, head, train, log)
    say(f"stage 1 trained ({time.perf_counter() - t0:.1f}s)")
    mesh, _ = fit_mesh_net(cfg, train, body, True, log)
    trunk, _ = fit_mesh_net(cfg, train, body, False, log)
    say(f"mesh networks trained ({time.perf_counter() - t0:.1f}s)")
    return Models(head, stage1, mesh, trunk)


# -- inference ---------------------------------------------------------------------

class _Fixed:
    """Stage-1 stand-in that replays an already computed result."""

    def __init__(self, result):
        self.result = result

    def run(self, frame):
        return self.result


def detected_joints2d(frame, body, noise):
    """Simulated 2D joint detector: true projections plus seeded pixel noise."""
    uv = frame.joints2d(body)
    return uv + np.random.default_rng([frame.seed, 11]).normal(0.0, noise, uv.shape)


def _scene_aware(frame, models, s1):
    sample = make_mesh_sample(frame, s1)
    out = models.mesh.forward(sample.feature, sample.points, sample.categories)
    return frame.camera.to_scene(out.vertices + sample.root), out.flags


def predict(variant, frame, models: Models, body, cfg: RunConfig, learned=None):
    """Scene-frame vertices, predicted scene labels (or None) and timings."""
    # a shared stage-1 result carries the time it took when it was computed
    learned = learned or models.stage1.run(frame)
    timings = {"stage1": learned.timings.get("stage1", 0.0)}
    t1 = time.perf_counter()
    if variant == "sa-hmr":
        verts, _ = _scene_aware(frame, models, learned)
        labels = learned.scene_labels
    elif variant.startswith("oracle-"):
        s1 = OracleStage1(body, variant in ("oracle-root", "oracle-both"),
                          variant in ("oracle-contact", "oracle-both"), _Fixed(learned),
                          threshold=cfg.contact_threshold).run(frame)
        verts, _ = _scene_aware(frame, models, s1)
        labels = s1.scene_labels
    elif variant in ("trunk-only", "trunk-saopt"):
        root = learned.root_initial.xyz
        verts_cam = models.trunk.forward_trunk(frame.image_feature) + root
        labels = None
        if variant == "trunk-saopt":
            res = fit_mesh(verts_cam, root, frame.camera, frame.scene, learned.contact_points,
                           learned.contact_categories, detected_joints2d(frame, body, cfg.detector_noise),
                           body, saopt_config(cfg))
            verts_cam = res.vertices
        verts = frame.camera.to_scene(verts_cam)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    timings["stage2"] = time.perf_counter() - t1
    return verts, labels, timings


def _evaluate_one(args):
    frame, models, body, cfg, variants = args
    learned = models.stage1.run(frame)
    rows, times = {}, {}
    for v in variants:
        verts, labels, t = predict(v, frame, models, body, cfg, learned)
        rows[v] = evaluate_frame(verts, frame, body, labels)
        times[v] = t
    return rows, times


def run_benchmark(cfg: RunConfig, frames=None, models: Models | None = None, body=None, train=True, log=None):
    """One :class:`MetricReport` per variant over the test frames.

    Models are trained when ``train`` is set and none are given, otherwise
    loaded from ``cfg.checkpoint_dir``.
    """
    body = body or default_body()
    if frames is None:
        frames = make_frames(cfg, "test")
    if len(frames) == 0:
        raise ConfigError("benchmark needs at least one frame")
    if models is None:
        models = train_models(cfg, body, log) if train else Models.load(cfg.checkpoint_dir, cfg, body)
    variants = cfg.variants
    results = _map(_evaluate_one, [(fr, models, body, cfg, variants) for fr in frames], cfg.workers)
    reports = {v: MetricReport(v, [r[0][v] for r in results]) for v in variants}
    timing = {v: {k: float(np.mean([r[1][v][k] for r in results])) for k in ("stage1", "stage2")}
              for v in variants}
    return reports, timing


def summary_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant",) + FIELDS)
    for name, rep in reports.items():
        agg = rep.aggregate()
        w.writerow([name] + [f"{agg[k]:.6f}" for k in FIELDS])
    return buf.getvalue()


def write_reports(reports: dict, out_dir, figures=True):
    """Per-variant CSV/JSON, a summary table and (optionally) figures."""
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        rep.save(out / "reports" / name)
    (out / "summary.csv").write_text(summary_csv(reports))
    agg = {k: {f: (None if np.isnan(v) else v) for f, v in rep.aggregate().items() if f in FIELDS}
           for k, rep in reports.items()}
    (out / "summary.json").write_text(json.dumps(agg, indent=1, sort_keys=True))
    if figures:
        from .plotting import plot_summary

        plot_summary(reports, out / "summary.png")
    return out


def ordering_checks(reports: dict) -> dict:
    """Qualitative orderings the toy benchmark is expected to reproduce."""
    agg = {k: r.aggregate() for k, r in reports.items()}
    out = {}
    if "sa-hmr" in agg and "trunk-only" in agg:
        a, b = agg["sa-hmr"], agg["trunk-only"]
        out["scene_aware_beats_trunk_gmpjpe"] = a["g_mpjpe"] < b["g_mpjpe"]
        out["scene_aware_beats_trunk_pene"] = a["pen_e"] < b["pen_e"]
    if "oracle-both" in agg:
        others = [agg[k]["cerr"] for k in agg if k.startswith(("sa-hmr", "oracle-")) and k != "oracle-both"]
        out["oracle_both_best_cerr"] = all(agg["oracle-both"]["cerr"] <= c for c in others)
    return out


__all__ = ["VARIANTS", "Models", "make_frames", "train_models", "predict", "run_benchmark",
           "write_reports", "summary_csv", "ordering_checks", "detected_joints2d"]
