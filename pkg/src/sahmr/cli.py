"""Command-line entry point: ``sahmr <command> [flags]``.

Exit codes: 0 ok, 2 configuration error, 3 missing input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import VARIANTS, RunConfig
from .errors import ConfigError, MissingInputError, SahmrError

COMMANDS = ("gen-synth", "train-stage1", "train-stage2", "infer", "eval", "fit-saopt", "bench", "gradcheck")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def content_hash(paths) -> str:
    """sha256 over the bytes of every file under ``paths``, in sorted order."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += sorted(x for x in p.rglob("*") if x.is_file())
        elif p.exists():
            files.append(p)
    for f in files:
        h.update(str(f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_run_record(out_dir, command, cfg: RunConfig, inputs=(), extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {"command": command, "config": cfg.to_dict(), "input_hash": content_hash(inputs)}
    if extra:
        rec.update(extra)
    (out / "run.json").write_text(json.dumps(rec, indent=1, sort_keys=True))


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None), workers=getattr(args, "workers", None),
                              variant=getattr(args, "variant", None))


def _frames(path):
    from .synth import load_dataset

    return load_dataset(path)


# -- commands ---------------------------------------------------------------------

def cmd_gen_synth(args):
    from .bench import make_frames
    from .synth import write_dataset

    cfg = _config(args)
    n = args.n if args.n is not None else {"train": cfg.n_train, "test": cfg.n_test}[args.split]
    frames = make_frames(cfg, args.split, n)
    write_dataset(frames, args.out, seed=cfg.seed)
    write_run_record(args.out, "gen-synth", cfg, extra={"split": args.split, "n": n})
    _log(f"wrote {n} {args.split} frames to {args.out}")


def cmd_train_stage1(args):
    from . import autodiff as ad
    from .bench import fit_head, fit_stage1
    from .plotting import plot_history

    cfg = _config(args)
    frames = _frames(args.data)
    head = fit_head(cfg)
    stage1, history = fit_stage1(cfg, head, frames, _log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(out / "head.ckpt", head.state())
    stage1.net.save(out / "stage1.ckpt")
    plot_history(history, out / "stage1_loss.png", "stage 1 loss")
    write_run_record(out, "train-stage1", cfg, [args.data])


def cmd_train_stage2(args):
    from .bench import fit_mesh_net
    from .plotting import plot_history
    from .synth import default_body

    cfg = _config(args)
    frames = _frames(args.data)
    body = default_body()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, contacts in (("mesh", True), ("trunk", False)):
        if args.trunk_only and contacts:
            continue
        net, history = fit_mesh_net(cfg, frames, body, contacts, _log)
        net.save(out / f"{name}.ckpt")
        plot_history(history, out / f"{name}_loss.png", f"{name} network loss")
    write_run_record(out, "train-stage2", cfg, [args.data])


def cmd_infer(args):
    from .bench import Models, predict
    from .meshio import write_obj
    from .synth import default_body

    cfg = _config(args)
    body = default_body()
    models = Models.load(args.checkpoints, cfg, body)
    frames = _frames(args.data)
    variant = args.variant or "sa-hmr"
    out = Path(args.out)
    timing = {}
    for fr in frames:
        verts, labels, t = predict(variant, fr, models, body, cfg)
        d = out / fr.frame_id
        d.mkdir(parents=True, exist_ok=True)
        write_obj(d / "body_pred.obj", verts, body.faces)
        if labels is not None:
            (d / "labels_pred.json").write_text(json.dumps({"scene_categories": labels.categories.tolist()}))
        timing[fr.frame_id] = t
        print(f"{fr.frame_id}: stage1 {1000 * t['stage1']:.1f} ms, stage2 {1000 * t['stage2']:.1f} ms")
    mean = {k: float(np.mean([t[k] for t in timing.values()])) for k in ("stage1", "stage2")}
    print(f"mean: stage1 {1000 * mean['stage1']:.1f} ms, stage2 {1000 * mean['stage2']:.1f} ms")
    (out / "timing.json").write_text(json.dumps({"frames": timing, "mean": mean}, indent=1))
    write_run_record(out, "infer", cfg, [args.data, args.checkpoints], {"variant": variant})


def cmd_eval(args):
    from .meshio import read_obj
    from .body import ContactLabels
    from .metrics import MetricReport, evaluate_frame
    from .synth import default_body

    cfg = _config(args)
    body = default_body()
    frames = _frames(args.data)
    rows = []
    for fr in frames:
        if args.pred is None:
            verts, labels = fr.body_gt, fr.scene_labels
        else:
            d = Path(args.pred) / fr.frame_id
            if not (d / "body_pred.obj").exists():
                raise MissingInputError(f"no prediction for {fr.frame_id} in {args.pred}")
            verts, _ = read_obj(d / "body_pred.obj")
            lp = d / "labels_pred.json"
            labels = ContactLabels(json.loads(lp.read_text())["scene_categories"]) if lp.exists() else None
        rows.append(evaluate_frame(verts, fr, body, labels))
    report = MetricReport(args.name, rows)
    report.save(Path(args.out) / args.name)
    agg = report.aggregate()
    print(" ".join(f"{k}={agg[k]:.4f}" for k in agg if k != "frame_id"))
    write_run_record(args.out, "eval", cfg, [args.data] + ([args.pred] if args.pred else []))


def cmd_fit_saopt(args):
    from .bench import detected_joints2d, saopt_config
    from .plotting import plot_trace
    from .saopt import fit_mesh, write_trace
    from .synth import default_body

    cfg = _config(args)
    body = default_body()
    frames = _frames(args.data)
    if args.frame is not None:
        frames = [f for f in frames if f.frame_id == args.frame]
        if not frames:
            raise MissingInputError(f"frame {args.frame} not in {args.data}")
    out = Path(args.out)
    rows = []
    for fr in frames:
        rng = np.random.default_rng([fr.seed, 13])
        d = rng.normal(size=3)
        shift = args.perturb * d / np.linalg.norm(d)
        root = fr.root_gt.xyz
        joints = fr.joints2d(body) if args.detector_noise == 0 else detected_joints2d(fr, body, args.detector_noise)
        res = fit_mesh(fr.body_camera() + shift, root + shift, fr.camera, fr.scene, fr.scene.points,
                       fr.scene_labels.categories, joints, body, saopt_config(cfg))
        err = float(np.linalg.norm(res.state.root - root))
        write_trace(out / f"{fr.frame_id}_trace.csv", res.trace)
        plot_trace(res.trace, out / f"{fr.frame_id}_trace.png", fr.frame_id)
        rows.append({"frame_id": fr.frame_id, "root_error_m": err, "iterations": res.iterations,
                     "converged": res.converged, "flags": res.flags})
        print(f"{fr.frame_id}: root error {100 * err:.2f} cm after {res.iterations} iterations")
    (out / "saopt_summary.json").write_text(json.dumps(rows, indent=1))
    write_run_record(out, "fit-saopt", cfg, [args.data], {"perturb": args.perturb})


def cmd_bench(args):
    from .bench import Models, ordering_checks, run_benchmark, train_models, write_reports
    from .synth import default_body, load_dataset

    cfg = _config(args)
    if args.n_test is not None:
        cfg = cfg.with_overrides(n_test=args.n_test)
    body = default_body()
    frames = load_dataset(args.data) if args.data else None
    if args.checkpoints:
        models = Models.load(args.checkpoints, cfg, body)
    else:
        models = train_models(cfg, body, _log)
        if args.save_checkpoints:
            models.save(args.save_checkpoints)
    t0 = time.perf_counter()
    reports, timing = run_benchmark(cfg, frames, models, body)
    write_reports(reports, args.out, figures=not args.no_figures)
    checks = ordering_checks(reports)
    for k, v in checks.items():
        print(f"{k}: {'yes' if v else 'no'}")
    write_run_record(args.out, "bench", cfg, [p for p in (args.data, args.checkpoints) if p],
                     {"timing": timing, "checks": checks, "eval_seconds": time.perf_counter() - t0})


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    results = run_suite(eps=args.eps, seed=args.seed or 0)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
        worst = max(worst, err)
    if worst >= args.tol:
        _log(f"gradient check failed: worst relative error {worst:.3e}")
        return 4
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sahmr", description="Scene-aware human mesh recovery toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON RunConfig")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        return sp

    sp = common(sub.add_parser("gen-synth", help="generate a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--n", type=int)

    sp = common(sub.add_parser("train-stage1", help="fit the root head and train the voxel network"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("train-stage2", help="train the mesh networks"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trunk-only", action="store_true")

    sp = common(sub.add_parser("infer", help="stage 1 then stage 2 on a dataset"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoints", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=VARIANTS)

    sp = common(sub.add_parser("eval", help="metrics of predictions (or ground truth) against ground truth"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", help="directory written by infer; omit to score ground truth")
    sp.add_argument("--out", required=True)
    sp.add_argument("--name", default="eval")

    sp = common(sub.add_parser("fit-saopt", help="scene-aware fit from a perturbed ground-truth body"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frame")
    sp.add_argument("--perturb", type=float, default=0.3)
    sp.add_argument("--detector-noise", type=float, default=0.0)

    sp = common(sub.add_parser("bench", help="train (or load) and evaluate every variant"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="test dataset; generated from the config when omitted")
    sp.add_argument("--checkpoints", help="load models instead of training")
    sp.add_argument("--save-checkpoints")
    sp.add_argument("--variant", choices=("all",) + VARIANTS)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--no-figures", action="store_true")

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int)
    return p


HANDLERS = {
    "gen-synth": cmd_gen_synth, "train-stage1": cmd_train_stage1, "train-stage2": cmd_train_stage2,
    "infer": cmd_infer, "eval": cmd_eval, "fit-saopt": cmd_fit_saopt, "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        code = HANDLERS[args.command](args)
    except SahmrError as exc:
        _log(f"error: {exc}")
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        _log(f"error: {exc}")
        return MissingInputError.exit_code
    except (ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return ConfigError.exit_code
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
