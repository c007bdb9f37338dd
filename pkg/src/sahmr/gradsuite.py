"""Finite-difference checks for every differentiable op, both training
losses and the scene-aware fitting energy.

Inputs are drawn so that no kink (abs, relu, max, L1 terms, hinge or
nearest-neighbour switches) lies within a safety margin of the probe, so
central differences are well defined.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

MARGIN = 0.01


def _away_from_zero(rng, shape, margin=MARGIN * 10):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _distinct(rng, shape):
    """Values whose pairwise gaps exceed the margin (for max-like ops)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.02, n)).reshape(shape) - 0.05 * n


def _proj(rng, shape):
    return rng.normal(size=shape)


def op_cases(rng):
    """``name -> (fn, params)`` with ``fn()`` returning a scalar tensor."""
    cases = {}

    def add(name, build, *arrays):
        params = [ad.parameter(a) for a in arrays]
        out_shape = build(*params).shape
        W = _proj(rng, out_shape)
        cases[name] = (lambda: (build(*params) * W).sum(), params)

    A, B = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    add("add", lambda a, b: a + b, A, B)
    add("sub", lambda a, b: a - b, A, B)
    add("mul", lambda a, b: a * b, A, B)
    add("div", lambda a, b: a / b, A, _away_from_zero(rng, (4, 5)) * 3)
    add("neg", lambda a: -a, A)
    add("pow", lambda a: a ** 3, A)
    add("broadcast_add", lambda a, b: a + b, A, rng.normal(size=5))
    add("matmul_2d", lambda a, b: ad.matmul(a, b), A, rng.normal(size=(5, 3)))
    add("matmul_batched", lambda a, b: ad.matmul(a, b), rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 5, 3)))
    add("matmul_shared", lambda a, b: ad.matmul(a, b), rng.normal(size=(2, 4, 5)), rng.normal(size=(5, 3)))
    add("matmul_vec", lambda a, b: ad.matmul(a, b), A, rng.normal(size=5))
    add("getitem", lambda a: a[1:3, [0, 2, 2]], A)
    add("sum_axis", lambda a: a.sum(axis=1), A)
    add("mean", lambda a: a.mean(axis=0, keepdims=True), A)
    add("max", lambda a: a.max(axis=1), _distinct(rng, (4, 5)))
    add("reshape", lambda a: a.reshape(5, 4), A)
    add("transpose", lambda a: a.T, A)
    add("swapaxes", lambda a: ad.swapaxes(a, 0, 2), rng.normal(size=(2, 3, 4)))
    add("concat", lambda a, b: ad.concat([a, b], axis=0), A, B)
    add("broadcast_rows", lambda a: ad.broadcast_rows(a, 3), rng.normal(size=4))
    seg = np.array([0, 2, 1, 0, 2, 2])
    add("segment_sum", lambda a: ad.segment_sum(a, seg, 3), rng.normal(size=(6, 3)))
    add("segment_max", lambda a: ad.segment_max(a, seg, 3), _distinct(rng, (6, 3)))
    add("segment_softmax", lambda a: ad.segment_softmax(a, seg, 3), rng.normal(size=6))
    add("exp", ad.exp, A)
    add("log", ad.log, np.abs(A) + 0.5)
    add("sqrt", ad.sqrt, np.abs(A) + 0.5)
    add("sin", ad.sin, A)
    add("cos", ad.cos, A)
    add("absolute", ad.absolute, _away_from_zero(rng, (4, 5)))
    add("relu", ad.relu, _away_from_zero(rng, (4, 5)))
    add("elu", ad.elu, _away_from_zero(rng, (4, 5)))
    add("tanh", ad.tanh, A)
    add("sigmoid", ad.sigmoid, A)
    add("softplus", lambda a: ad.softplus(a, 3.0), A)
    add("gelu", ad.gelu, A)
    add("softmax", lambda a: ad.softmax(a, axis=1), A)
    add("log_softmax", lambda a: ad.log_softmax(a, axis=0), A)
    add("layer_norm", ad.layer_norm, A, rng.normal(size=5), rng.normal(size=5))
    add("linear_attention", ad.linear_attention, rng.normal(size=(4, 3)), rng.normal(size=(6, 3)),
        rng.normal(size=(6, 2)))
    mask = np.array([[1, 1, 0, 1, 1], [1, 0, 1, 1, 0]], dtype=float)
    add("linear_attention_masked", lambda q, k, v: ad.linear_attention(q, k, v, key_mask=mask),
        rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 2)))
    return cases


def loss_cases(rng):
    from .metrics import LossWeights, loss_hmr, loss_rc
    from .synth import default_body

    cases = {}
    n_vox = 7
    gt = {
        "heatmap": rng.uniform(size=(8, 8)),
        "depth": np.where(rng.uniform(size=(8, 8)) > 0.5, rng.uniform(2, 4, (8, 8)), 0.0),
        "offsets": rng.normal(size=(n_vox, 3)),
        "root": rng.normal(size=(2, 3)),
        "classes": rng.integers(0, 8, n_vox),
    }
    pred = {
        "heatmap": ad.parameter(rng.uniform(size=(8, 8))),
        "depth": ad.parameter(gt["depth"] + _away_from_zero(rng, (8, 8))),
        "offsets": ad.parameter(gt["offsets"] + _away_from_zero(rng, (n_vox, 3))),
        "root": ad.parameter(gt["root"] + _away_from_zero(rng, (2, 3))),
        "class_logits": ad.parameter(rng.normal(size=(n_vox, 8))),
    }
    cases["loss_rc"] = (lambda: loss_rc(pred, gt, LossWeights())[0], list(pred.values()))

    body = default_body()
    N = body.n_vertices
    gv = body.template + rng.normal(0, 0.02, (N, 3)) + [0.1, 0.2, 3.0]
    row0 = body.dense_regressor[0]
    M = body.dense_regressor

    def margin_ok(V):
        a = np.abs((V - row0 @ V) - (gv - row0 @ gv)).min()
        Jp, Jg = M @ V, M @ gv
        b = np.abs((Jp - Jp[0]) - (Jg - Jg[0]))[1:].min()
        c = np.abs(V + root - gv).min()
        return min(a, b, c) > 2e-4

    root = row0 @ gv + [0.03, -0.02, 0.05]
    part = body.part_of_vertex
    for _ in range(100):
        # bimodal per-vertex residual plus a distinct offset per rigid part
        delta = _away_from_zero(rng, (N, 3), 0.5) * 0.02
        delta += (part[:, None] + 1) * np.array([0.07, -0.05, 0.03])
        V0 = gv - root + delta
        if margin_ok(V0):
            break
    else:
        raise RuntimeError("no kink-free mesh state found for the mesh loss")
    pts = rng.normal(size=(12, 3))
    verts = ad.parameter(V0)
    contacts = ad.parameter(pts + _away_from_zero(rng, (12, 3)))
    cases["loss_hmr"] = (
        lambda: loss_hmr({"verts": verts, "root": root, "contacts": contacts},
                         {"verts": gv, "contacts": pts}, body)[0],
        [verts, contacts],
    )
    return cases


def saopt_cases(seed=0, margin=6e-4):
    """SA-Opt energy at kink-free states, one per variable set, plus the
    ordinal term on its own with the root pushed behind the scene."""
    from . import saopt
    from .synth import default_body, gen_frame

    body = default_body()
    cases = {}
    frame = gen_frame(seed, "sit_box", body)
    root = frame.root_gt.xyz
    rng = np.random.default_rng(seed)
    # a few dozen contacts: with hundreds, some hinge or nearest-vertex tie
    # always sits within a fraction of a millimetre
    labelled = np.flatnonzero(frame.scene_labels.categories > 0)
    keep = np.sort(rng.choice(labelled, min(24, len(labelled)), replace=False))
    specs = [("translation", {}), ("translation+scale", {}), ("translation+scale+pose", {}),
             ("translation", dict(w_reproj=0, w_pen=0, w_contact=0, w_ordinal=1))]
    for variables, weights in specs:
        cfg = saopt.SAOptConfig(variables=variables, **weights)
        prob = saopt.SAOptProblem.build(frame.body_camera(), root, frame.camera, frame.scene,
                                        frame.scene.points[keep], frame.scene_labels.categories[keep],
                                        frame.joints2d(body), body, cfg)
        behind = bool(weights)
        if behind:
            from .scene import ray_scene_depth

            target = prob.contact_points[0]  # on a surface, so its ray has a hit
            ray = target / np.linalg.norm(target)
            t_hit, _ = ray_scene_depth(prob.scene, np.zeros(3), ray)
            past = ray * (t_hit + 0.3) - root
        x = None
        for _ in range(500):
            shift = rng.normal(0, 0.05, 3) + (past if behind else 0)
            cand = saopt.SAOptState.from_root(root + shift).vector(cfg)
            if len(cand) > 4:
                cand[3] = rng.normal(0, 0.05)
                cand[4:] = rng.normal(0, 0.05, len(cand) - 4)
            if saopt.kink_margin(prob, cand) > margin:
                x = cand
                break
        if x is None:
            raise RuntimeError(f"no kink-free state found for variables={variables}")
        if behind and saopt.energy(saopt.SAOptState.from_vector(x, cfg), prob)[1]["ordinal"] <= 0:
            raise RuntimeError("ordinal probe state does not violate the depth ordering")
        p = ad.parameter(x)
        name = "saopt_ordinal" if behind else f"saopt_{variables.replace('+', '_')}"
        cases[name] = (lambda prob=prob, p=p: saopt.energy_tensor(prob, p)[0], [p])
    return cases


def run_suite(eps=1e-4, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    cases = {}
    cases.update(op_cases(rng))
    cases.update(loss_cases(rng))
    cases.update(saopt_cases(seed))
    return {name: ad.gradcheck(fn, params, eps) for name, (fn, params) in cases.items()}
