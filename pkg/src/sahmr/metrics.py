"""Training losses and evaluation metrics.

Losses take autodiff tensors for predictions and plain arrays for targets.
Every L1 term is a mean over all elements (coordinates times points).
Metrics are plain numpy; distances are reported in millimetres except
PenE/ConFE, which are summed metres per frame.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .body import N_CATEGORIES, BodyModel
from .errors import ConfigError, DimensionMismatch


@dataclass
class LossWeights:
    w_rz: float = 10.0

    def __post_init__(self):
        if self.w_rz < 0:
            raise ConfigError("loss weights must be nonnegative")


def _same_shape(a, b, what):
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = np.shape(b)
    if tuple(sa) != tuple(sb):
        raise DimensionMismatch(f"{what}: prediction {tuple(sa)} vs target {tuple(sb)}")


def l1(pred, target):
    _same_shape(pred, target, "l1")
    return ad.absolute(ad.as_tensor(pred) - np.asarray(target, dtype=np.float64)).mean()


def mse(pred, target):
    _same_shape(pred, target, "mse")
    d = ad.as_tensor(pred) - np.asarray(target, dtype=np.float64)
    return (d * d).mean()


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    logits = ad.as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise DimensionMismatch(f"cross_entropy: logits {logits.shape} vs {len(labels)} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(ad.log_softmax(logits, axis=1) * onehot).sum() * (1.0 / len(labels))


def _finish(terms):
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total, {k: float(v.data) for k, v in terms.items()}


def loss_rc(pred: dict, gt: dict, weights: LossWeights | None = None):
    """Root-and-contact loss; terms whose prediction is absent are skipped.

    Keys: ``heatmap``, ``depth`` (normalized-depth map; supervised where the
    target map is nonzero unless ``depth_mask`` is given), ``offsets``,
    ``root`` and ``class_logits`` / ``classes``.
    """
    w = weights or LossWeights()
    terms = {}
    if "heatmap" in pred:
        terms["r2d"] = mse(pred["heatmap"], gt["heatmap"])
    if "depth" in pred:
        _same_shape(pred["depth"], gt["depth"], "depth")
        mask = np.asarray(gt.get("depth_mask", np.asarray(gt["depth"]) != 0), dtype=bool)
        d = ad.as_tensor(pred["depth"])[mask]
        terms["rz"] = l1(d, np.asarray(gt["depth"])[mask]) * w.w_rz
    if "offsets" in pred:
        terms["rov"] = l1(pred["offsets"], gt["offsets"])
    if "root" in pred:
        terms["r3d"] = l1(pred["root"], gt["root"])
    if "class_logits" in pred:
        terms["c"] = cross_entropy(pred["class_logits"], gt["classes"])
    if not terms:
        raise ConfigError("loss_rc needs at least one prediction")
    return _finish(terms)


def _root_align(verts, regressor_row0):
    """Subtract the regressed root joint; works on ``(N, 3)`` or ``(B, N, 3)``."""
    row = np.asarray(regressor_row0, dtype=np.float64).reshape(1, -1)
    return verts - ad.matmul(row, verts)


def loss_hmr(pred: dict, gt: dict, body: BodyModel):
    """Mesh loss: aligned vertices and joints, global vertices and the scene
    autoencoder reconstruction.

    ``pred``: ``verts`` (root-centred network output), ``root`` (the root it
    is centred on, scene frame, constant), ``contacts`` (reconstructed scene
    points, optional). ``gt``: ``verts`` (scene frame), ``contacts`` (the
    network's scene-point inputs, optional).
    """
    V = ad.as_tensor(pred["verts"])
    gv = np.asarray(gt["verts"], dtype=np.float64)
    _same_shape(V, gv, "verts")
    M = body.dense_regressor
    row0 = M[0]
    terms = {
        "v": l1(_root_align(V, row0), gv - np.einsum("n,...nc->...c", row0, gv)[..., None, :]),
    }
    Jp = ad.matmul(M, V)
    Jg = np.einsum("jn,...nc->...jc", M, gv)
    terms["j"] = l1(Jp - Jp[..., 0:1, :], Jg - Jg[..., 0:1, :])
    if pred.get("contacts") is not None and np.size(gt.get("contacts", [])) > 0:
        terms["cp"] = l1(pred["contacts"], gt["contacts"])
    root = np.asarray(pred["root"], dtype=np.float64)
    terms["gv"] = l1(V + root[..., None, :], gv)
    return _finish(terms)


# -- metrics ------------------------------------------------------------------------

def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def g_mpjpe(pred_joints, gt_joints):
    p, g = _check_pair(pred_joints, gt_joints)
    return float(np.linalg.norm(p - g, axis=-1).mean() * 1000.0)


def mpjpe(pred_joints, gt_joints):
    p, g = _check_pair(pred_joints, gt_joints)
    return g_mpjpe(p - p[0], g - g[0])


def g_mpve(pred_verts, gt_verts):
    return g_mpjpe(pred_verts, gt_verts)


def mpve(pred_verts, gt_verts, body: BodyModel, mask=None):
    p, g = _check_pair(pred_verts, gt_verts)
    row0 = body.dense_regressor[0]
    d = np.linalg.norm((p - row0 @ p) - (g - row0 @ g), axis=-1)
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
        if d.size == 0:
            return float("nan")
    return float(d.mean() * 1000.0)


def cerr(pred_verts, gt_verts, body: BodyModel, contact_mask):
    """Aligned vertex error restricted to ground-truth contact vertices."""
    return mpve(pred_verts, gt_verts, body, contact_mask)


def pen_e(verts, scene, sdf=None):
    d = scene.signed_distance(verts) if sdf is None else np.asarray(sdf)
    return float(np.sum(np.where(d < 0, -d, 0.0)))


def conf_e(verts, scene, contact_gt, sdf=None):
    d = scene.signed_distance(verts) if sdf is None else np.asarray(sdf)
    c = np.asarray(contact_gt, dtype=bool)
    return float(np.sum(np.where(c, np.abs(d), np.where(d < 0, -d, 0.0))))


@dataclass
class ContactPR:
    precision: float
    recall: float
    no_predicted_positives: bool
    no_gt_positives: bool
    confusion: np.ndarray  # (8, 8): rows ground truth, columns prediction


def contact_pr(pred_labels, gt_labels) -> ContactPR:
    p = np.asarray(getattr(pred_labels, "categories", pred_labels), dtype=np.int64)
    g = np.asarray(getattr(gt_labels, "categories", gt_labels), dtype=np.int64)
    if p.shape != g.shape:
        raise DimensionMismatch(f"label counts differ: {p.shape} vs {g.shape}")
    conf = np.zeros((N_CATEGORIES, N_CATEGORIES), dtype=np.int64)
    np.add.at(conf, (g, p), 1)
    tp = int(np.sum((p != 0) & (g != 0)))
    n_pred, n_gt = int(np.sum(p != 0)), int(np.sum(g != 0))
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gt if n_gt else 0.0
    return ContactPR(prec, rec, n_pred == 0, n_gt == 0, conf)


FIELDS = ("g_mpjpe", "g_mpve", "mpjpe", "mpve", "cerr", "pen_e", "conf_e", "precision", "recall")


def evaluate_frame(pred_verts, frame, body: BodyModel, pred_labels=None) -> dict:
    """All metrics for one frame; ``pred_verts`` in the scene frame."""
    gt = frame.body_gt
    Jp, Jg = body.dense_regressor @ pred_verts, body.dense_regressor @ gt
    row = {
        "frame_id": frame.frame_id,
        "g_mpjpe": g_mpjpe(Jp, Jg),
        "g_mpve": g_mpve(pred_verts, gt),
        "mpjpe": mpjpe(Jp, Jg),
        "mpve": mpve(pred_verts, gt, body),
        "cerr": cerr(pred_verts, gt, body, frame.vertex_contact),
    }
    sdf = frame.scene.signed_distance(pred_verts)
    row["pen_e"] = pen_e(pred_verts, frame.scene, sdf)
    row["conf_e"] = conf_e(pred_verts, frame.scene, frame.vertex_contact, sdf)
    if pred_labels is not None:
        pr = contact_pr(pred_labels, frame.scene_labels)
        row.update(precision=pr.precision, recall=pr.recall, precision_flag=int(pr.no_predicted_positives))
    else:
        row.update(precision=float("nan"), recall=float("nan"), precision_flag=0)
    return row


@dataclass
class MetricReport:
    method: str
    rows: list = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {"frame_id": "ALL"}
        for k in FIELDS:
            vals = np.array([r[k] for r in self.rows], dtype=np.float64)
            ok = ~np.isnan(vals)
            out[k] = float(vals[ok].mean()) if ok.any() else float("nan")
        out["precision_flag"] = int(sum(r.get("precision_flag", 0) for r in self.rows))
        return out

    def to_json(self) -> str:
        def clean(d):
            return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in d.items()}

        return json.dumps({"method": self.method, "frames": [clean(r) for r in self.rows],
                           "aggregate": clean(self.aggregate())}, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ("frame_id",) + FIELDS + ("precision_flag",)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows + [self.aggregate()]:
            w.writerow([r["frame_id"]] + [f"{r[k]:.6f}" for k in FIELDS] + [r.get("precision_flag", 0)])
        return buf.getvalue()

    def save(self, stem):
        from pathlib import Path

        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(self.to_json())
        stem.with_suffix(".csv").write_text(self.to_csv())
