"""Pixel identification and object-centric evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_mutual_info_score, adjusted_rand_score

from . import losses
from .scene import Codebook

TABLE_COLUMNS = ("fg_ari", "ari_a", "fg_ami", "ami_a", "miou")
TABLE_HEADER = ("FG-ARI", "ARI-A", "FG-AMI", "AMI-A", "mIoU")


@dataclass
class IdMap:
    labels: np.ndarray
    source: str = "predicted"
    background: int | None = None


def assign_ids(feature: np.ndarray, alpha: np.ndarray, codebook: Codebook,
               include_background_code: bool = True, alpha_threshold: float = 0.5) -> IdMap:
    """Nearest code (squared L2) per pixel; lowest index wins ties.

    Candidates are the C object codes followed by the background code at index
    C (``include_background_code``). Pixels with alpha below the threshold are
    background regardless of their feature.
    """
    if codebook.C < 1:
        raise ValueError("codebook is empty")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != codebook.d_code or feature.shape[:2] != np.shape(alpha):
        raise ValueError(f"feature {feature.shape} does not match alpha {np.shape(alpha)} / d_code {codebook.d_code}")
    rows = codebook.with_background() if include_background_code else codebook.codes
    best = np.full(feature.shape[:2], np.inf)
    labels = np.zeros(feature.shape[:2], dtype=np.int64)
    for c, e in enumerate(rows):
        diff = feature - e
        d = np.einsum("hwd,hwd->hw", diff, diff)
        closer = d < best
        best[closer] = d[closer]
        labels[closer] = c
    labels[np.asarray(alpha) < alpha_threshold] = codebook.background_index
    return IdMap(labels, "predicted", codebook.background_index)


def _flat_pair(pred, gt, foreground_only: bool, background: int | None):
    pred = np.asarray(getattr(pred, "labels", pred)).ravel()
    gt = np.asarray(getattr(gt, "labels", gt)).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label arrays differ in size: {pred.size} vs {gt.size}")
    if foreground_only:
        if background is None:
            raise ValueError("foreground_only needs the background label")
        keep = gt != background
        pred, gt = pred[keep], gt[keep]
    if pred.size == 0:
        raise ValueError("no pixels left to compare (empty foreground)")
    return pred, gt


def is_degenerate(pred, gt) -> bool:
    """Both labelings put everything into one cluster."""
    return np.unique(pred).size == 1 and np.unique(gt).size == 1


def ari(pred, gt, foreground_only: bool = False, background: int | None = None) -> float:
    """Adjusted Rand index; two single-cluster labelings score 1.0."""
    pred, gt = _flat_pair(pred, gt, foreground_only, background)
    if is_degenerate(pred, gt):
        return 1.0
    return float(adjusted_rand_score(gt, pred))


def ami(pred, gt, foreground_only: bool = False, background: int | None = None) -> float:
    """Adjusted mutual information, max-normalized; two single-cluster labelings score 1.0."""
    pred, gt = _flat_pair(pred, gt, foreground_only, background)
    if is_degenerate(pred, gt):
        return 1.0
    return float(adjusted_mutual_info_score(gt, pred, average_method="max"))


def miou(pred, gt, background: int) -> float:
    """Mean IoU over ground-truth objects under greedy one-to-one matching.

    Objects are visited by descending area (then label); each takes the
    unused predicted label with the highest IoU. Unmatched objects score 0.
    """
    pred = np.asarray(getattr(pred, "labels", pred)).ravel()
    gt = np.asarray(getattr(gt, "labels", gt)).ravel()
    if pred.shape != gt.shape:
        raise ValueError("label maps differ in shape")
    objects, obj_area = np.unique(gt[gt != background], return_counts=True)
    if objects.size == 0:
        raise ValueError("ground truth has no foreground objects")
    cands, cand_area = np.unique(pred[pred != background], return_counts=True)
    used = np.zeros(cands.size, dtype=bool)
    ious = []
    for o in np.lexsort((objects, -obj_area)):
        if cands.size == 0:
            ious.append(0.0)
            continue
        in_obj = gt == objects[o]
        inter = np.array([np.count_nonzero(in_obj & (pred == c)) for c in cands], dtype=np.float64)
        iou = inter / (obj_area[o] + cand_area - inter)
        iou[used] = -1.0
        j = int(np.argmax(iou))
        if iou[j] <= 0:
            ious.append(0.0)
            continue
        used[j] = True
        ious.append(float(iou[j]))
    return float(np.mean(ious))


def psnr(img: np.ndarray, ref: np.ndarray, cap: float = 100.0) -> float:
    mse = float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    return losses.ssim(img, ref)


@dataclass
class EvalReport:
    fg_ari: float
    ari_a: float
    fg_ami: float
    ami_a: float
    miou: float
    degenerate: bool = False
    psnr: float | None = None
    ssim: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_labels(pred_maps, gt_maps, background: int) -> EvalReport:
    """Metrics over the concatenated pixels of all views of one scene.

    Concatenating views (rather than averaging per view) makes identities that
    flip between views count as errors.
    """
    pred = np.concatenate([np.asarray(getattr(p, "labels", p)).ravel() for p in pred_maps])
    gt = np.concatenate([np.asarray(getattr(g, "labels", g)).ravel() for g in gt_maps])
    fg = gt != background
    degenerate = is_degenerate(pred, gt) or is_degenerate(pred[fg], gt[fg])
    return EvalReport(
        fg_ari=ari(pred, gt, True, background),
        ari_a=ari(pred, gt, False),
        fg_ami=ami(pred, gt, True, background),
        ami_a=ami(pred, gt, False),
        miou=miou(pred, gt, background),
        degenerate=bool(degenerate),
    )


def aggregate(reports) -> dict:
    """Mean and (population) std of every metric across scenes."""
    reports = list(reports)
    out = {"n_scenes": len(reports)}
    for key in TABLE_COLUMNS + ("psnr", "ssim"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    out["degenerate"] = any(r.degenerate for r in reports)
    return out


def write_report_json(path, reports, names=None) -> None:
    reports = list(reports)
    doc = {
        "scenes": [
            dict(r.to_dict(), name=(names[i] if names else str(i))) for i, r in enumerate(reports)
        ],
        "aggregate": aggregate(reports),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def write_report_csv(path, reports, names=None) -> None:
    """Table with the FG-ARI, ARI-A, FG-AMI, AMI-A, mIoU columns and a mean +- std row."""
    reports = list(reports)
    agg = aggregate(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("scene",) + TABLE_HEADER)
        for i, r in enumerate(reports):
            w.writerow([names[i] if names else str(i)] + [f"{getattr(r, k):.3f}" for k in TABLE_COLUMNS])
        w.writerow(["mean"] + [f"{agg[k]['mean']:.3f} ± {agg[k]['std']:.3f}" for k in TABLE_COLUMNS])


def predicted_object_codes(scene, views, assignment: dict, codebook: Codebook) -> dict:
    """Majority predicted ID over each object's ground-truth pixels across views.

    ``views`` holds (camera, gt_label_map) pairs whose labels are code indices;
    ``assignment`` maps object id to its global code. Objects never visible map to None.
    """
    from .rasterizer import rasterize

    counts = {obj: np.zeros(codebook.C + 1, dtype=np.int64) for obj in assignment}
    for cam, gt in views:
        out = rasterize(scene, cam)
        pred = assign_ids(out.feature, out.alpha, codebook).labels
        gt = np.asarray(getattr(gt, "labels", gt))
        for obj, code in assignment.items():
            sel = gt == code
            if np.any(sel):
                counts[obj] += np.bincount(pred[sel], minlength=codebook.C + 1)
    return {obj: (int(np.argmax(c)) if c.sum() else None) for obj, c in counts.items()}


def cross_scene_consistency(scenes, codebook: Codebook, return_details: bool = False):
    """Fraction of shared objects identified with the same, correct code in every scene.

    ``scenes`` is a sequence of (trained scene, views, assignment) with views as
    (camera, gt_label_map) pairs and assignment mapping object id to global
    code. An object is shared when its code appears in at least two entries.
    """
    scenes = list(scenes)
    per_scene = []
    for scene, views, assignment in scenes:
        pred = predicted_object_codes(scene, views, assignment, codebook)
        per_scene.append({int(code): pred[obj] for obj, code in assignment.items()})
    seen: dict[int, list] = {}
    for mapping in per_scene:
        for code, p in mapping.items():
            seen.setdefault(code, []).append(p)
    shared = {code: preds for code, preds in seen.items() if len(preds) >= 2}
    if not shared:
        raise ValueError("scenes share no objects")
    ok = {code: all(p == code for p in preds) for code, preds in shared.items()}
    frac = sum(ok.values()) / len(ok)
    if return_details:
        return frac, {"shared": {str(c): shared[c] for c in sorted(shared)}, "consistent": {str(c): ok[c] for c in sorted(ok)}}
    return frac


def evaluate_scene(scene, views, codebook: Codebook, with_images: bool = False):
    """Render every (camera, gt_labels[, image]) view and score the predicted ID maps.

    Returns ``(report, predicted label maps)``; ``report.extra`` carries the
    pixel accuracy over all views.
    """
    from .rasterizer import rasterize

    preds, gts, quality = [], [], []
    for view in views:
        cam, gt = view[0], np.asarray(getattr(view[1], "labels", view[1]))
        out = rasterize(scene, cam)
        preds.append(assign_ids(out.feature, out.alpha, codebook).labels)
        gts.append(gt)
        if with_images and len(view) > 2 and view[2] is not None:
            quality.append((psnr(out.color, view[2]), ssim(out.color, view[2])))
    report = evaluate_labels(preds, gts, codebook.background_index)
    if quality:
        report.psnr = float(np.mean([q[0] for q in quality]))
        report.ssim = float(np.mean([q[1] for q in quality]))
    flat_p = np.concatenate([p.ravel() for p in preds])
    flat_g = np.concatenate([g.ravel() for g in gts])
    report.extra["pixel_accuracy"] = float(np.mean(flat_p == flat_g))
    report.extra["n_views"] = len(preds)
    return report, preds
