"""Center-distance detection metrics in the nuScenes style, reduced to 2D boxes.

mAP averages 41-point interpolated AP over classes (with ground truth) and
distance thresholds. True-positive errors (translation, scale, orientation)
are taken from matches at ``tp_threshold``. NDS* folds three error terms
instead of five.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synthworld import BoxLabel, wrap_angle

METRICS_SCHEMA_VERSION = 1
TABLE_COLUMNS = ("config", "mAP", "NDS*", "mATE", "mASE", "mAOE")
DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
ATE_NORMALIZER = 4.0


@dataclass
class ClassMatch:
    """Detections of one class at one threshold, in evaluation order."""

    det_ids: np.ndarray
    scores: np.ndarray
    tp: np.ndarray                 # bool
    gt_index: np.ndarray           # matched global GT index, -1 for FP
    trans_err: np.ndarray          # nan for FP
    scale_err: np.ndarray
    orient_err: np.ndarray
    det_dist: np.ndarray           # detection's own distance from the sensor


@dataclass
class MatchResult:
    thresholds: tuple
    num_classes: int
    per: dict = field(default_factory=dict)   # (class, threshold) -> ClassMatch
    gt_class: np.ndarray = None
    gt_dist: np.ndarray = None

    def n_gt(self, cls: int, mask: np.ndarray | None = None) -> int:
        sel = self.gt_class == cls
        if mask is not None:
            sel &= mask
        return int(sel.sum())


def scale_error(a: BoxLabel, b: BoxLabel) -> float:
    sim = (min(a.w, b.w) / max(a.w, b.w)) * (min(a.l, b.l) / max(a.l, b.l))
    return 1.0 - sim


def orientation_error(a: BoxLabel, b: BoxLabel) -> float:
    return abs(wrap_angle(a.yaw - b.yaw))


def _det_key(det) -> tuple:
    s, b, _ = det
    return (s, b.x, b.y, b.w, b.l, b.yaw)


def match(preds: list[list[tuple[BoxLabel, float]]], gts: list[list[BoxLabel]],
          thresholds=DEFAULT_THRESHOLDS, num_classes: int | None = None) -> MatchResult:
    """Greedy score-ordered matching per (class, threshold).

    ``preds[s]`` and ``gts[s]`` hold scene ``s``. Detections are visited by
    descending score. Ties are broken by a detection id that depends only on
    the detection itself (scene index, then box center, size and yaw), so
    reordering equally scored detections cannot change the result. A
    detection is a TP when some unmatched same-class GT in its scene lies
    strictly closer than the threshold; the nearest such GT is taken.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must cover the same scenes")
    flat_gt = [(s, g) for s, scene in enumerate(gts) for g in scene]
    flat_det = [(s, b, sc) for s, scene in enumerate(preds) for b, sc in scene]
    if num_classes is None:
        classes = [g.class_id for _, g in flat_gt] + [b.class_id for _, b, _ in flat_det]
        num_classes = max(classes) + 1 if classes else 0
    res = MatchResult(tuple(thresholds), num_classes)
    res.gt_class = np.array([g.class_id for _, g in flat_gt], int)
    res.gt_dist = np.array([g.distance for _, g in flat_gt], float)
    gt_scene = np.array([s for s, _ in flat_gt], int)
    gt_xy = np.array([[g.x, g.y] for _, g in flat_gt], float).reshape(-1, 2)

    for c in range(num_classes):
        ids = [k for k, (_, b, _) in enumerate(flat_det) if b.class_id == c]
        ids.sort(key=lambda k: (-flat_det[k][2],) + _det_key(flat_det[k]) + (k,))
        cand = np.flatnonzero(res.gt_class == c)
        for thr in res.thresholds:
            taken = np.zeros(len(flat_gt), bool)
            n = len(ids)
            out = ClassMatch(np.array(ids, int), np.array([flat_det[k][2] for k in ids], float),
                             np.zeros(n, bool), np.full(n, -1), np.full(n, np.nan),
                             np.full(n, np.nan), np.full(n, np.nan),
                             np.array([flat_det[k][1].distance for k in ids], float))
            for r, k in enumerate(ids):
                s, box, _ = flat_det[k]
                pool = cand[(gt_scene[cand] == s) & ~taken[cand]]
                if len(pool) == 0:
                    continue
                d = np.hypot(gt_xy[pool, 0] - box.x, gt_xy[pool, 1] - box.y)
                best = int(np.argmin(d))
                if d[best] < thr:
                    g = int(pool[best])
                    taken[g] = True
                    gbox = flat_gt[g][1]
                    out.tp[r] = True
                    out.gt_index[r] = g
                    out.trans_err[r] = d[best]
                    out.scale_err[r] = scale_error(box, gbox)
                    out.orient_err[r] = orientation_error(box, gbox)
            res.per[(c, thr)] = out
    return res


def interpolated_ap(tp: np.ndarray, n_gt: int, n_points: int = 41) -> float:
    """Area under the precision-recall curve sampled at ``n_points`` recall levels.

    Precision at recall ``r`` is the maximum precision at any recall >= r
    (zero if ``r`` is never reached).
    """
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    levels = np.linspace(0.0, 1.0, n_points)
    out = 0.0
    for r in levels:
        sel = prec[rec >= r - 1e-12]
        out += sel.max() if len(sel) else 0.0
    return out / n_points


def _bucket_masks(res: MatchResult, cm: ClassMatch, bucket: str | None, split: float):
    if bucket is None:
        return np.ones(len(cm.tp), bool), np.ones(len(res.gt_class), bool)
    gt_far = res.gt_dist >= split
    det_far = np.where(cm.tp, gt_far[np.maximum(cm.gt_index, 0)], cm.det_dist >= split)
    if bucket == "far":
        return det_far, gt_far
    if bucket == "near":
        return ~det_far, ~gt_far
    raise ValueError(f"unknown bucket {bucket!r}")


def average_precision(res: MatchResult, bucket: str | None = None, split: float = 30.0) -> float:
    """mAP over classes that have ground truth (in the bucket); nan if none do."""
    per_class = []
    for c in range(res.num_classes):
        aps = []
        for thr in res.thresholds:
            cm = res.per[(c, thr)]
            dmask, gmask = _bucket_masks(res, cm, bucket, split)
            n = res.n_gt(c, gmask)
            if n == 0:
                break
            aps.append(interpolated_ap(cm.tp[dmask], n))
        if aps:
            per_class.append(float(np.mean(aps)))
    return float(np.mean(per_class)) if per_class else float("nan")


def tp_errors(res: MatchResult, tp_threshold: float = 2.0, bucket: str | None = None,
              split: float = 30.0) -> dict:
    """Class-averaged mean TP errors; a class with ground truth but no TP scores 1.0 on each."""
    errs = {"mATE": [], "mASE": [], "mAOE": []}
    for c in range(res.num_classes):
        cm = res.per[(c, tp_threshold)]
        dmask, gmask = _bucket_masks(res, cm, bucket, split)
        if res.n_gt(c, gmask) == 0:
            continue
        sel = cm.tp & dmask
        if not sel.any():
            for k in errs:
                errs[k].append(1.0)
            continue
        errs["mATE"].append(float(cm.trans_err[sel].mean()))
        errs["mASE"].append(float(cm.scale_err[sel].mean()))
        errs["mAOE"].append(float(cm.orient_err[sel].mean()))
    return {k: (float(np.mean(v)) if v else float("nan")) for k, v in errs.items()}


def composite_score(mAP: float, errors: dict) -> float:
    """NDS* = (5 mAP + sum over ATE/ASE/AOE of (1 - min(1, normalized error))) / 8."""
    norm = {"mATE": ATE_NORMALIZER, "mASE": 1.0, "mAOE": math.pi}
    total = 5.0 * mAP
    for k, z in norm.items():
        total += 1.0 - min(1.0, errors[k] / z)
    return total / 8.0


def summarize(res: MatchResult, tp_threshold: float = 2.0, bucket: str | None = None,
              split: float = 30.0) -> dict:
    mAP = average_precision(res, bucket, split)
    errs = tp_errors(res, tp_threshold, bucket, split)
    out = {"mAP": mAP, **errs}
    out["NDS*"] = composite_score(mAP, errs) if math.isfinite(mAP) else float("nan")
    gmask = np.ones(len(res.gt_class), bool)
    if bucket is not None:
        gmask = (res.gt_dist >= split) if bucket == "far" else (res.gt_dist < split)
    out["n_gt"] = int(gmask.sum())
    cms = [res.per[(c, tp_threshold)] for c in range(res.num_classes)]
    fp = 0
    for cm in cms:
        dmask, _ = _bucket_masks(res, cm, bucket, split)
        fp += int((~cm.tp & dmask).sum())
    out["false_positives"] = fp
    return out


def evaluate(preds, gts, thresholds=DEFAULT_THRESHOLDS, tp_threshold: float = 2.0,
             num_classes: int | None = None) -> dict:
    return summarize(match(preds, gts, thresholds, num_classes), tp_threshold)


def bucket_by_distance(preds, gts, split: float, thresholds=DEFAULT_THRESHOLDS,
                       tp_threshold: float = 2.0, num_classes: int | None = None) -> dict:
    """Near/far metrics. GTs bucket by their own distance, TPs follow their GT, FPs their own distance."""
    res = match(preds, gts, thresholds, num_classes)
    return {b: summarize(res, tp_threshold, b, split) for b in ("near", "far")}


def write_metrics_json(path: str | Path, metrics: dict, **meta) -> None:
    payload = {"schema_version": METRICS_SCHEMA_VERSION, **meta, "metrics": metrics}
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))


def write_table_csv(path: str | Path, rows: list[dict], columns=TABLE_COLUMNS) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r.get(k), float) else r.get(k)) for k in columns})
    tmp.replace(path)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
