"""COCO-protocol detection metrics: greedy IoU matching, 101-point interpolated AP, mAP.

Rules fixed here (and mirrored by the independent oracle in the tests):

* detections are ranked by descending score; ties keep insertion order
  (stable sort), first within an image, then across images in sorted image-id
  order;
* a detection matches the still-unmatched ground truth of highest IoU >= t,
  ties going to the lowest ground-truth index;
* a class with no ground truth has undefined AP (NaN) and is left out of mAP.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import pairwise_iou

RECALL_POINTS = np.arange(101) / 100.0
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class EvalInputError(ValueError):
    pass


@dataclass
class EvalConfig:
    class_ids: list
    iou_thresholds: tuple = COCO_THRESHOLDS
    max_detections_per_image: int = 100

    def __post_init__(self):
        t = list(self.iou_thresholds)
        if any(b <= a for a, b in zip(t, t[1:])) or any(not 0 < x <= 1 for x in t):
            raise ValueError("IoU thresholds must be strictly increasing and lie in (0, 1]")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be unique")


@dataclass
class EvalReport:
    class_ids: list
    thresholds: list
    ap: np.ndarray                  # (|C|, |T|), NaN where a class has no ground truth
    map: float
    pr_curves: np.ndarray           # (|C|, |T|, 101) interpolated precision
    class_names: list = field(default_factory=list)

    def per_class_ap(self) -> dict:
        with np.errstate(invalid="ignore"):
            return {c: (float(np.mean(row)) if not np.isnan(row).all() else None)
                    for c, row in zip(self.class_ids, self.ap)}

    def to_json(self) -> dict:
        def clean(x):
            return None if np.isnan(x) else float(x)
        return {
            "map": clean(self.map),
            "iou_thresholds": [float(t) for t in self.thresholds],
            "class_ids": [int(c) for c in self.class_ids],
            "class_names": list(self.class_names),
            "ap": [[clean(v) for v in row] for row in self.ap],
            "per_class_ap": {str(k): v for k, v in self.per_class_ap().items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "threshold", "recall_point", "precision"])
            for ci, c in enumerate(self.class_ids):
                for ti, t in enumerate(self.thresholds):
                    for ri, r in enumerate(RECALL_POINTS):
                        w.writerow([c, f"{t:.2f}", f"{r:.2f}", repr(float(self.pr_curves[ci, ti, ri]))])


def match_detections(det_boxes, det_scores, gt_boxes, t: float) -> tuple:
    """Greedy matching of one image/class.

    Returns (order, flags): ``order`` sorts detections by descending score
    (stable), ``flags[k]`` is True when detection ``order[k]`` is a true positive.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(len(order), dtype=bool)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0 or len(order) == 0:
        return order, flags
    ious = pairwise_iou(det_boxes[order], gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for k in range(len(order)):
        cand = np.where(taken, -1.0, ious[k])
        j = int(np.argmax(cand))
        if cand[j] >= t:
            taken[j] = True
            flags[k] = True
    return order, flags


def interpolated_precision(flags, num_gt: int) -> np.ndarray:
    """Precision at the 101 recall points (max precision over recall >= r)."""
    flags = np.asarray(flags, dtype=bool)
    if num_gt <= 0:
        return np.full(101, np.nan)
    if len(flags) == 0:
        return np.zeros(101)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(101)
    ok = idx < len(recall)
    out[ok] = precision[idx[ok]]
    return out


def average_precision(flags, num_gt: int) -> float:
    """101-point interpolated AP of score-ordered TP/FP flags; NaN when num_gt == 0."""
    return float(np.mean(interpolated_precision(flags, num_gt)))


def _image_key(iid):
    return (type(iid).__name__, iid)


def evaluate(predictions, gts, cfg: EvalConfig, class_names=None) -> EvalReport:
    """mAP over classes and IoU thresholds.

    ``predictions``: iterable of Detections (with ``image_id``); ``gts``:
    iterable of GroundTruthPage (with ``page_id``).  Labels are class ids
    from ``cfg.class_ids``.
    """
    gt_by_image = {}
    for g in gts:
        if g.page_id in gt_by_image:
            raise EvalInputError(f"duplicate ground-truth image id {g.page_id!r}")
        gt_by_image[g.page_id] = g
    known = set(cfg.class_ids)
    det_by_image = {}
    bad_ids, bad_classes = [], set()
    for d in predictions:
        if d.image_id not in gt_by_image:
            bad_ids.append(d.image_id)
            continue
        bad_classes.update(int(c) for c in d.labels if int(c) not in known)
        det_by_image.setdefault(d.image_id, []).append(d)
    if bad_ids:
        raise EvalInputError(f"predictions reference unknown image ids: {sorted(map(str, bad_ids))}")
    if bad_classes:
        raise EvalInputError(f"predictions use unknown class ids: {sorted(bad_classes)}")

    images = sorted(gt_by_image, key=_image_key)
    capped = {}
    for iid in images:
        ds = det_by_image.get(iid, [])
        if ds:
            boxes = np.concatenate([d.boxes for d in ds])
            scores = np.concatenate([d.scores for d in ds])
            labels = np.concatenate([d.labels for d in ds])
        else:
            boxes, scores, labels = np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
        keep = np.argsort(-scores, kind="stable")[:cfg.max_detections_per_image]
        keep = np.sort(keep)
        capped[iid] = (boxes[keep], scores[keep], labels[keep])

    T = list(cfg.iou_thresholds)
    ap = np.full((len(cfg.class_ids), len(T)), np.nan)
    pr = np.full((len(cfg.class_ids), len(T), 101), np.nan)
    for ci, c in enumerate(cfg.class_ids):
        num_gt = sum(int((gt_by_image[i].labels == c).sum()) for i in images)
        for ti, t in enumerate(T):
            scores_all, flags_all = [], []
            for iid in images:
                boxes, scores, labels = capped[iid]
                sel = labels == c
                g = gt_by_image[iid]
                order, flags = match_detections(boxes[sel], scores[sel], g.boxes[g.labels == c], t)
                scores_all.append(scores[sel][order])
                flags_all.append(flags)
            s = np.concatenate(scores_all) if scores_all else np.zeros(0)
            f = np.concatenate(flags_all) if flags_all else np.zeros(0, dtype=bool)
            o = np.argsort(-s, kind="stable")
            pr[ci, ti] = interpolated_precision(f[o], num_gt)
            ap[ci, ti] = float(np.mean(pr[ci, ti]))
    defined = ~np.isnan(ap)
    m = float(ap[defined].mean()) if defined.any() else float("nan")
    return EvalReport(list(cfg.class_ids), T, ap, m, pr, list(class_names or []))
