"""How the detection metric is put together, one small case at a time."""

import numpy as np

from hybridla.datasets import Detections, GroundTruthPage
from hybridla.evaluator import EvalConfig, average_precision, evaluate, interpolated_precision

# Two ground-truth boxes, and a ranked list where the first detection hits and
# the second misses.  Precision at recall 0.5 is 1.0; recall 1.0 is never reached.
flags = [True, False]
curve = interpolated_precision(flags, 2)
print("precision at recall 0, 0.5, 0.51, 1:", curve[[0, 50, 51, 100]])
print("AP =", average_precision(flags, 2), "which is 51/101 =", 51 / 101)

# A whole page: boxes are normalised (cx, cy, w, h).
gt = GroundTruthPage([[0.30, 0.30, 0.20, 0.20], [0.70, 0.65, 0.30, 0.20]], [0, 1], page_id=0)
perfect = Detections(gt.boxes, [0.9, 0.8], gt.labels, 0)
print("perfect predictions:", evaluate([perfect], [gt], EvalConfig([0, 1])).map)

# Shift one box by a few percent of the page: it stays a hit at IoU 0.5 but
# drops out at the stricter thresholds, so the mean over 0.50:0.95 falls.
shifted = Detections(gt.boxes + [[0.03, 0.0, 0.0, 0.0], [0, 0, 0, 0]], [0.9, 0.8], gt.labels, 0)
report = evaluate([shifted], [gt], EvalConfig([0, 1]))
print("AP per IoU threshold, class 0:", np.round(report.ap[0], 3))
print("mAP@[.50:.95] =", round(report.map, 4))

# A class that never appears in the ground truth has no defined AP and is left
# out of the mean rather than counted as zero.
report = evaluate([perfect], [gt], EvalConfig([0, 1, 2]))
print("per-class AP with an absent class:", report.per_class_ap())
