"""Bipartite matching and the set-prediction training objective."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .boxes import giou_tensor, pairwise_giou
from .datasets import GroundTruthPage
from .decoder import DENOISING, QuerySequence
from .nn import Tensor, clamp, log, log_softmax, tabs, where


class CostMatrixError(ValueError):
    pass


@dataclass
class MatchAssignment:
    pairs: list                     # [(prediction_index, gt_index)] sorted by prediction index
    unmatched_predictions: list

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    eos: float = 1.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


# -- Hungarian algorithm ----------------------------------------------------------
def _solve_square(C: np.ndarray) -> tuple:
    """Shortest augmenting path Hungarian method.  Returns (row->col, u, v)."""
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)     # p[j]: row (1-based) holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lexicographic(C: np.ndarray, row_to_col: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Among optimal assignments (perfect matchings on tight edges) pick the
    lexicographically smallest column sequence."""
    n = C.shape[0]
    scale = max(1.0, float(np.abs(C).max()))
    tight = (C - u[:, None] - v[None, :]) <= 1e-12 * scale * n
    r2c = row_to_col.copy()
    c2r = np.empty(n, dtype=np.int64)
    c2r[r2c] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if j == r2c[i]:
                break
            if c2r[j] < i:
                continue
            # reroute: free column j from its row by an alternating path that ends at r2c[i]
            target = r2c[i]
            start = c2r[j]
            prev = {start: None}
            queue = deque([start])
            found = None
            while queue and found is None:
                r = queue.popleft()
                for c in np.flatnonzero(tight[r]):
                    if c == j or c2r[c] < i:
                        continue
                    if c == target:
                        found = (r, c)
                        break
                    nr = c2r[c]
                    if nr not in prev and nr != i:
                        prev[nr] = (r, c)
                        queue.append(nr)
            if found is None:
                continue
            r, c = found
            while True:
                old = r2c[r]
                r2c[r] = c
                c2r[c] = r
                if prev[r] is None:
                    break
                r, c = prev[r][0], old
            r2c[i] = j
            c2r[j] = i
            break
    return r2c


def hungarian(cost) -> MatchAssignment:
    """Minimum-cost assignment of min(m, n) pairs.  Ties resolve to the
    lexicographically smallest column choice in row order."""
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise CostMatrixError(f"cost must be a matrix, got shape {C.shape}")
    if np.isnan(C).any():
        raise CostMatrixError("cost matrix contains NaN")
    if not np.isfinite(C).all():
        raise CostMatrixError("cost matrix contains infinite entries")
    m, n = C.shape
    if m == 0 or n == 0:
        return MatchAssignment([], list(range(m)))
    k = max(m, n)
    S = np.zeros((k, k))
    S[:m, :n] = C
    r2c, u, v = _solve_square(S)
    r2c = _lexicographic(S, r2c, u, v)
    pairs = [(i, int(r2c[i])) for i in range(m) if r2c[i] < n]
    matched = {p for p, _ in pairs}
    return MatchAssignment(pairs, [i for i in range(m) if i not in matched])


def assignment_cost(cost, assignment: MatchAssignment) -> float:
    C = np.asarray(cost, dtype=np.float64)
    total = 0.0
    for i, j in assignment.pairs:
        total += C[i, j]
    return total


# -- costs and losses -----------------------------------------------------------------
def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def matching_cost(logits, boxes, gt: GroundTruthPage, weights: LossWeights) -> np.ndarray:
    """cost[i, j] = cls*(-p_i(c_j)) + l1*|b_i - g_j|_1 + giou*(1 - GIoU(b_i, g_j))."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    boxes = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes, dtype=np.float64)
    if len(gt) == 0:
        return np.zeros((len(logits), 0))
    probs = _softmax_np(logits)
    c_cls = -probs[:, gt.labels]
    c_l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    c_giou = 1.0 - pairwise_giou(boxes, gt.boxes)
    return weights.cls * c_cls + weights.l1 * c_l1 + weights.giou * c_giou


def _weighted_ce(logits: Tensor, targets: np.ndarray, w: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(targets)), targets]
    return -(picked * w).sum() * (1.0 / w.sum())


def _box_terms(boxes: Tensor, target: np.ndarray, norm: float) -> tuple:
    l1 = tabs(boxes - target).sum() * (1.0 / norm)
    g = (1.0 - giou_tensor(boxes, target)).sum() * (1.0 / norm)
    return l1, g


def layer_loss(logits: Tensor, boxes: Tensor, gt: GroundTruthPage, weights: LossWeights,
               assignment: MatchAssignment | None = None) -> tuple:
    """Loss of one prediction set against a page; returns (cls, l1, giou, assignment)."""
    n = logits.shape[0]
    K = logits.shape[1] - 1
    if assignment is None:
        assignment = hungarian(matching_cost(logits, boxes, gt, weights))
    targets = np.full(n, K, dtype=np.int64)
    w = np.full(n, weights.no_object_weight)
    pi, gi = assignment.pred_indices, assignment.gt_indices
    if len(pi):
        targets[pi] = gt.labels[gi]
        w[pi] = 1.0
    cls = _weighted_ce(logits, targets, w)
    if len(pi) == 0:
        zero = Tensor(0.0)
        return cls, zero, zero, assignment
    l1, g = _box_terms(boxes[pi], gt.boxes[gi], max(len(gt), 1))
    return cls, l1, g, assignment


def eos_targets(counts_before_step, gt_count: int, budget: int | None = None) -> np.ndarray:
    need = gt_count if budget is None else min(gt_count, budget)
    return np.array([1.0 if c >= need else 0.0 for c in counts_before_step])


def eos_supervision(eos_probs, counts_before_step, gt_count: int, budget: int | None = None) -> Tensor:
    """Binary cross-entropy of each step's halt probability against a target of
    1 once the ordinary queries already cover the ground-truth count."""
    if len(eos_probs) == 0:
        return Tensor(0.0)
    t = eos_targets(counts_before_step, gt_count, budget)
    p = eos_probs if isinstance(eos_probs, Tensor) else _stack_scalars(eos_probs)
    pos = clamp(p, 1e-12, 1.0)
    negp = clamp(1.0 - p, 1e-12, 1.0)
    ll = where(t > 0.5, log(pos), log(negp))
    return -ll.sum() * (1.0 / len(t))


def _stack_scalars(values) -> Tensor:
    from .nn import stack
    return stack([v if isinstance(v, Tensor) else Tensor(v) for v in values])


def make_denoising_queries(gt: GroundTruthPage, box_noise: float, label_flip_prob: float,
                           rng: np.random.Generator, num_classes: int, label_embed=None) -> QuerySequence:
    """One query per ground-truth element with a jittered box and a possibly flipped
    label.  ``label_embed`` (num_classes, C) maps labels to embeddings; without it
    the embeddings are one-hot label vectors."""
    if box_noise < 0:
        raise ValueError("box_noise must be non-negative")
    n = len(gt)
    if n == 0:
        return QuerySequence(Tensor(np.zeros((0, num_classes))), Tensor(np.zeros((0, 4))), [], [])
    noise = rng.uniform(-box_noise, box_noise, size=(n, 4))
    flip = rng.random(n) < label_flip_prob
    random_labels = rng.integers(0, num_classes, size=n)
    boxes = gt.boxes + noise
    boxes[:, :2] = np.clip(boxes[:, :2], 0.0, 1.0)
    boxes[:, 2:] = np.clip(boxes[:, 2:], 1e-3, 1.0)
    labels = np.where(flip, random_labels, gt.labels)
    if label_embed is None:
        emb = Tensor(np.eye(num_classes)[labels])
    else:
        emb = label_embed[labels]
    return QuerySequence(emb, Tensor(boxes), [DENOISING] * n, [0] * n,
                         history=[[b.copy()] for b in boxes], residuals=[[] for _ in range(n)])


def set_loss(stages, gt: GroundTruthPage, weights: LossWeights, dn_stages=None,
             eos_probs=None, eos_counts=None, budget: int | None = None) -> tuple:
    """Total objective of one page: mean over layers of the matched set loss, plus
    the denoising reconstruction loss and end-of-sequence supervision.

    ``stages`` is a list of objects with ``logits`` and ``boxes`` tensors (or
    (logits, boxes) pairs).  Returns (total Tensor, components dict, assignments).
    """
    if not stages:
        raise ValueError("set_loss needs at least one decoder layer of predictions")
    comps = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "dn_cls": 0.0, "dn_l1": 0.0, "dn_giou": 0.0, "eos": 0.0}
    total = Tensor(0.0)
    assignments = []
    inv = 1.0 / len(stages)
    for st in stages:
        logits, boxes = (st.logits, st.boxes) if hasattr(st, "logits") else st
        cls, l1, g, a = layer_loss(logits, boxes, gt, weights)
        assignments.append(a)
        total = total + (cls * weights.cls + l1 * weights.l1 + g * weights.giou) * inv
        comps["cls"] += cls.item() * inv
        comps["l1"] += l1.item() * inv
        comps["giou"] += g.item() * inv
    if dn_stages:
        dinv = 1.0 / len(dn_stages)
        ident = MatchAssignment([(i, i) for i in range(len(gt))], [])
        for logits, boxes in dn_stages:
            cls, l1, g, _ = layer_loss(logits, boxes, gt, weights, assignment=ident)
            total = total + (cls * weights.cls + l1 * weights.l1 + g * weights.giou) * dinv
            comps["dn_cls"] += cls.item() * dinv
            comps["dn_l1"] += l1.item() * dinv
            comps["dn_giou"] += g.item() * dinv
    if eos_probs:
        e = eos_supervision(eos_probs, eos_counts, len(gt), budget)
        total = total + e * weights.eos
        comps["eos"] = e.item()
    comps["total"] = total.item()
    return total, comps, assignments


def matched_box_l1(stage, gt: GroundTruthPage, weights: LossWeights | None = None) -> float:
    """Mean per-box L1 distance between Hungarian-matched predictions and ground
    truth for one stage of predictions; NaN when the page has no elements."""
    if len(gt) == 0:
        return float("nan")
    logits, boxes = (stage.logits, stage.boxes) if hasattr(stage, "logits") else stage
    a = hungarian(matching_cost(logits, boxes, gt, weights or LossWeights()))
    b = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes)
    return float(np.abs(b[a.pred_indices] - gt.boxes[a.gt_indices]).sum(axis=1).mean())
