"""Self-verification: oracle suites run by ``hybridla verify``.

Every suite compares a production code path against an independent, slow
reference (finite differences, exhaustive permutations, a loop-based mAP
evaluator) or fuzzes an invariant.  Primitives are looked up through the
``nn`` namespace at call time, so a monkeypatched operator is what gets
checked.
"""

from __future__ import annotations

import itertools
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .boxes import clamp_boxes
from .datasets import Detections, GroundTruthPage
from .encoder import PageFeatures
from .evaluator import COCO_THRESHOLDS, EvalConfig, evaluate
from .matching import LossWeights, assignment_cost, eos_targets, hungarian, make_denoising_queries, set_loss
from .nn import Tensor, grad_check
from .nn import functional as F
from .nn.gradcheck import _rel_err

GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-5


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# -- gradient fidelity ----------------------------------------------------------
def _rand(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


def primitive_cases() -> dict:
    """name -> factory(rng) returning (scalar function of one tensor, input array)."""
    return {
        "matmul": lambda rng: (lambda t, b=_rand(rng, 3, 2): (nn.matmul(t, b) ** 2).sum(), _rand(rng, 4, 3)),
        "matmul_right": lambda rng: (lambda t, a=_rand(rng, 2, 4): (nn.matmul(a, t) ** 2).sum(), _rand(rng, 4, 3)),
        "softmax": lambda rng: (lambda t, w=_rand(rng, 3, 5): (nn.softmax(t, axis=1) * w).sum(), _rand(rng, 3, 5)),
        "log_softmax": lambda rng: (lambda t, w=_rand(rng, 3, 5): (nn.log_softmax(t, axis=1) * w).sum(),
                                    _rand(rng, 3, 5)),
        "layer_norm": lambda rng: (lambda t, w=_rand(rng, 3, 6): (nn.layer_norm(t, np.full(6, 1.3), np.full(6, 0.2))
                                                                   * w).sum(), _rand(rng, 3, 6)),
        "conv2d": lambda rng: (lambda t, k=_rand(rng, 2, 2, 3, 3): (nn.conv2d(t, k, stride=2, pad=1) ** 2).sum(),
                               _rand(rng, 2, 5, 5)),
        "attention": lambda rng: (lambda t, ws=[_rand(rng, 4, 4) * 0.5 for _ in range(4)]:
                                  (F.multi_head_attention(t, t, t, 2, *ws) ** 2).sum(), _rand(rng, 3, 4)),
        "sigmoid": lambda rng: (lambda t: (nn.sigmoid(t) ** 2).sum(), _rand(rng, 7)),
        "tanh": lambda rng: (lambda t: (nn.tanh(t) ** 3).sum(), _rand(rng, 7)),
        "exp_log": lambda rng: (lambda t: nn.log(nn.exp(t) + 1.0).sum(), _rand(rng, 7)),
        "div": lambda rng: (lambda t: (1.0 / (t * t + 1.0)).sum(), _rand(rng, 7)),
        "transpose_reshape": lambda rng: (lambda t, w=_rand(rng, 6, 2): (nn.transpose(t, (1, 0)).reshape(6, 2)
                                                                         * w).sum() ** 2, _rand(rng, 2, 6)),
        "concat_index": lambda rng: (lambda t: (nn.concat([t[1:], t[:2] * 3.0]) ** 2).sum(), _rand(rng, 5)),
        "sine_embed": lambda rng: (lambda t, w=_rand(rng, 3, 8): (F.sine_embed_tensor(t, 4) * w).sum(),
                                   rng.uniform(0, 1, size=(3, 2))),
        "bilinear_points": lambda rng: (lambda t, f=_rand(rng, 4, 5, 3): (nn.bilinear_sample(f, t) ** 2).sum(),
                                        rng.uniform(0.15, 0.85, size=(6, 2))),
        "bilinear_features": lambda rng: (lambda t, p=rng.uniform(0, 1, size=(6, 2)):
                                          (nn.bilinear_sample(t, p) ** 2).sum(), _rand(rng, 4, 5, 3)),
    }


def primitive_gradient_errors(trials: int = 50) -> dict:
    """Worst relative error per primitive over ``trials`` random inputs."""
    out = {}
    for name, factory in primitive_cases().items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = 0.0
        for _ in range(trials):
            f, x = factory(rng)
            worst = max(worst, grad_check(f, x, h=FD_STEP))
        out[name] = worst
    return out


def tiny_model(seed: int = 0):
    from .model import HybriDLA, ModelConfig
    return HybriDLA(ModelConfig(dim=8, heads=2, levels=2, depth=2, n_init=3, n_aqe=2, group_size=1,
                                num_classes=3, ffn_dim=8, seed=seed))


def model_loss_gradient_error(seed: int, coords_per_param: int = 1) -> tuple:
    """Finite-difference check of the full training loss of a tiny model (every
    layer, denoising queries and end-of-sequence supervision included).

    Reference boxes must not be detached, or reverse mode would differentiate
    a different function than finite differences do.  Returns (worst error, coords).
    """
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    model.decoder.detach_refs = False
    image = rng.uniform(0, 1, (1, 3, 16, 16))
    gt = GroundTruthPage(np.c_[rng.uniform(0.3, 0.7, (2, 2)), rng.uniform(0.1, 0.3, (2, 2))],
                         rng.integers(0, 3, 2))
    budget = model.decoder.budget

    def halt(count):
        return bool(eos_targets([count], len(gt), budget)[0])

    def loss():
        dn = make_denoising_queries(gt, 0.1, 0.2, np.random.default_rng(seed), 3, model.decoder.label_embed)
        out = model.forward_pages(image, dn=[dn], halt_targets=[halt])[0]
        return set_loss(out.stages, gt, LossWeights(), out.dn_stages, out.eos_probs,
                        out.counts_before_step, budget)[0]

    params = model.parameters()
    model.zero_grads()
    loss().backward()
    worst, n = 0.0, 0
    for p in params.values():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size)
        for i in rng.choice(flat.size, min(coords_per_param, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + FD_STEP
            up = loss().item()
            flat[i] = old - FD_STEP
            down = loss().item()
            flat[i] = old
            fd = (up - down) / (2 * FD_STEP)
            worst = max(worst, _rel_err(np.array([grad[i]]), np.array([fd])))
            n += 1
    return worst, n


def gradient_suite(trials: int = 50, model_seeds=(0, 1, 2)) -> SuiteResult:
    t0 = time.perf_counter()
    errs = primitive_gradient_errors(trials)
    bad = {k: v for k, v in errs.items() if not v < GRAD_TOLERANCE}
    model_worst, coords = 0.0, 0
    for s in model_seeds:
        w, n = model_loss_gradient_error(s)
        model_worst, coords = max(model_worst, w), coords + n
    ok = not bad and model_worst < GRAD_TOLERANCE
    detail = (f"{len(errs)} primitives x {trials} trials, worst {max(errs.values()):.1e}; "
              f"model loss {coords} coords, worst {model_worst:.1e}")
    if bad:
        detail += "; failing: " + ", ".join(f"{k} ({v:.2e})" for k, v in sorted(bad.items()))
    return SuiteResult("gradients", ok, detail, time.perf_counter() - t0)


# -- Hungarian -------------------------------------------------------------------
def brute_force_assignment_cost(C: np.ndarray) -> float:
    """Exhaustive minimum over all injective maps of the smaller side.  Each
    candidate is summed in row order, the same order as ``assignment_cost``."""
    C = np.asarray(C, dtype=np.float64)
    m, n = C.shape
    if m == 0 or n == 0:
        return 0.0
    best = np.inf
    if m <= n:
        candidates = (list(zip(range(m), cols)) for cols in itertools.permutations(range(n), m))
    else:
        candidates = (sorted(zip(rows, range(n))) for rows in itertools.permutations(range(m), n))
    for pairs in candidates:
        s = 0.0
        for r, c in pairs:
            s += C[r, c]
        best = min(best, s)
    return best


def random_cost_matrix(rng) -> np.ndarray:
    m, n = rng.integers(0, 9, size=2)
    if min(m, n) > 7:
        m = 7
    kind = rng.integers(3)
    if kind == 0:
        return rng.uniform(-5, 5, size=(m, n))
    if kind == 1:
        return rng.integers(0, 4, size=(m, n)).astype(np.float64)      # many ties
    return np.round(rng.normal(0, 10, size=(m, n)))                  # integers, exact sums


def hungarian_suite(cases: int = 1000, seed: int = 7) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(cases):
        C = random_cost_matrix(rng)
        a = hungarian(C)
        got = assignment_cost(C, a)
        want = brute_force_assignment_cost(C)
        cols = [j for _, j in a.pairs]
        if len(a.pairs) != min(C.shape) or len(set(cols)) != len(cols) or got != want:
            failures += 1
    return SuiteResult("hungarian", failures == 0, f"{cases} cost matrices, {failures} mismatches",
                       time.perf_counter() - t0)


# -- mAP -----------------------------------------------------------------------------
def naive_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def naive_map(predictions, gts, class_ids, thresholds=COCO_THRESHOLDS, max_det: int = 100) -> float:
    """Loop-based reference evaluator following the same written rules as the
    production one, without sharing any of its code."""
    gt_map = {g.page_id: g for g in gts}
    image_rank = {iid: r for r, iid in enumerate(sorted(gt_map, key=lambda i: (type(i).__name__, i)))}
    dets = {}
    for d in predictions:
        dets.setdefault(d.image_id, [])
        for k in range(len(d.labels)):
            dets[d.image_id].append((float(d.scores[k]), list(d.boxes[k]), int(d.labels[k])))
    kept = {}
    for iid, items in dets.items():
        ranked = sorted(range(len(items)), key=lambda k: (-items[k][0], k))[:max_det]
        kept[iid] = [items[k] for k in sorted(ranked)]
    aps = []
    for c in class_ids:
        num_gt = sum(1 for g in gts for lab in g.labels if lab == c)
        if num_gt == 0:
            continue
        for t in thresholds:
            entries = []
            for iid, items in kept.items():
                mine = [it for it in items if it[2] == c]
                for pos, it in enumerate(mine):
                    entries.append((-it[0], image_rank[iid], pos, iid, it[1]))
            entries.sort(key=lambda e: e[:3])
            used = {iid: set() for iid in gt_map}
            flags = []
            for _, _, _, iid, box in entries:
                g = gt_map[iid]
                best, best_j = -1.0, -1
                for j in range(len(g.labels)):
                    if g.labels[j] != c or j in used[iid]:
                        continue
                    v = naive_iou(box, g.boxes[j])
                    if v > best:
                        best, best_j = v, j
                if best_j >= 0 and best >= t:
                    used[iid].add(best_j)
                    flags.append(True)
                else:
                    flags.append(False)
            tp = fp = 0
            recalls, precisions = [], []
            for f in flags:
                tp += f
                fp += not f
                recalls.append(tp / num_gt)
                precisions.append(tp / (tp + fp))
            total = 0.0
            for k in range(101):
                r = k / 100.0
                best = 0.0
                for rec, prec in zip(recalls, precisions):
                    if rec >= r and prec > best:
                        best = prec
                total += best
            aps.append(total / 101)
    return float(np.mean(aps)) if aps else float("nan")


def random_scenario(rng, n_classes: int = 5):
    """Random ground truth (<= 15 per image, <= 4 images) plus <= 30 detections per
    image mixing jittered copies, duplicates, random boxes and tied scores."""
    n_images = int(rng.integers(1, 5))
    gts, preds = [], []
    for iid in range(n_images):
        n = int(rng.integers(0, 16))
        boxes = np.c_[rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.4, (n, 2))]
        labels = rng.integers(0, n_classes, n)
        gts.append(GroundTruthPage(boxes, labels, iid))
        pb, ps, pl = [], [], []
        for b, lab in zip(boxes, labels):
            for _ in range(int(rng.integers(0, 3))):
                pb.append(b + rng.normal(0, 0.03, 4) * [1, 1, 0.5, 0.5])
                pl.append(lab if rng.random() < 0.85 else rng.integers(0, n_classes))
                ps.append(np.round(rng.random(), 1))
        for _ in range(int(rng.integers(0, 6))):
            pb.append(np.r_[rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])
            pl.append(rng.integers(0, n_classes))
            ps.append(np.round(rng.random(), 1))
        keep = rng.permutation(len(pb))[:30]
        pb = np.abs(np.array(pb).reshape(-1, 4)[keep]) + [0, 0, 1e-3, 1e-3]
        preds.append(Detections(pb, np.array(ps)[keep], np.array(pl, dtype=np.int64)[keep], iid))
    return preds, gts


def map_suite(scenarios: int = 200, seed: int = 11) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    classes = [0, 1, 2, 3, 4]
    worst = 0.0
    for _ in range(scenarios):
        preds, gts = random_scenario(rng)
        cap = int(rng.integers(5, 40))
        got = evaluate(preds, gts, EvalConfig(classes, max_detections_per_image=cap)).map
        want = naive_map(preds, gts, classes, max_det=cap)
        if np.isnan(got) and np.isnan(want):
            continue
        worst = max(worst, abs(got - want)) if not (np.isnan(got) or np.isnan(want)) else np.inf
    # fixed cases: perfect, empty, one TP then one FP with two gt
    g = [GroundTruthPage([[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]], [0, 1], 0)]
    perfect = evaluate([Detections(g[0].boxes, [1, 1], g[0].labels, 0)], g, EvalConfig([0, 1])).map
    empty = evaluate([], g, EvalConfig([0, 1])).map
    g2 = [GroundTruthPage([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], [0, 0], 0)]
    hand = evaluate([Detections([[0.3, 0.3, 0.2, 0.2], [0.5, 0.1, 0.05, 0.05]], [0.9, 0.8], [0, 0], 0)],
                    g2, EvalConfig([0], iou_thresholds=(0.5,))).ap[0, 0]
    ok = worst <= 1e-9 and perfect == 1.0 and empty == 0.0 and hand == 51 / 101
    detail = (f"{scenarios} scenarios, worst |diff| {worst:.1e}; perfect {perfect}, empty {empty}, "
              f"1TP+1FP/2gt {hand:.6f} (51/101 = {51 / 101:.6f})")
    return SuiteResult("map", ok, detail, time.perf_counter() - t0)


# -- clamp and budget fuzz -------------------------------------------------------------
def fuzz_suite(cases: int = 300, seed: int = 5) -> SuiteResult:
    """Refined boxes stay in range and query counts never exceed N_init + N_aqe."""
    from .decoder import HybridDecoder
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    problems = []
    for k in range(cases):
        b = clamp_boxes(Tensor(rng.normal(0.5, 2.0, size=(5, 4)))).data
        if not ((b[:, :2] >= 0).all() and (b[:, :2] <= 1).all() and (b[:, 2:] >= 1e-3).all()
                and (b[:, 2:] <= 1).all()):
            problems.append(f"clamp case {k}")
    for k in range(cases // 10):
        n_init, n_aqe, group = (int(v) for v in rng.integers(1, 7, size=3))
        aqe = bool(rng.random() < 0.8)
        dec = HybridDecoder(8, 2, int(rng.integers(1, 4)), 3, n_init, n_aqe, group, seed=k, ffn_dim=8,
                            eos_threshold=float(rng.choice([0.0, 0.5, 1.0, 1.1])), aqe_enabled=aqe)
        with np.errstate(over="ignore"):
            dec.box_mlp.layers[-1].weight.data += rng.normal(0, 5.0, dec.box_mlp.layers[-1].weight.shape)
            for layer in dec.layers:
                layer.box_head.layers[-1].weight.data += rng.normal(0, 5.0, layer.box_head.layers[-1].weight.shape)
        ctx = PageFeatures(Tensor(rng.normal(0, 1, (6, 8))), np.zeros((6, 8)), [0], [(2, 3)])
        out = dec.generate(ctx)
        bx = out.queries.boxes.data
        limit = n_init + (n_aqe if aqe else 0)
        if out.num_predictions > limit:
            problems.append(f"budget case {k}: {out.num_predictions} > {limit}")
        if not aqe and out.num_predictions != n_init:
            problems.append(f"aqe-off case {k}: {out.num_predictions} != {n_init}")
        if not ((bx[:, :2] >= 0).all() and (bx[:, :2] <= 1).all() and (bx[:, 2:] >= 1e-3).all()
                and (bx[:, 2:] <= 1).all()):
            problems.append(f"box range case {k}")
    detail = f"{cases} clamp + {cases // 10} decoder runs, " + (
        f"{len(problems)} problems: {problems[:3]}" if problems else "no violations")
    return SuiteResult("clamp_budget", not problems, detail, time.perf_counter() - t0)


SUITES = {"gradients": gradient_suite, "hungarian": hungarian_suite, "map": map_suite,
          "clamp_budget": fuzz_suite}


def run_all(names=None) -> list:
    return [SUITES[n]() for n in (names or SUITES)]


def format_table(results: list) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'suite':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
