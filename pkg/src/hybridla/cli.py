"""``hybridla`` command line: train, eval, infer, ablate, verify.

Exit codes: 0 ok, 1 verification or training failure, 2 configuration error,
3 artifact or shape error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, RunConfigError, describe_defaults, load_config
from .datasets import (CocoFormatError, DatasetSplit, Detections, SyntheticPage, export_results, load_coco,
                       load_results, load_synthetic, rasterize, synthetic_split)
from .evaluator import EvalInputError, evaluate
from .matching import matched_box_l1
from .model import HybriDLA, to_detections
from .nn import ShapeError
from .trainer import TrainingAborted, load_checkpoint, save_checkpoint, train

log = logging.getLogger("hybridla")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_IO = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
CLASS_COLORS = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0",
                "#f032e6", "#bcf60c", "#008080", "#9a6324", "#800000"]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- shared plumbing ---------------------------------------------------------------
def _setup_logging() -> None:
    level = os.environ.get("HYBRIDLA_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise CliError(EXIT_CONFIG, f"HYBRIDLA_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(cfg: RunConfig, need_images: bool = True) -> DatasetSplit:
    """The dataset named by the ``data`` section."""
    d = cfg.data
    if d.mode == "synthetic":
        if d.synthetic_path:
            pages = load_synthetic(d.synthetic_path)
            items = [(rasterize(p, d.image_size), p.ground_truth(i)) for i, p in enumerate(pages)]
            names = [f"class{i}" for i in range(d.class_count)]
            return DatasetSplit(items, names, list(range(d.class_count)),
                                {i: tuple(p.canvas) for i, p in enumerate(pages)})
        return synthetic_split(d.pages, cfg.page_config(), d.seed, d.image_size)
    split = load_coco(d.annotations)
    if len(split.class_names) != cfg.model.num_classes:
        raise CliError(EXIT_CONFIG, f"data.annotations: {len(split.class_names)} categories but "
                                    f"model.num_classes is {cfg.model.num_classes}")
    if d.images:
        images = np.load(d.images)
        if images.ndim != 4 or len(images) != len(split.pages) or images.shape[1] != 3:
            raise CliError(EXIT_ARTIFACT, f"data.images: expected ({len(split.pages)}, 3, S, S), "
                                          f"got {images.shape}")
        split.pages = [(images[i].astype(np.float64), gt) for i, (_, gt) in enumerate(split.pages)]
    elif need_images:
        raise CliError(EXIT_CONFIG, "data.images is required to run the model on COCO data")
    return split


def load_model(cfg: RunConfig, path) -> HybriDLA:
    model = HybriDLA(copy.deepcopy(cfg.model))
    try:
        load_checkpoint(path, model, cfg.train)
    except (ShapeError, KeyError) as exc:
        raise CliError(EXIT_ARTIFACT, f"checkpoint {path} does not fit the configured model: {exc}") from exc
    return model


def predict_split(model: HybriDLA, split: DatasetSplit, batch: int = 8) -> tuple:
    """(Detections per page, DecoderOutput per page)."""
    dets, outs = [], []
    for start in range(0, len(split.pages), batch):
        chunk = split.pages[start:start + batch]
        for out, (_, gt) in zip(model.forward_pages(np.stack([img for img, _ in chunk])), chunk):
            outs.append(out)
            dets.append(to_detections(out, gt.page_id))
    return dets, outs


def _ap_table(report) -> str:
    lines = [f"mAP {report.map:.3f}", f"{'class':<16} AP"]
    names = report.class_names or [str(c) for c in report.class_ids]
    for name, (cid, ap) in zip(names, report.per_class_ap().items()):
        lines.append(f"{name:<16} {'n/a' if ap is None else f'{ap:.3f}'}")
    return "\n".join(lines)


# -- train ---------------------------------------------------------------------------
LOSS_COLUMNS = ["step", "epoch", "lr", "total", "cls", "l1", "giou", "dn_cls", "dn_l1", "dn_giou", "eos",
                "clip_scale"]


def write_loss_curve(history: list, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for i, h in enumerate(history):
            w.writerow([i + 1] + [repr(float(h.get(k, 0.0))) for k in LOSS_COLUMNS[1:]])


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    split = load_split(cfg)
    model = HybriDLA(copy.deepcopy(cfg.model))
    path = out / "checkpoint.hdla"

    def progress(step, comps):
        if step % 50 == 0 or step == 1:
            log.info("step %d loss %.4f lr %.2e", step, comps["total"], comps["lr"])

    try:
        report = train(model, split, cfg.train, checkpoint_path=path, on_step=progress,
                       evaluate_at_end=len(split.pages) > 0)
    except TrainingAborted as exc:
        _write_json(out / "abort.json", exc.dump)
        raise CliError(EXIT_FAIL, f"{exc}; diagnostic dump in {out / 'abort.json'}") from exc
    if report.steps == 0:
        save_checkpoint(model, report.optimizer, report.ema, path)
    write_loss_curve(report.history, out / "loss_curve.csv")
    metrics = {"steps": report.steps, "train_map": report.final.get("map_raw"),
               "train_map_ema": report.final.get("map_ema"), "pages": len(split.pages),
               "final_loss": report.history[-1] if report.history else {}, "config": cfg.to_dict()}
    _write_json(out / "metrics.json", metrics)
    if report.final:
        print(f"steps {report.steps}  train mAP {report.final['map_raw']:.3f}  "
              f"(EMA weights {report.final['map_ema']:.3f})")
    else:
        print(f"steps {report.steps}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------
def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    if bool(args.checkpoint) == bool(args.predictions):
        raise CliError(EXIT_CONFIG, "eval needs exactly one of --checkpoint or --predictions")
    split = load_split(cfg, need_images=bool(args.checkpoint))
    if args.checkpoint:
        dets, _ = predict_split(load_model(cfg, args.checkpoint), split)
    else:
        dets = load_results(args.predictions, split.image_dims, split.category_ids or None)
    class_ids = list(range(len(split.class_names)))
    report = evaluate(dets, [gt for _, gt in split.pages], cfg.eval_config(class_ids), split.class_names)
    report.write_json(out / "report.json")
    report.write_pr_csv(out / "pr_curves.csv")
    print(_ap_table(report))
    return EXIT_OK


# -- infer -----------------------------------------------------------------------------
def _read_input(path: str, size: int) -> tuple:
    """-> (images (N,3,S,S), image ids, canvas dims per id)."""
    p = Path(path)
    if p.suffix == ".npy":
        arr = np.load(p).astype(np.float64)
        arr = arr[None] if arr.ndim == 3 else arr
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise CliError(EXIT_ARTIFACT, f"{path}: expected (3, S, S) or (N, 3, S, S), got {arr.shape}")
        ids = list(range(len(arr)))
        return arr, ids, {i: (arr.shape[3], arr.shape[2]) for i in ids}
    doc = json.loads(p.read_text(encoding="utf-8"))
    pages = [SyntheticPage.from_json(d) for d in (doc if isinstance(doc, list) else [doc])]
    ids = list(range(len(pages)))
    return (np.stack([rasterize(pg, size) for pg in pages]) if pages else np.zeros((0, 3, size, size)),
            ids, {i: tuple(pg.canvas) for i, pg in zip(ids, pages)})


def render_svg(det: Detections, dims: tuple, class_names: list) -> str:
    """Page outline plus one class-coloured rectangle per detection."""
    W, H = dims
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}" style="background:#ffffff">']
    for box, score, lab in zip(det.boxes, det.scores, det.labels):
        cx, cy, w, h = box
        x, y = (cx - w / 2) * W, (cy - h / 2) * H
        color = CLASS_COLORS[int(lab) % len(CLASS_COLORS)]
        name = class_names[int(lab)] if int(lab) < len(class_names) else str(int(lab))
        parts.append(f'  <rect class="detection" x="{x:.2f}" y="{y:.2f}" width="{w * W:.2f}" '
                     f'height="{h * H:.2f}" fill="none" stroke="{color}" stroke-width="1">'
                     f'<title>{name} {score:.3f}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_infer(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    model = load_model(cfg, args.checkpoint)
    images, ids, dims = _read_input(args.input, cfg.data.image_size)
    dets = model.detect(images, ids) if len(images) else []
    thr = cfg.eval.score_threshold
    kept = []
    for d in dets:
        keep = d.scores >= thr
        kept.append(Detections(d.boxes[keep], d.scores[keep], d.labels[keep], d.image_id))
    names = [f"class{i}" for i in range(cfg.model.num_classes)]
    export_results(kept, dims, out / "results.json")
    for d in kept:
        (out / f"overlay_{d.image_id}.svg").write_text(render_svg(d, dims[d.image_id], names), encoding="utf-8")
    print(f"{sum(len(d) for d in kept)} detections at score >= {thr} on {len(kept)} page(s)")
    return EXIT_OK


# -- ablate ------------------------------------------------------------------------------
ABLATION_COLUMNS = ["cell", "dr_enabled", "aqe_enabled", "depth", "n_init", "n_aqe", "steps",
                    "map", "map_ema", "mean_predictions", "final_layer_l1"]


def ablation_cells(cfg: RunConfig) -> list:
    a, m = cfg.ablate, cfg.model
    axes = [a.dr_enabled or [m.dr_enabled], a.aqe_enabled or [m.aqe_enabled], a.depth or [m.depth],
            a.n_init or [m.n_init], a.n_aqe or [m.n_aqe]]
    return [dict(zip(("dr_enabled", "aqe_enabled", "depth", "n_init", "n_aqe"), combo))
            for combo in itertools.product(*axes)]


def run_cell(cfg: RunConfig, cell: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    for k, v in cell.items():
        setattr(cfg.model, k, v)
    cfg.model.validate()
    split = load_split(cfg)
    model = HybriDLA(cfg.model)
    report = train(model, split, cfg.train, evaluate_at_end=True)
    _, outs = predict_split(model, split)
    l1 = [matched_box_l1(o.stages[-1], gt) for o, (_, gt) in zip(outs, split.pages) if len(gt)]
    return dict(cell, steps=report.steps, map=report.final["map_raw"], map_ema=report.final["map_ema"],
                mean_predictions=float(np.mean([o.num_predictions for o in outs])),
                final_layer_l1=float(np.mean(l1)) if l1 else float("nan"))


def _run_cell_job(job):
    index, cfg, cell = job
    return index, run_cell(cfg, cell)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    cells = ablation_cells(cfg)
    if args.workers < 1:
        raise CliError(EXIT_CONFIG, "--workers must be at least 1")
    jobs = [(i, cfg, c) for i, c in enumerate(cells)]
    log.info("ablation over %d cells with %d worker(s)", len(cells), args.workers)
    if args.workers == 1:
        results = [_run_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    results.sort(key=lambda r: r[0])
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for i, row in results:
            w.writerow([i] + [row[k] if not isinstance(row[k], float) else repr(row[k])
                              for k in ABLATION_COLUMNS[1:]])
    for i, row in results:
        print(f"cell {i}: dr={row['dr_enabled']} aqe={row['aqe_enabled']} depth={row['depth']} "
              f"n_init={row['n_init']} n_aqe={row['n_aqe']}  mAP {row['map']:.3f}  "
              f"preds/page {row['mean_predictions']:.2f}")
    return EXIT_OK


# -- verify ----------------------------------------------------------------------------------
def cmd_verify(args) -> int:
    from . import verify
    results = verify.run_all()
    print(verify.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridla", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Document layout detector: training, evaluation, inference and ablations.",
        epilog="configuration keys and defaults:\n" + describe_defaults()
        + "\n\nexit codes: 0 ok, 1 failure, 2 config error, 3 artifact/shape error, 4 I/O error")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override train.seed and model.seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train on the configured data")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="evaluate a checkpoint or a COCO results file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="COCO results JSON to score instead of running a model")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("infer", help="detect on a synthetic page JSON or an image .npy")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infer)
    p = sub.add_parser("ablate", help="train and evaluate every cell of the ablation grid")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("verify", help="run the oracle suites")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _setup_logging()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except RunConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ckpt.CheckpointError, ShapeError, CocoFormatError, EvalInputError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
