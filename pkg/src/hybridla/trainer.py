"""AdamW training loop with step-decay schedule, gradient clipping and weight EMA."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .evaluator import EvalConfig, evaluate
from .matching import CostMatrixError, LossWeights, eos_targets, make_denoising_queries, set_loss
from .nn import ContractError
from .rng import stream

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, batch_id: int, dump: dict):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump = dump


@dataclass
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 1e-4
    epochs: int = 36
    drop_epoch: int = 30
    batch: int = 4
    clip_norm: float = 0.5
    ema_decay: float = 0.9999
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    checkpoint_every: int = 500
    box_noise: float = 0.1
    label_flip_prob: float = 0.2
    denoising: bool = True
    loss_cls: float = 2.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    loss_eos: float = 1.0
    no_object_weight: float = 0.1

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_cls, self.loss_l1, self.loss_giou, self.loss_eos, self.no_object_weight)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    base_lr: float = 2e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, base_lr=2e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()},
                   0, base_lr, weight_decay, tuple(betas), eps)


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.9999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params: dict, decay: float = 0.9999):
        return cls({k: p.data.copy() for k, p in params.items()}, decay)


@dataclass
class TrainingReport:
    steps: int = 0
    history: list = field(default_factory=list)      # per step: dict of loss components
    final: dict = field(default_factory=dict)        # evaluation of raw and EMA weights
    checkpoints: list = field(default_factory=list)
    optimizer: OptimizerState | None = None
    ema: EmaState | None = None


def lr_at(epoch: int, base_lr: float, drop_epoch: int) -> float:
    """Base rate before ``drop_epoch``, a tenth of it from then on."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr if epoch < drop_epoch else base_lr / 10.0


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return 1.0
    scale = max_norm / total
    for k in grads:
        grads[k] = grads[k] * scale
    return scale


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Adam with bias correction and decoupled weight decay, in place."""
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"no gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def ema_update(ema: EmaState, params: dict) -> None:
    if set(ema.shadow) != set(params):
        diff = sorted(set(ema.shadow) ^ set(params))
        raise ContractError(f"EMA and model parameter names differ: {diff[:5]}")
    d = ema.decay
    for name, p in params.items():
        ema.shadow[name] = d * ema.shadow[name] + (1.0 - d) * p.data


# -- checkpoints -------------------------------------------------------------------
def checkpoint_tensors(model, optimizer: OptimizerState | None = None, ema: EmaState | None = None) -> dict:
    out = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        out["opt.step"] = np.array(float(optimizer.step))
        for name in optimizer.m:
            out[f"opt.m.{name}"] = optimizer.m[name]
            out[f"opt.v.{name}"] = optimizer.v[name]
    if ema is not None:
        for name, arr in ema.shadow.items():
            out[f"ema.{name}"] = arr
    return out


def save_checkpoint(model, optimizer, ema, path) -> None:
    checkpoint.write(path, checkpoint_tensors(model, optimizer, ema))


def split_checkpoint(tensors: dict) -> tuple:
    """Separate a flat tensor map into (model params, optimizer entries, ema shadow)."""
    params, opt, ema = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt."):
            opt[name[4:]] = arr
        elif name.startswith("ema."):
            ema[name[4:]] = arr
        else:
            params[name] = arr
    return params, opt, ema


def load_checkpoint(path, model=None, train_cfg: TrainConfig | None = None) -> tuple:
    """Read a checkpoint.  With ``model`` given, its parameters are overwritten and
    (model, OptimizerState | None, EmaState | None) is returned; otherwise the
    raw (params, opt, ema) dictionaries."""
    params, opt, ema = split_checkpoint(checkpoint.read(path))
    if model is None:
        return params, opt, ema
    model.load_state_dict(params)
    cfg = train_cfg or TrainConfig()
    state = None
    if opt:
        state = OptimizerState({k[2:]: v for k, v in opt.items() if k.startswith("m.")},
                               {k[2:]: v for k, v in opt.items() if k.startswith("v.")},
                               int(opt.get("step", 0)), cfg.lr, cfg.weight_decay, tuple(cfg.betas), cfg.eps)
    shadow = EmaState(ema, cfg.ema_decay) if ema else None
    return model, state, shadow


# -- training loop ------------------------------------------------------------------
def _prepare_page(gt, cfg: TrainConfig, model, rng):
    dn = None
    if cfg.denoising and len(gt):
        dn = make_denoising_queries(gt, cfg.box_noise, cfg.label_flip_prob, rng,
                                    model.config.num_classes, model.decoder.label_embed)
    budget = model.decoder.budget
    n_gt = len(gt)
    return dn, (lambda count: bool(eos_targets([count], n_gt, budget)[0]))


def train_step(model, images, gts, cfg: TrainConfig, rng: np.random.Generator) -> tuple:
    """Forward + loss + backward over one batch; gradients are left on the params."""
    weights = cfg.loss_weights()
    prepared = [_prepare_page(g, cfg, model, rng) for g in gts]
    outs = model.forward_pages(images, dn=[p[0] for p in prepared], halt_targets=[p[1] for p in prepared])
    total = None
    comps = {}
    for out, gt in zip(outs, gts):
        loss, c, _ = set_loss(out.stages, gt, weights, out.dn_stages, out.eos_probs,
                              out.counts_before_step, model.decoder.budget)
        total = loss if total is None else total + loss
        for k, v in c.items():
            comps[k] = comps.get(k, 0.0) + v / len(gts)
    total = total * (1.0 / len(gts))
    comps["total"] = total.item()
    total.backward()
    return total, comps


def evaluate_model(model, split, batch: int = 8) -> float:
    from .model import to_detections
    dets, gts = [], []
    for start in range(0, len(split.pages), batch):
        chunk = split.pages[start:start + batch]
        images = np.stack([img for img, _ in chunk])
        outs = model.forward_pages(images)
        for out, (_, gt) in zip(outs, chunk):
            dets.append(to_detections(out, gt.page_id))
            gts.append(gt)
    cfg = EvalConfig(list(range(model.config.num_classes)))
    return evaluate(dets, gts, cfg).map


def train(model, dataset, config: TrainConfig, checkpoint_path=None, on_step=None,
          evaluate_at_end: bool = True) -> TrainingReport:
    params = model.parameters()
    opt = OptimizerState.for_params(params, config.lr, config.weight_decay, config.betas, config.eps)
    ema = EmaState.from_params(params, config.ema_decay)
    report = TrainingReport(optimizer=opt, ema=ema)
    pages = dataset.pages
    if config.epochs <= 0 or not pages:
        return report
    steps_per_epoch = math.ceil(len(pages) / config.batch)
    step = 0
    for epoch in range(config.epochs):
        order = stream(config.seed, f"shuffle/{epoch}").permutation(len(pages))
        lr = lr_at(epoch, config.lr, config.drop_epoch)
        for b in range(steps_per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[b * config.batch:(b + 1) * config.batch]
            images = np.stack([pages[i][0] for i in idx])
            gts = [pages[i][1] for i in idx]
            model.zero_grads()
            rng = stream(config.seed, f"noise/{step}")
            dump = {"step": step, "epoch": epoch, "pages": [int(i) for i in idx]}
            try:
                total, comps = train_step(model, images, gts, config, rng)
            except CostMatrixError as exc:
                # non-finite predictions poison the matching cost before a loss exists
                dump["error"] = str(exc)
                raise TrainingAborted(f"non-finite loss at step {step} (batch {b} of epoch {epoch})",
                                      step, dump) from exc
            if not np.isfinite(total.item()):
                dump["components"] = comps
                raise TrainingAborted(f"non-finite loss at step {step} (batch {b} of epoch {epoch})",
                                      step, dump)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            comps["clip_scale"] = clip_gradients(grads, config.clip_norm)
            adamw_step(params, grads, opt, lr)
            ema_update(ema, params)
            comps["lr"] = lr
            comps["epoch"] = epoch
            report.history.append(comps)
            step += 1
            if on_step is not None:
                on_step(step, comps)
            if checkpoint_path is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(model, opt, ema, checkpoint_path)
                report.checkpoints.append(step)
        if config.max_steps is not None and step >= config.max_steps:
            break
    report.steps = step
    if checkpoint_path is not None:
        save_checkpoint(model, opt, ema, checkpoint_path)
        report.checkpoints.append(step)
    if evaluate_at_end:
        report.final["map_raw"] = evaluate_model(model, dataset)
        raw = model.state_dict()
        model.load_state_dict(ema.shadow)
        report.final["map_ema"] = evaluate_model(model, dataset)
        model.load_state_dict(raw)
    return report


def report_dict(report: TrainingReport, config: TrainConfig) -> dict:
    return {"steps": report.steps, "final": report.final, "config": asdict(config),
            "last": report.history[-1] if report.history else {}}
