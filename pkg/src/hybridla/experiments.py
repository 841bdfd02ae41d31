"""Small reproducible training experiments on synthetic pages.

These back the acceptance run, the ablation demos and the README walkthrough.
The schedule compresses the 36-epoch recipe into a step budget: the rate drops
by 10x after 30/36 of the epochs, gradients are clipped at 0.5 and an EMA with
decay 0.9999 is tracked alongside the raw weights.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import DatasetSplit, GroundTruthPage, PageConfig, synthetic_split
from .matching import matched_box_l1
from .model import HybriDLA, ModelConfig
from .trainer import TrainConfig, TrainingReport, train

OVERFIT_LR = 1e-3


def overfit_fixture(pages: int = 16, seed: int = 0) -> DatasetSplit:
    """16 pages, 4 classes, 2 to 8 elements each."""
    return synthetic_split(pages, PageConfig(min_elements=2, max_elements=8, class_count=4), seed=seed)


def two_population_fixture(per_group: int = 8) -> DatasetSplit:
    """Pages with exactly 2 elements followed by pages with exactly 8."""
    sparse = synthetic_split(per_group, PageConfig(min_elements=2, max_elements=2), seed=1)
    dense = synthetic_split(per_group, PageConfig(min_elements=8, max_elements=8), seed=2)
    pages = list(sparse.pages)
    for i, (img, gt) in enumerate(dense.pages):
        pages.append((img, GroundTruthPage(gt.boxes, gt.labels, per_group + i)))
    dims = {i: (64, 64) for i in range(2 * per_group)}
    return DatasetSplit(pages, sparse.class_names, sparse.category_ids, dims, {})


def recipe(steps: int, pages: int, batch: int = 4, lr: float = OVERFIT_LR, seed: int = 0) -> TrainConfig:
    """Training config whose epoch count covers ``steps`` and drops the rate at 30/36."""
    per_epoch = -(-pages // batch)
    epochs = max(1, -(-steps // per_epoch))
    return TrainConfig(lr=lr, epochs=epochs, drop_epoch=int(round(epochs * 30 / 36)), batch=batch,
                       max_steps=steps, seed=seed)


@dataclass
class RunResult:
    model: HybriDLA
    report: TrainingReport
    seconds: float
    outputs: list = field(default_factory=list)      # DecoderOutput per page, raw weights

    @property
    def map(self) -> float:
        return self.report.final["map_raw"]

    @property
    def map_ema(self) -> float:
        return self.report.final["map_ema"]


def run(split: DatasetSplit, model_cfg: ModelConfig | None = None, steps: int = 1000,
        lr: float = OVERFIT_LR, seed: int = 0, on_step=None) -> RunResult:
    """Train from scratch on ``split`` and keep the per-page decoder outputs."""
    model = HybriDLA(copy.deepcopy(model_cfg or ModelConfig()))
    t0 = time.perf_counter()
    report = train(model, split, recipe(steps, len(split.pages), lr=lr, seed=seed), on_step=on_step)
    seconds = time.perf_counter() - t0
    return RunResult(model, report, seconds, page_outputs(model, split))


def page_outputs(model: HybriDLA, split: DatasetSplit, batch: int = 8) -> list:
    outs = []
    for start in range(0, len(split.pages), batch):
        chunk = split.pages[start:start + batch]
        outs.extend(model.forward_pages(np.stack([img for img, _ in chunk])))
    return outs


def layer_errors(outputs: list, split: DatasetSplit) -> np.ndarray:
    """(pages, depth) matched-box L1 of every decoder layer, Hungarian-matched per layer."""
    return np.array([[matched_box_l1(stage, gt) for stage in out.stages]
                     for out, (_, gt) in zip(outputs, split.pages)])


def refinement_fraction(outputs: list, split: DatasetSplit) -> float:
    """Share of pages whose last layer is no worse than the first."""
    err = layer_errors(outputs, split)
    keep = ~np.isnan(err[:, 0])
    return float(np.mean(err[keep, -1] <= err[keep, 0]))


def query_counts(outputs: list) -> np.ndarray:
    return np.array([out.num_predictions for out in outputs])


def with_config(result: RunResult, **changes) -> HybriDLA:
    """The trained weights inside a model whose configuration differs only in ``changes``."""
    cfg = copy.deepcopy(result.model.config)
    for k, v in changes.items():
        setattr(cfg, k, v)
    model = HybriDLA(cfg)
    model.load_state_dict(result.model.state_dict())
    return model
