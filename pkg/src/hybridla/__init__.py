"""Hybrid generative document layout detector on a small numpy autodiff engine.

Main entry points: :class:`HybriDLA` and :class:`ModelConfig` for the model,
:func:`train` / :class:`TrainConfig` for optimisation, :func:`evaluate` for
COCO-style mAP, and :mod:`hybridla.datasets` for synthetic pages and COCO I/O.
"""

from .datasets import (DOCLAYNET_CLASSES, DatasetSplit, Detections, GroundTruthPage, PageConfig, SyntheticPage,
                       generate_page, load_coco, rasterize, synthetic_split)
from .evaluator import EvalConfig, EvalReport, evaluate
from .matching import LossWeights, hungarian, set_loss
from .model import HybriDLA, ModelConfig, to_detections
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DOCLAYNET_CLASSES", "DatasetSplit", "Detections", "GroundTruthPage", "PageConfig", "SyntheticPage",
    "generate_page", "load_coco", "rasterize", "synthetic_split", "EvalConfig", "EvalReport", "evaluate",
    "LossWeights", "hungarian", "set_loss", "HybriDLA", "ModelConfig", "to_detections", "TrainConfig",
    "load_checkpoint", "save_checkpoint", "train",
]
