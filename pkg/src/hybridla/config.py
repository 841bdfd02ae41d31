"""Run configuration: one JSON document with model/train/data/eval/ablate sections.

Parsing is strict.  Unknown keys and values of the wrong type raise
:class:`RunConfigError` carrying a dotted path such as ``train.lr``.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .datasets import PageConfig
from .evaluator import COCO_THRESHOLDS, EvalConfig
from .model import ModelConfig
from .trainer import TrainConfig


class RunConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DataConfig:
    mode: str = "synthetic"              # "synthetic" or "coco"
    pages: int = 16                      # synthetic page count
    seed: int = 0                        # synthetic split seed
    class_count: int = 4
    min_elements: int = 2
    max_elements: int = 8
    image_size: int = 64
    synthetic_path: str | None = None    # JSON list of synthetic pages (overrides generation)
    annotations: str | None = None       # COCO annotation file (coco mode)
    images: str | None = None            # .npy array (N, 3, S, S) aligned with the image list


@dataclass
class EvalSection:
    iou_thresholds: list = field(default_factory=lambda: list(COCO_THRESHOLDS))
    max_detections: int = 100
    score_threshold: float = 0.5         # used by infer for the results file and overlay


@dataclass
class AblateConfig:
    dr_enabled: list = field(default_factory=lambda: [True, False])
    aqe_enabled: list = field(default_factory=lambda: [True, False])
    depth: list = field(default_factory=list)        # empty: keep model.depth
    n_init: list = field(default_factory=list)
    n_aqe: list = field(default_factory=list)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def page_config(self) -> PageConfig:
        d = self.data
        return PageConfig(min_elements=d.min_elements, max_elements=d.max_elements,
                          class_count=d.class_count)

    def eval_config(self, class_ids) -> EvalConfig:
        return EvalConfig(list(class_ids), tuple(self.eval.iou_thresholds), self.eval.max_detections)

    def with_seed(self, seed: int) -> "RunConfig":
        """--seed overrides the training seed and the model initialisation seed."""
        self.train.seed = seed
        self.model.seed = seed
        return self

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig,
            "eval": EvalSection, "ablate": AblateConfig}


def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is typing.Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(value, a, path)
            except RunConfigError:
                pass
        raise RunConfigError(path, f"expected {hint}, got {type(value).__name__}")
    if hint is bool:
        if not isinstance(value, bool):
            raise RunConfigError(path, f"expected a boolean, got {json.dumps(value)}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise RunConfigError(path, f"expected an integer, got {json.dumps(value)}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RunConfigError(path, f"expected a number, got {json.dumps(value)}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise RunConfigError(path, f"expected a string, got {json.dumps(value)}")
        return value
    if hint in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, list):
            raise RunConfigError(path, f"expected a list, got {json.dumps(value)}")
        return tuple(value) if hint is tuple or origin is tuple else list(value)
    return value


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise RunConfigError(path, "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in doc:
        if key not in names:
            raise RunConfigError(f"{path}.{key}" if path else key, f"unknown key {key!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name in doc:
            kwargs[f.name] = _check_type(doc[f.name], hints[f.name], f"{path}.{f.name}")
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.model.validate()
    except ValueError as exc:
        raise RunConfigError("model", str(exc)) from exc
    d, t = cfg.data, cfg.train
    if d.mode not in ("synthetic", "coco"):
        raise RunConfigError("data.mode", f"must be 'synthetic' or 'coco', got {d.mode!r}")
    if d.mode == "coco" and not d.annotations:
        raise RunConfigError("data.annotations", "required when data.mode is 'coco'")
    if d.class_count < 1 or d.class_count != cfg.model.num_classes:
        raise RunConfigError("data.class_count",
                             f"must be >= 1 and equal model.num_classes ({cfg.model.num_classes})")
    if not 0 <= d.min_elements <= d.max_elements:
        raise RunConfigError("data.min_elements", "need 0 <= min_elements <= max_elements")
    if d.pages < 0:
        raise RunConfigError("data.pages", "must be non-negative")
    if t.epochs < 0 or t.batch < 1 or t.lr <= 0 or t.clip_norm <= 0:
        raise RunConfigError("train", "need epochs >= 0, batch >= 1, lr > 0 and clip_norm > 0")
    if not 0.0 <= t.ema_decay < 1.0:
        raise RunConfigError("train.ema_decay", "must lie in [0, 1)")
    try:
        cfg.eval_config([0])
    except ValueError as exc:
        raise RunConfigError("eval.iou_thresholds", str(exc)) from exc
    if cfg.eval.max_detections < 1:
        raise RunConfigError("eval.max_detections", "must be positive")


def parse_config(doc) -> RunConfig:
    """Build a validated :class:`RunConfig` from a decoded JSON object."""
    if not isinstance(doc, dict):
        raise RunConfigError("", "configuration must be a JSON object")
    for key in doc:
        if key not in SECTIONS:
            raise RunConfigError(key, f"unknown key {key!r}")
    cfg = RunConfig(**{name: _build(cls, doc.get(name, {}), name) for name, cls in SECTIONS.items()})
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RunConfigError("", f"{path} is not valid JSON ({exc})") from exc
    return parse_config(doc)


def describe_defaults() -> str:
    """Plain-text reference of every section, key and default value."""
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        for f in fields(cls):
            if f.default is not MISSING:
                default = f.default
            elif f.default_factory is not MISSING:
                default = f.default_factory()
            else:
                default = None
            lines.append(f"  {f.name} = {json.dumps(default, default=list)}")
    return "\n".join(lines)
