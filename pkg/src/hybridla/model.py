"""Full detector: backbone -> feature fusion encoder -> hybrid decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datasets import Detections
from .decoder import HybridDecoder
from .encoder import Backbone, ConfigError, FeatureFusionEncoder
from .nn import Module, Tensor, softmax


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 4
    levels: int = 3
    depth: int = 3
    n_init: int = 12
    n_aqe: int = 12
    group_size: int = 4
    eos_threshold: float = 0.5
    encoder: str = "ffe"
    dr_enabled: bool = True
    aqe_enabled: bool = True
    num_classes: int = 4
    ffn_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.encoder != "ffe":
            raise ConfigError(f"encoder must be 'ffe', got {self.encoder!r}")
        if self.depth < 1 or self.n_init < 1:
            raise ConfigError("depth and n_init must be at least 1")
        if self.levels < 2:
            raise ConfigError("the fusion encoder needs at least two levels")
        if self.dim % self.heads or self.dim % 4:
            raise ConfigError(f"dim {self.dim} must be divisible by heads ({self.heads}) and by 4")
        if self.n_aqe < 0 or self.group_size < 1:
            raise ConfigError("n_aqe must be >= 0 and group_size >= 1")
        if not 0.0 <= self.eos_threshold <= 1.0:
            raise ConfigError("eos_threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class HybriDLA(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        c, s = config, config.seed
        self.backbone = Backbone(c.dim, c.levels, s)
        self.encoder = FeatureFusionEncoder(c.dim, c.heads, c.levels, s)
        self.decoder = HybridDecoder(c.dim, c.heads, c.depth, c.num_classes, c.n_init, c.n_aqe,
                                     c.group_size, s, ffn_dim=c.ffn_dim, eos_threshold=c.eos_threshold,
                                     dr_enabled=c.dr_enabled, aqe_enabled=c.aqe_enabled)

    def encode(self, images):
        """images: (3, H, W) or (B, 3, H, W) array -> EncodedFeatures with a batch axis."""
        return self.encoder(self.backbone(images))

    def forward_pages(self, images, dn=None, halt_targets=None) -> list:
        """Run the decoder on every page of a batch; returns DecoderOutputs."""
        enc = self.encode(images)
        outs = []
        for b in range(enc.fused.shape[0]):
            ht = None if halt_targets is None else halt_targets[b]
            outs.append(self.decoder.generate(enc.page(b), None if dn is None else dn[b], ht))
        return outs

    def detect(self, images, image_ids=None) -> list:
        """Inference: per page, every final query as (box, max real-class prob, class)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        outs = self.forward_pages(images)
        ids = list(range(len(images))) if image_ids is None else list(image_ids)
        return [to_detections(o, iid) for o, iid in zip(outs, ids)]


def to_detections(out, image_id=0) -> Detections:
    if not out.predictions:
        return Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64), image_id)
    logits = np.stack([p.class_logits for p in out.predictions])
    probs = softmax(Tensor(logits), axis=-1).data[:, :-1]
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(labels)), labels]
    boxes = np.stack([p.box for p in out.predictions])
    return Detections(boxes, scores, labels, image_id)
