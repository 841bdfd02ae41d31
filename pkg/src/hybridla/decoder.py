"""Hybrid generative decoder: residual box refinement per layer interleaved with
autoregressive query expansion that halts on a learned end-of-sequence probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import clamp_boxes
from .encoder import PageFeatures
from .nn import (MLP, ContractError, LayerNorm, Linear, Module, MultiHeadAttention, Tensor, bilinear_sample,
                 concat, parameter, sigmoid, sine_embed_tensor)
from .rng import stream

INITIAL, EXPANDED, DENOISING = "initial", "expanded", "denoising"

# where each layer reads the finest feature map: box centre and the four edge
# midpoints, as offsets in units of (w, h)
BOX_POINTS = np.array([[0.0, 0.0], [-0.5, 0.0], [0.5, 0.0], [0.0, -0.5], [0.0, 0.5]])


@dataclass
class QuerySequence:
    embeddings: Tensor                  # (N, C)
    boxes: Tensor                       # (N, 4) normalised cx, cy, w, h
    origins: list
    generation_step: list
    eos_emitted: bool = False
    history: list = field(default_factory=list)     # per query: list of (4,) arrays
    residuals: list = field(default_factory=list)   # per query: list of (4,) arrays

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def ordinary(self) -> np.ndarray:
        return np.array([i for i, o in enumerate(self.origins) if o != DENOISING], dtype=np.int64)

    @property
    def denoising(self) -> np.ndarray:
        return np.array([i for i, o in enumerate(self.origins) if o == DENOISING], dtype=np.int64)

    def num_ordinary(self) -> int:
        return sum(o != DENOISING for o in self.origins)

    def attention_mask(self) -> np.ndarray:
        """Denoising and ordinary queries never attend to each other."""
        dn = np.array([o == DENOISING for o in self.origins])
        return dn[:, None] == dn[None, :]


@dataclass
class LayoutPrediction:
    class_logits: np.ndarray
    box: np.ndarray
    layer_history: list
    residuals: list
    origin: str = INITIAL


@dataclass
class Stage:
    """Predictions of the ordinary queries present after one decoder step."""

    logits: Tensor          # (n, K+1)
    boxes: Tensor           # (n, 4)
    query_index: np.ndarray


@dataclass
class DecoderOutput:
    stages: list                     # one Stage per decoder layer
    dn_stages: list                  # (logits, boxes) of denoising queries per layer
    eos_probs: list                  # Tensor scalars, one per AQE step taken
    counts_before_step: list         # ordinary query count seen by each AQE step
    queries: QuerySequence
    predictions: list                # LayoutPrediction per final ordinary query

    @property
    def num_predictions(self) -> int:
        return len(self.predictions)


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, seed: int, name: str):
        self.self_attn = MultiHeadAttention(dim, heads, seed, name + ".self_attn")
        self.cross_attn = MultiHeadAttention(dim, heads, seed, name + ".cross_attn")
        self.ffn = MLP([dim, ffn_dim, dim], seed, name + ".ffn")
        self.norm1, self.norm2, self.norm3 = LayerNorm(dim), LayerNorm(dim), LayerNorm(dim)
        self.point_proj = Linear(len(BOX_POINTS) * dim, dim, seed, name + ".point_proj")
        self.box_head = MLP([dim, dim, 4], seed, name + ".box_head", zero_last=True)

    def __call__(self, x: Tensor, pos: Tensor, ctx: PageFeatures, mask, boxes: Tensor) -> tuple:
        q = x + pos
        x = self.norm1(x + self.self_attn(q, q, x, mask=mask))
        visual = self.cross_attn(x + pos, ctx.tokens + ctx.pos, ctx.tokens)
        fmap = ctx.finest_map()
        if fmap is not None:
            # features exactly at the current box edges tell the residual head
            # which way each edge is off, which global attention blurs out
            visual = visual + self.point_proj(box_point_features(fmap, boxes))
        x = self.norm2(x + visual)
        x = self.norm3(x + self.ffn(x))
        return x, self.box_head(x)


def box_point_features(fmap: Tensor, boxes: Tensor) -> Tensor:
    """(N, len(BOX_POINTS) * C) features read at the centre and edge midpoints of each box."""
    n = boxes.shape[0]
    centre = boxes[:, :2].reshape(n, 1, 2)
    size = boxes[:, 2:].reshape(n, 1, 2)
    points = (centre + size * BOX_POINTS[None]).reshape(n * len(BOX_POINTS), 2)
    return bilinear_sample(fmap, points).reshape(n, len(BOX_POINTS) * fmap.shape[-1])


class HybridDecoder(Module):
    def __init__(self, dim: int, heads: int, depth: int, num_classes: int, n_init: int, n_aqe: int,
                 group_size: int, seed: int, ffn_dim: int | None = None, eos_threshold: float = 0.5,
                 dr_enabled: bool = True, aqe_enabled: bool = True, name: str = "decoder"):
        self.dim, self.depth, self.num_classes = dim, depth, num_classes
        self.n_init, self.n_aqe, self.group_size = n_init, n_aqe, group_size
        self.eos_threshold = eos_threshold
        self.dr_enabled, self.aqe_enabled = dr_enabled, aqe_enabled
        # gradients flow through the whole residual chain, so the last layer's loss
        # also shapes earlier corrections; True stops them at each layer input
        self.detach_refs = False
        ffn_dim = ffn_dim or 2 * dim
        self.layers = [DecoderLayer(dim, heads, ffn_dim, seed, f"{name}.layers.{i}") for i in range(depth)]
        self.query_pos = MLP([dim, dim, dim], seed, name + ".query_pos")
        self.init_embed = parameter(stream(seed, name + ".init_embed").normal(0, 1.0, size=(n_init, dim)))
        self.init_box_logit = parameter(_grid_box_logits(n_init))
        self.label_embed = parameter(stream(seed, name + ".label_embed").normal(0, 1.0, size=(num_classes, dim)))
        # heads shared by every layer
        self.class_head = Linear(dim, num_classes + 1, seed, name + ".class_head")
        self.box_mlp = MLP([dim, dim, dim, 4], seed, name + ".box_mlp")
        # expansion generator
        self.gen_mlp = MLP([2 * dim, dim, dim], seed, name + ".gen_mlp")
        self.gen_slots = parameter(stream(seed, name + ".gen_slots").normal(0, 1.0, size=(depth, group_size, dim)))
        self.gen_norm = LayerNorm(dim)
        self.eos_head = Linear(dim, 1, seed, name + ".eos_head")

    @property
    def budget(self) -> int:
        return self.n_init + (self.n_aqe if self.aqe_enabled else 0)

    # -- heads -----------------------------------------------------------------
    def predict_heads(self, emb) -> tuple:
        """Class logits over K+1 (last = no-object) and an absolute sigmoid box."""
        return self.class_head(emb), sigmoid(self.box_mlp(emb))

    # -- query construction --------------------------------------------------------
    def initial_queries(self) -> QuerySequence:
        boxes = sigmoid(self.init_box_logit)
        n = self.n_init
        return QuerySequence(self.init_embed, boxes, [INITIAL] * n, [0] * n,
                             history=[[b.copy()] for b in boxes.data], residuals=[[] for _ in range(n)])

    def append_denoising(self, queries: QuerySequence, dn: QuerySequence) -> QuerySequence:
        if len(dn) == 0:
            return queries
        return QuerySequence(concat([queries.embeddings, dn.embeddings]), concat([queries.boxes, dn.boxes]),
                             queries.origins + list(dn.origins), queries.generation_step + list(dn.generation_step),
                             queries.eos_emitted, queries.history + dn.history, queries.residuals + dn.residuals)

    # -- one refinement layer ------------------------------------------------------
    def decoder_layer(self, queries: QuerySequence, ctx: PageFeatures, layer_index: int) -> tuple:
        if len(queries) == 0:
            raise ContractError("decoder_layer needs at least one query")
        if not 0 <= layer_index < self.depth:
            raise ContractError(f"layer index {layer_index} outside depth {self.depth}")
        boxes = queries.boxes.detach() if self.detach_refs else queries.boxes
        ref = queries.boxes if layer_index == 0 else boxes
        pos = self.query_pos(sine_embed_tensor(boxes, self.dim // 4))
        x, delta = self.layers[layer_index](queries.embeddings, pos, ctx, queries.attention_mask(), boxes)
        if not self.dr_enabled:
            delta = Tensor(np.zeros(delta.shape))
        new_boxes = clamp_boxes(ref + delta)
        history = [h + [nb] for h, nb in zip(queries.history, new_boxes.data)]
        residuals = [r + [d] for r, d in zip(queries.residuals, delta.data)]
        out = QuerySequence(x, new_boxes, list(queries.origins), list(queries.generation_step),
                            queries.eos_emitted, history, residuals)
        return out, delta

    # -- expansion -------------------------------------------------------------------
    def aqe_step(self, ctx: PageFeatures, prefix: QuerySequence, group_size: int | None = None,
                 step: int = 0, force_halt: bool | None = None) -> tuple:
        """Propose a group of new queries and the end-of-sequence probability.

        Returns (new QuerySequence, list of new indices, eos_prob Tensor).  At
        inference the halt decision thresholds ``eos_prob``; in training
        ``force_halt`` supplies the supervised decision instead.
        """
        if prefix.eos_emitted:
            raise ContractError("aqe_step called after end-of-sequence")
        group_size = self.group_size if group_size is None else group_size
        remaining = self.budget - prefix.num_ordinary()
        if remaining < 1:
            raise ContractError("query budget exhausted")
        idx = prefix.ordinary
        pooled_q = prefix.embeddings[idx].mean(axis=0, keepdims=True)
        pooled_g = ctx.tokens.mean(axis=0, keepdims=True)
        h = self.gen_mlp(concat([pooled_q, pooled_g], axis=1))
        eos_prob = sigmoid(self.eos_head(h))[0, 0]
        halt = bool(eos_prob.data >= self.eos_threshold) if force_halt is None else bool(force_halt)
        if halt:
            return _with_eos(prefix), [], eos_prob
        n_new = min(group_size, remaining)
        slots = self.gen_slots[min(step, self.depth - 1), :n_new]
        emb = self.gen_norm(slots + h)
        boxes = clamp_boxes(self.predict_heads(emb)[1])
        n0 = len(prefix)
        out = QuerySequence(
            concat([prefix.embeddings, emb]), concat([prefix.boxes, boxes]),
            prefix.origins + [EXPANDED] * n_new, prefix.generation_step + [step + 1] * n_new,
            n_new == remaining, prefix.history + [[b.copy()] for b in boxes.data],
            prefix.residuals + [[] for _ in range(n_new)])
        return out, list(range(n0, n0 + n_new)), eos_prob

    # -- full pass ---------------------------------------------------------------------
    def generate(self, ctx: PageFeatures, denoising: QuerySequence | None = None,
                 halt_targets=None) -> DecoderOutput:
        """Run every layer, expanding after each one until halted.

        ``halt_targets(count_before_step) -> bool`` replaces the thresholded
        decision during training.
        """
        if self.depth < 1 or self.n_init < 1:
            raise ContractError("decoder needs depth >= 1 and at least one initial query")
        q = self.initial_queries()
        if denoising is not None:
            q = self.append_denoising(q, denoising)
        stages, dn_stages, eos_probs, counts = [], [], [], []
        for t in range(self.depth):
            q, _ = self.decoder_layer(q, ctx, t)
            if self.aqe_enabled and not q.eos_emitted:
                n = q.num_ordinary()
                force = None if halt_targets is None else bool(halt_targets(n))
                q, _, p = self.aqe_step(ctx, q, step=t, force_halt=force)
                eos_probs.append(p)
                counts.append(n)
            stages.append(self._stage(q))
            dn = q.denoising
            if len(dn):
                logits = self.class_head(q.embeddings[dn])
                boxes = q.boxes[dn] if self.dr_enabled else self.predict_heads(q.embeddings[dn])[1]
                dn_stages.append((logits, boxes))
        final = stages[-1]
        preds = []
        for row, i in enumerate(final.query_index):
            preds.append(LayoutPrediction(final.logits.data[row].copy(), final.boxes.data[row].copy(),
                                          q.history[i], q.residuals[i], q.origins[i]))
        return DecoderOutput(stages, dn_stages, eos_probs, counts, q, preds)

    def _stage(self, q: QuerySequence) -> Stage:
        idx = q.ordinary
        emb = q.embeddings[idx]
        logits, abs_boxes = self.predict_heads(emb)
        if self.dr_enabled:
            boxes = q.boxes[idx]
        else:
            # without refinement the standard absolute box head predicts boxes
            boxes = abs_boxes
        return Stage(logits, boxes, idx)


def _with_eos(q: QuerySequence) -> QuerySequence:
    return QuerySequence(q.embeddings, q.boxes, q.origins, q.generation_step, True, q.history, q.residuals)


def _grid_box_logits(n: int) -> np.ndarray:
    """Spread the initial boxes on a near-square grid of centres with size 0.2."""
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    boxes = []
    for i in range(n):
        r, c = divmod(i, cols)
        boxes.append([(c + 0.5) / cols, (r + 0.5) / rows, 0.2, 0.2])
    b = np.clip(np.array(boxes), 1e-4, 1 - 1e-4)
    return np.log(b / (1 - b))
