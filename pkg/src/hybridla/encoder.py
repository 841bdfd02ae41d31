"""Convolutional stem producing a feature pyramid, and the feature fusion encoder.

The fusion encoder runs a per-level local encoder (self-attention branch and
3x3 conv branch summed onto a residual, then layer-normalised) followed by a
single cross-scale attention block over the concatenated tokens of every level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (Conv2d, LayerNorm, Module, MultiHeadAttention, ShapeError, Tensor, concat, parameter,
                 relu, reshape, sine_position_2d, transpose)
from .rng import stream


class ConfigError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    levels: list            # Tensors (B, C, H_l, W_l)
    level_strides: list


@dataclass
class EncodedFeatures:
    enriched: list          # Tensors (B, C, H_l, W_l)
    fused: Tensor           # (B, T, C)
    level_offsets: list
    level_shapes: list      # [(H_l, W_l)]
    pos: np.ndarray         # (T, C) fixed position encodings of the fused tokens

    @property
    def num_tokens(self) -> int:
        return self.fused.shape[-2]

    def page(self, b: int) -> "PageFeatures":
        return PageFeatures(self.fused[b], self.pos, self.level_offsets, self.level_shapes)


@dataclass
class PageFeatures:
    """Fused tokens of one page: the conditioning context of the decoder."""

    tokens: Tensor          # (T, C)
    pos: np.ndarray         # (T, C)
    level_offsets: list
    level_shapes: list | None = None    # [(H_l, W_l)]; without it no map can be read at box points

    def finest_map(self) -> Tensor | None:
        """The first level's tokens as an (H, W, C) map."""
        if not self.level_shapes:
            return None
        H, W = self.level_shapes[0]
        start = self.level_offsets[0]
        return self.tokens[start:start + H * W].reshape(H, W, self.tokens.shape[-1])


def _to_tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return transpose(reshape(x, (B, C, H * W)), (0, 2, 1))


def _to_map(t: Tensor, H: int, W: int) -> Tensor:
    B, _, C = t.shape
    return reshape(transpose(t, (0, 2, 1)), (B, C, H, W))


class Backbone(Module):
    """Stride-2 stem followed by one stride-2 conv per pyramid level."""

    def __init__(self, dim: int, levels: int, seed: int, name: str = "backbone"):
        self.num_levels = levels
        self.stem = Conv2d(3, dim, 3, seed, name + ".stem", stride=2, pad=1)
        self.stages = [Conv2d(dim, dim, 3, seed, f"{name}.stages.{i}", stride=2, pad=1) for i in range(levels)]

    def required_divisor(self) -> int:
        return 2 ** (self.num_levels + 1)

    def __call__(self, image) -> FeaturePyramid:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        H, W = x.shape[-2:]
        d = self.required_divisor()
        if H % d or W % d:
            raise ShapeError(f"image size {H}x{W} must be divisible by {d}")
        x = relu(self.stem(x))
        levels, strides = [], []
        for i, conv in enumerate(self.stages):
            x = relu(conv(x))
            levels.append(x)
            strides.append(2 ** (i + 2))
        return FeaturePyramid(levels, strides)


class LocalEncoder(Module):
    """phi: enrich one pyramid level with self-attention and a 3x3 conv branch."""

    def __init__(self, dim: int, heads: int, seed: int, name: str):
        self.attn = MultiHeadAttention(dim, heads, seed, name + ".attn")
        self.conv = Conv2d(dim, dim, 3, seed, name + ".conv", stride=1, pad=1)
        self.norm = LayerNorm(dim)

    def __call__(self, feat: Tensor) -> Tensor:
        B, C, H, W = feat.shape
        x = _to_tokens(feat)
        pos = sine_position_2d(H, W, C)
        a = self.attn(x + pos, x + pos, x)
        c = _to_tokens(self.conv(feat))
        return _to_map(self.norm(x + a + c), H, W)


class CrossScaleFusion(Module):
    """Psi: lateral 1x1 projections, level + position encodings, one attention block."""

    def __init__(self, dim: int, heads: int, levels: int, seed: int, name: str):
        self.lateral = [Conv2d(dim, dim, 1, seed, f"{name}.lateral.{i}") for i in range(levels)]
        self.level_embed = parameter(stream(seed, name + ".level_embed").normal(0, 0.1, size=(levels, dim)))
        self.attn = MultiHeadAttention(dim, heads, seed, name + ".attn")

    def __call__(self, enriched: list) -> tuple:
        if len(enriched) < 2:
            raise ConfigError("cross-scale fusion needs at least two pyramid levels")
        tokens, pos, offsets, shapes = [], [], [], []
        total = 0
        for i, (lat, h) in enumerate(zip(self.lateral, enriched)):
            _, C, H, W = h.shape
            p = sine_position_2d(H, W, C)
            tokens.append(_to_tokens(lat(h)) + self.level_embed[i] + p)
            pos.append(p)
            offsets.append(total)
            shapes.append((H, W))
            total += H * W
        z = concat(tokens, axis=1)
        g = z + self.attn(z, z, z)
        return g, np.concatenate(pos, axis=0), offsets, shapes


class FeatureFusionEncoder(Module):
    def __init__(self, dim: int, heads: int, levels: int, seed: int, name: str = "encoder"):
        self.local = [LocalEncoder(dim, heads, seed, f"{name}.local.{i}") for i in range(levels)]
        self.fusion = CrossScaleFusion(dim, heads, levels, seed, name + ".fusion")

    def local_encode(self, feat: Tensor, level: int) -> Tensor:
        return self.local[level](feat)

    def __call__(self, pyramid: FeaturePyramid) -> EncodedFeatures:
        enriched = [self.local_encode(f, i) for i, f in enumerate(pyramid.levels)]
        fused, pos, offsets, shapes = self.fusion(enriched)
        return EncodedFeatures(enriched, fused, offsets, shapes, pos)
