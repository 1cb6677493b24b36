"""The full action-sequence policy network.

A strided convolutional encoder turns the stacked observation frames into a
feature map and a grid of vision tokens. Committed action tokens and empty
(to-be-predicted) tokens are embedded with per-kind codecs plus learned
absolute positions; empty tokens get a per-kind learned query vector plus
the positional embedding of the index they target. The trunk alternates
masked self-attention, all-true cross-attention to the vision tokens, and an
MLP, all pre-norm residual. Per-kind heads decode the updated empty-token
embeddings into action distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import MultiheadAttention, build_cross_mask
from .checkpoint import load_tensors, save_tensors
from .codecs import (
    ActionValue,
    ContinuousSpec,
    DiscreteSpec,
    KindSpec,
    PixelSpec,
    make_codec,
)
from .nn import Conv2d, Embedding, LayerNorm, Linear, Mlp, Module
from .tensor import Rng, Tensor

__all__ = ["VisionConfig", "PolicyConfig", "SequencePolicy", "columns_from_sequences"]


@dataclass(frozen=True)
class VisionConfig:
    raster: int = 64
    in_channels: int = 6  # two stacked RGB frames
    stage_channels: tuple[int, ...] = (16, 32, 64)

    @property
    def feat_hw(self) -> int:
        size, stages = self.raster, len(self.stage_channels)
        if size % (2**stages) != 0:
            raise ValueError(f"raster {size} not divisible by 2^{stages}")
        return size // 2**stages

    @property
    def feat_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class PolicyConfig:
    layers: int = 4
    dim: int = 64
    mlp_hidden: int = 256
    heads: int = 4
    max_positions: int = 32
    kinds: tuple[KindSpec, ...] = ()
    vision: VisionConfig = field(default_factory=VisionConfig)

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        names = [k.name for k in self.kinds]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate kind names: {names}")

    def param_count(self) -> int:
        """Closed-form parameter count; asserted against the live model.

        vision: per stage (c_in*9*c_out + c_out) for 3x3 kernels, a
        C->d token projection, and a feat_hw^2 positional table; sequence
        side: position table, per-kind embedder + head + empty query; trunk:
        two attention stacks of 4*(d^2+d) each, three layernorms, and the
        MLP per layer, plus the final layernorm.
        """
        d, m = self.dim, self.mlp_hidden
        v = self.vision
        total = 0
        c_prev = v.in_channels
        for c in v.stage_channels:
            total += c_prev * 9 * c + c
            c_prev = c
        c = v.feat_channels
        total += c * d + d  # vision token projection
        total += v.feat_hw * v.feat_hw * d  # vision positional table
        total += self.max_positions * d  # sequence positional table
        for kind in self.kinds:
            total += d  # empty-token query
            if isinstance(kind, DiscreteSpec):
                vv = kind.cardinality
                total += vv * d + (d * vv + vv)
            elif isinstance(kind, ContinuousSpec):
                g = kind.components * (1 + 2 * kind.dim)
                total += (kind.dim * d + d) + (d * g + g)
            elif isinstance(kind, PixelSpec):
                total += (c * d + d) + (d * c + c)
        per_layer = 2 * 4 * (d * d + d) + 3 * 2 * d + (d * m + m) + (m * d + d)
        total += self.layers * per_layer
        total += 2 * d  # final layernorm
        return total


class VisionEncoder(Module):
    """Three strided 3x3 conv stages, then tokens with a learned 2-d grid
    positional table."""

    def __init__(self, cfg: VisionConfig, dim: int, rng: Rng):
        self.cfg = cfg
        streams = rng.split(len(cfg.stage_channels) + 2)
        self.stages = []
        c_prev = cfg.in_channels
        for c, r in zip(cfg.stage_channels, streams):
            self.stages.append(Conv2d(c_prev, c, 3, r, stride=2, padding=1))
            c_prev = c
        self.token_proj = Linear(cfg.feat_channels, dim, streams[-2])
        self.pos = Embedding(cfg.feat_hw * cfg.feat_hw, dim, streams[-1])

    def __call__(self, rasters: np.ndarray) -> tuple[Tensor, Tensor]:
        """rasters: (B, in_channels, raster, raster) floats in [0, 1].

        Returns (vision tokens (B, feat_hw^2, dim), featmap (B, C, h, w)).
        """
        dtype = self.stages[0].w.data.dtype
        arr = np.asarray(rasters, dtype=dtype)
        if arr.ndim != 4 or arr.shape[1:] != (
            self.cfg.in_channels,
            self.cfg.raster,
            self.cfg.raster,
        ):
            raise T.ShapeError(
                f"raster batch must be (B, {self.cfg.in_channels}, "
                f"{self.cfg.raster}, {self.cfg.raster}), got {arr.shape}"
            )
        x = Tensor(arr, dtype=dtype)
        for stage in self.stages:
            x = T.gelu(stage(x))
        featmap = x
        b = arr.shape[0]
        hw = self.cfg.feat_hw * self.cfg.feat_hw
        tokens = T.transpose(
            T.reshape(featmap, (b, self.cfg.feat_channels, hw)), (0, 2, 1)
        )
        tokens = self.token_proj(tokens)
        pos = self.pos(np.arange(hw))
        return T.add(tokens, T.repeat_leading(pos, b)), featmap


class Block(Module):
    def __init__(self, dim: int, mlp_hidden: int, heads: int, rng: Rng):
        r1, r2, r3 = rng.split(3)
        self.ln_self = LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, r1)
        self.ln_cross = LayerNorm(dim)
        self.cross = MultiheadAttention(dim, heads, r2)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden, r3)


def columns_from_sequences(sequences: Sequence[Sequence[ActionValue]]):
    """Transpose batch-major action sequences into per-position columns of
    (kind, stacked values); the schedule guarantees kinds agree per column."""
    if not sequences:
        return []
    length = len(sequences[0])
    columns = []
    for j in range(length):
        kind = sequences[0][j].kind
        vals = []
        for seq in sequences:
            if seq[j].kind != kind:
                raise ValueError(f"column {j}: mixed kinds {kind} vs {seq[j].kind}")
            vals.append(seq[j].value)
        columns.append((kind, np.asarray(vals)))
    return columns


class SequencePolicy(Module):
    """Vision encoder + chunked-attention trunk + per-kind codecs."""

    def __init__(self, cfg: PolicyConfig, rng: Rng):
        self.cfg = cfg
        r_vis, r_pos, r_codec, r_query, r_blocks = rng.split(5)
        self.vision = VisionEncoder(cfg.vision, cfg.dim, r_vis)
        self.pos = Embedding(cfg.max_positions, cfg.dim, r_pos)
        codec_streams = r_codec.split(max(len(cfg.kinds), 1))
        self.codecs = {
            kind.name: make_codec(kind, cfg.dim, cfg.vision.feat_channels, r)
            for kind, r in zip(cfg.kinds, codec_streams)
        }
        query_streams = r_query.split(max(len(cfg.kinds), 1))
        self.queries = {
            kind.name: Tensor(r.normal((cfg.dim,), std=0.02), requires_grad=True)
            for kind, r in zip(cfg.kinds, query_streams)
        }
        block_streams = r_blocks.split(max(cfg.layers, 1))
        self.blocks = [
            Block(cfg.dim, cfg.mlp_hidden, cfg.heads, r)
            for _, r in zip(range(cfg.layers), block_streams)
        ]
        self.final_ln = LayerNorm(cfg.dim)

    # -- embedding ---------------------------------------------------------

    def _pos_rows(self, positions, batch: int) -> Tensor:
        ids = np.asarray(list(positions))
        if ids.size and ids.max() >= self.cfg.max_positions:
            raise IndexError(
                f"position {ids.max()} outside table of {self.cfg.max_positions}"
            )
        rows = self.pos(ids)  # (n, d)
        return T.repeat_leading(rows, batch)  # (B, n, d)

    def embed_actions(self, columns, positions, featmap: Tensor) -> Tensor:
        """columns: per-position (kind, batched value array); returns (B, n, d)."""
        if not columns:
            raise T.ShapeError("embed_actions needs at least one column")
        parts = []
        batch = None
        for kind, values in columns:
            codec = self.codecs[kind]
            emb = codec.embed(values, featmap)  # (B, d)
            batch = emb.shape[0]
            parts.append(T.reshape(emb, (batch, 1, self.cfg.dim)))
        tokens = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return T.add(tokens, self._pos_rows(positions, batch))

    def embed_empties(self, targets, batch: int) -> Tensor:
        """targets: (kind, target position) pairs; returns (B, n, d) of
        per-kind query vectors tied to the positions they predict."""
        if not targets:
            raise T.ShapeError("embed_empties needs at least one target")
        rows = []
        for kind, _pos in targets:
            rows.append(T.reshape(self.queries[kind], (1, self.cfg.dim)))
        stacked = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]  # (n, d)
        stacked = T.repeat_leading(stacked, batch)  # (B, n, d)
        return T.add(stacked, self._pos_rows([p for _, p in targets], batch))

    # -- trunk ---------------------------------------------------------------

    def forward_embeddings(self, tokens: Tensor, mask, vision_tokens: Tensor) -> Tensor:
        """Run the block stack; tokens (B, T, d) against the given self-attention
        mask, cross-attending all vision tokens."""
        t = tokens.shape[-2]
        cross = build_cross_mask(t, vision_tokens.shape[-2])
        x = tokens
        for block in self.blocks:
            h = block.ln_self(x)
            x = T.add(x, block.attn(h, h, h, mask))
            h = block.ln_cross(x)
            x = T.add(x, block.cross(h, vision_tokens, vision_tokens, cross))
            x = T.add(x, block.mlp(block.ln_mlp(x)))
        return self.final_ln(x)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_tensors(path))
