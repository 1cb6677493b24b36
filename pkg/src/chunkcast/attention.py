"""Boolean attention masks and mask-aware multi-head attention.

A mask is an explicit Q x K admissibility matrix plus per-position token
labels. Builders cover the three patterns the policy needs: plain causal
attention over committed action tokens, the chunk-inference pattern (causal
actions, bidirectional empty tokens that see the whole prefix), and all-true
cross-attention.

Disallowed logits are set to a large negative constant rather than a literal
-inf; at that magnitude the softmax weight underflows to exactly zero after
normalization, so masked positions have provably zero influence (asserted by
perturbation tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .nn import Linear, Module
from .tensor import Rng, Tensor, masked_fill, matmul, reshape, softmax, transpose

__all__ = [
    "NEG_INF",
    "MaskError",
    "TokenLabel",
    "AttentionMask",
    "build_causal_mask",
    "build_chunk_inference_mask",
    "build_cross_mask",
    "MultiheadAttention",
]

NEG_INF = -1e9


class MaskError(ValueError):
    """A mask violates its admissibility contract."""


@dataclass(frozen=True)
class TokenLabel:
    """Identity of one sequence position: a committed action token or an
    empty (to-be-predicted) token targeting a sequence index."""

    kind: Literal["action", "empty"]
    position: int
    chunk_id: int | None = None

    def short(self) -> str:
        tag = "a" if self.kind == "action" else "e"
        return f"{tag}{self.position + 1}"


@dataclass
class AttentionMask:
    """Boolean query x key admissibility with optional position labels."""

    allowed: np.ndarray
    q_labels: tuple[TokenLabel, ...] | None = None
    k_labels: tuple[TokenLabel, ...] | None = None

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 2:
            raise MaskError(f"mask must be 2-d, got shape {self.allowed.shape}")
        rows = self.allowed.any(axis=1)
        if not rows.all():
            bad = int(np.argmin(rows))
            raise MaskError(f"query row {bad} has no allowed key")
        if self.q_labels is not None and len(self.q_labels) != self.allowed.shape[0]:
            raise MaskError("q_labels length != number of query rows")
        if self.k_labels is not None and len(self.k_labels) != self.allowed.shape[1]:
            raise MaskError("k_labels length != number of key columns")

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    def entry_count(self) -> int:
        return int(self.allowed.sum())

    def ascii(self) -> str:
        """Human-readable grid: '#' allowed, '.' blocked."""
        q = self.q_labels or tuple(
            TokenLabel("action", i) for i in range(self.allowed.shape[0])
        )
        k = self.k_labels or tuple(
            TokenLabel("action", j) for j in range(self.allowed.shape[1])
        )
        width = max(len(lbl.short()) for lbl in q + k)
        header = " " * (width + 1) + " ".join(lbl.short().rjust(width) for lbl in k)
        lines = [header]
        for i, lbl in enumerate(q):
            cells = " ".join(
                ("#" if self.allowed[i, j] else ".").rjust(width)
                for j in range(self.allowed.shape[1])
            )
            lines.append(f"{lbl.short().rjust(width)} {cells}")
        return "\n".join(lines)

    def to_bitmap(self) -> bytes:
        """Compact row-major bit packing with a shape header (labels dropped)."""
        q, k = self.allowed.shape
        head = np.array([q, k], dtype="<u4").tobytes()
        return head + np.packbits(self.allowed.reshape(-1)).tobytes()

    @staticmethod
    def from_bitmap(blob: bytes) -> "AttentionMask":
        q, k = np.frombuffer(blob[:8], dtype="<u4")
        bits = np.unpackbits(np.frombuffer(blob[8:], dtype=np.uint8), count=q * k)
        return AttentionMask(bits.reshape(int(q), int(k)).astype(bool))


def build_causal_mask(n: int) -> AttentionMask:
    """Lower-triangular mask over n committed action tokens."""
    if n < 1:
        raise MaskError(f"causal mask needs n >= 1, got {n}")
    labels = tuple(TokenLabel("action", i) for i in range(n))
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)), labels, labels)


def build_chunk_inference_mask(n_actions: int, n_empty: int, chunk_id: int = 0) -> AttentionMask:
    """Mask for predicting one chunk: causal action rows that never see the
    empty tokens, and empty rows that see every action plus the whole chunk
    of empties bidirectionally."""
    if n_empty < 1:
        raise MaskError(f"chunk inference needs n_empty >= 1, got {n_empty}")
    if n_actions < 0:
        raise MaskError("n_actions must be non-negative")
    n = n_actions + n_empty
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:n_actions, :n_actions] = np.tril(np.ones((n_actions, n_actions), dtype=bool))
    allowed[n_actions:, :] = True
    labels = tuple(TokenLabel("action", i) for i in range(n_actions)) + tuple(
        TokenLabel("empty", n_actions + i, chunk_id) for i in range(n_empty)
    )
    return AttentionMask(allowed, labels, labels)


def build_cross_mask(n_q: int, n_k: int) -> AttentionMask:
    """All-true rectangular mask used for cross-attention to vision tokens."""
    return AttentionMask(np.ones((n_q, n_k), dtype=bool))


class MultiheadAttention(Module):
    """Scaled dot-product attention over an explicit boolean mask.

    Query/key/value projections and the output projection are part of the
    layer. Inputs may be (T, d) or batched (B, T, d); the mask is shared
    across batch and heads. After each call `last_weights` holds the
    post-softmax attention matrix of the final head group for inspection.
    """

    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads != 0:
            raise MaskError(f"model dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        rq, rk, rv, ro = rng.split(4)
        self.wq = Linear(dim, dim, rq)
        self.wk = Linear(dim, dim, rk)
        self.wv = Linear(dim, dim, rv)
        self.wo = Linear(dim, dim, ro)
        self.last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask: AttentionMask) -> Tensor:
        squeeze = query.ndim == 2
        q, k, v = self.wq(query), self.wk(key), self.wv(value)
        if squeeze:
            q = reshape(q, (1,) + q.shape)
            k = reshape(k, (1,) + k.shape)
            v = reshape(v, (1,) + v.shape)
        b, tq, _ = q.shape
        tk = k.shape[1]
        if mask.shape != (tq, tk):
            raise MaskError(f"mask shape {mask.shape} does not match sequence {tq}x{tk}")
        h, hd = self.heads, self.head_dim

        def split_heads(t: Tensor, tlen: int) -> Tensor:
            return transpose(reshape(t, (b, tlen, h, hd)), (0, 2, 1, 3))

        qh = split_heads(q, tq)
        kh = split_heads(k, tk)
        vh = split_heads(v, tk)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        blocked = np.broadcast_to(~mask.allowed, scores.shape)
        weights = softmax(masked_fill(scores, blocked, NEG_INF), axis=-1)
        self.last_weights = weights.data
        mixed = matmul(weights, vh)
        merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, tq, self.dim))
        out = self.wo(merged)
        return reshape(out, out.shape[1:]) if squeeze else out
