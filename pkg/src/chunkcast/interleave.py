"""Composite masks that merge all per-chunk teacher-forcing passes into one.

Training a chunked autoregressive model naively runs one forward pass per
chunk: the pass for chunk m feeds the ground-truth action tokens before the
chunk plus that chunk's empty tokens. Because action tokens never attend to
empty tokens, all those passes can share a single composite mask: action
rows are plain causal attention, and the empty rows of chunk m see exactly
the action tokens before their chunk plus their own chunk, bidirectionally.
One forward pass over this layout is mathematically equal to the per-chunk
passes; the equivalence is asserted against the naive oracle in tests.

The multiply-accumulate accounting counts attention-matrix entries. For N
uniform chunks of size K the per-chunk passes cost sum((n*K)^2 for n=1..N)
entries while the merged pass is accounted as 2*(N*K)^2 + N*K^2 (causal
action block, empty-to-action block, and N bidirectional K x K blocks).
That closed form treats the rectangular blocks as full; the exact allowed
count of the constructed mask is reported alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionMask, MaskError, TokenLabel

__all__ = [
    "ChunkPartition",
    "MacsReport",
    "build_interleaved_mask",
    "macs_report",
    "interleaved_forward",
]


@dataclass(frozen=True)
class ChunkPartition:
    """Contiguous chunks over 0-based target positions [start, end).

    Positions before the first chunk are pure context (an already-committed
    prefix); the chunks cover the rest of the sequence without gaps.
    """

    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.boundaries:
            raise MaskError("partition needs at least one chunk")
        prev_end = None
        for start, end in self.boundaries:
            if end <= start:
                raise MaskError(f"empty chunk [{start}, {end})")
            if prev_end is not None and start != prev_end:
                raise MaskError(f"chunks not contiguous at position {start}")
            prev_end = end
        if self.boundaries[0][0] < 0:
            raise MaskError("context length cannot be negative")

    @classmethod
    def uniform(cls, n_chunks: int, chunk_size: int, context_len: int = 0) -> "ChunkPartition":
        if n_chunks < 1 or chunk_size < 1:
            raise MaskError("uniform partition needs n_chunks >= 1 and chunk_size >= 1")
        bounds = tuple(
            (context_len + m * chunk_size, context_len + (m + 1) * chunk_size)
            for m in range(n_chunks)
        )
        return cls(bounds)

    @classmethod
    def from_sizes(cls, sizes, context_len: int = 0) -> "ChunkPartition":
        bounds = []
        pos = context_len
        for size in sizes:
            bounds.append((pos, pos + size))
            pos += size
        return cls(tuple(bounds))

    @property
    def context_len(self) -> int:
        return self.boundaries[0][0]

    @property
    def total_len(self) -> int:
        return self.boundaries[-1][1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(end - start for start, end in self.boundaries)


def build_interleaved_mask(partition: ChunkPartition) -> AttentionMask:
    """Composite training mask for all chunks of a partition.

    Layout: every action token that serves as context for some chunk (all
    positions before the last chunk's start), followed by one empty token per
    target position, grouped by chunk. Action rows are causal among actions
    and never attend empties; the empty rows of chunk m attend the action
    tokens before position start(m) plus the empties of chunk m only.
    """
    n_actions = partition.boundaries[-1][0]
    empty_targets = [
        (m, t)
        for m, (start, end) in enumerate(partition.boundaries)
        for t in range(start, end)
    ]
    n_empty = len(empty_targets)
    n = n_actions + n_empty
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:n_actions, :n_actions] = np.tril(np.ones((n_actions, n_actions), dtype=bool))
    chunk_start = {m: start for m, (start, end) in enumerate(partition.boundaries)}
    for row, (m, _t) in enumerate(empty_targets):
        r = n_actions + row
        allowed[r, : chunk_start[m]] = True
        for col, (m2, _t2) in enumerate(empty_targets):
            if m2 == m:
                allowed[r, n_actions + col] = True
    labels = tuple(TokenLabel("action", i) for i in range(n_actions)) + tuple(
        TokenLabel("empty", t, m) for m, t in empty_targets
    )
    return AttentionMask(allowed, labels, labels)


@dataclass(frozen=True)
class MacsReport:
    """Attention-entry accounting for N uniform chunks of size K."""

    n_chunks: int
    chunk_size: int
    naive_macs: int
    interleaved_macs: int
    exact_mask_entries: int

    def render(self) -> str:
        return (
            f"chunks={self.n_chunks} size={self.chunk_size}\n"
            f"naive per-chunk passes : {self.naive_macs}\n"
            f"merged composite pass  : {self.interleaved_macs}\n"
            f"exact allowed entries  : {self.exact_mask_entries}\n"
        )


def macs_report(n_chunks: int, chunk_size: int) -> MacsReport:
    """Evaluate both accounting formulas plus the literal allowed-entry count."""
    if n_chunks < 1 or chunk_size < 1:
        raise MaskError("macs_report needs n_chunks >= 1 and chunk_size >= 1")
    n, k = n_chunks, chunk_size
    naive = sum((m * k) ** 2 for m in range(1, n + 1))
    interleaved = 2 * (n * k) ** 2 + n * k**2
    mask = build_interleaved_mask(ChunkPartition.uniform(n, k))
    return MacsReport(n, k, naive, interleaved, mask.entry_count())


def _empty_targets(columns, partition: ChunkPartition):
    return [
        (columns[t][0], t)
        for start, end in partition.boundaries
        for t in range(start, end)
    ]


def interleaved_forward(model, columns, vision, partition: ChunkPartition):
    """One composite-mask pass over the full teacher-forcing layout.

    `columns` holds per-position (kind, batched values) for every target
    position (see `policy.columns_from_sequences`); `vision` is the
    (vision tokens, featmap) pair from the encoder. Returns one tensor of
    empty-token output embeddings per chunk, shaped (B, chunk_len, d).

    Equals running one inference pass per chunk on the ground-truth prefix
    (`per_chunk_forward`) because action tokens never see empties and the
    empties of a chunk see exactly that chunk's context.
    """
    from .tensor import concat, narrow

    vision_tokens, featmap = vision
    mask = build_interleaved_mask(partition)
    n_actions = partition.boundaries[-1][0]
    batch = vision_tokens.shape[0]
    empty_part = model.embed_empties(_empty_targets(columns, partition), batch)
    if n_actions > 0:
        action_part = model.embed_actions(columns[:n_actions], range(n_actions), featmap)
        tokens = concat([action_part, empty_part], axis=1)
    else:
        tokens = empty_part
    hidden = model.forward_embeddings(tokens, mask, vision_tokens)
    outputs = []
    offset = n_actions
    for start, end in partition.boundaries:
        size = end - start
        outputs.append(narrow(hidden, 1, offset, size))
        offset += size
    return outputs


def per_chunk_forward(model, columns, vision, partition: ChunkPartition):
    """The naive route: one inference-style pass per chunk, each feeding the
    ground-truth action prefix plus that chunk's empty tokens. Returns the
    same per-chunk embedding list as `interleaved_forward`."""
    from .attention import build_chunk_inference_mask
    from .tensor import concat, narrow

    vision_tokens, featmap = vision
    batch = vision_tokens.shape[0]
    outputs = []
    for m, (start, end) in enumerate(partition.boundaries):
        size = end - start
        targets = [(columns[t][0], t) for t in range(start, end)]
        empty_part = model.embed_empties(targets, batch)
        if start > 0:
            action_part = model.embed_actions(columns[:start], range(start), featmap)
            tokens = concat([action_part, empty_part], axis=1)
        else:
            tokens = empty_part
        mask = build_chunk_inference_mask(start, size, chunk_id=m)
        hidden = model.forward_embeddings(tokens, mask, vision_tokens)
        outputs.append(narrow(hidden, 1, start, size))
    return outputs
