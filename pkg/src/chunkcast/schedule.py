"""Hybrid action-sequence formats: ordered segments of token kinds with a
chunk size per segment.

A schedule fixes both what the sequence contains (e.g. four coarse waypoint
ids followed by sixteen 2-d positions) and how generation groups tokens into
chunks. The degenerate grouping modes reuse the same segments: `one_shot`
emits everything in a single chunk, `single_token` emits one token per
chunk. All three modes therefore share the model and differ only in chunk
boundaries, which `fingerprint` makes visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from .interleave import ChunkPartition

__all__ = ["Segment", "ChunkSchedule", "GenerationMode"]

GenerationMode = Literal["schedule", "one_shot", "single_token"]


@dataclass(frozen=True)
class Segment:
    kind: str
    count: int
    chunk_size: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"segment {self.kind}: count must be >= 1")
        if self.chunk_size < 1:
            raise ValueError(f"segment {self.kind}: chunk_size must be >= 1")


@dataclass(frozen=True)
class ChunkSchedule:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("schedule needs at least one segment")

    @property
    def total_len(self) -> int:
        return sum(seg.count for seg in self.segments)

    def kinds(self) -> list[str]:
        """Kind name of every position, in order."""
        out: list[str] = []
        for seg in self.segments:
            out.extend([seg.kind] * seg.count)
        return out

    def chunks(self, mode: GenerationMode = "schedule") -> list[list[tuple[str, int]]]:
        """Chunk layout as lists of (kind, position) pairs.

        `schedule` splits each segment by its chunk size (a shorter final
        chunk absorbs any remainder); `one_shot` merges everything into one
        chunk; `single_token` splits everything into size-1 chunks.
        """
        flat = [(kind, pos) for pos, kind in enumerate(self.kinds())]
        if mode == "one_shot":
            return [flat]
        if mode == "single_token":
            return [[item] for item in flat]
        if mode != "schedule":
            raise ValueError(f"unknown generation mode {mode!r}")
        out: list[list[tuple[str, int]]] = []
        pos = 0
        for seg in self.segments:
            for start in range(0, seg.count, seg.chunk_size):
                size = min(seg.chunk_size, seg.count - start)
                out.append([(seg.kind, pos + start + i) for i in range(size)])
            pos += seg.count
        return out

    def partition(self, mode: GenerationMode = "schedule", context_len: int = 0) -> ChunkPartition:
        """Teacher-forcing partition matching the chunk layout, shifted past
        an already-committed prefix of `context_len` positions."""
        sizes = []
        for chunk in self.chunks(mode):
            first = chunk[0][1]
            if first + len(chunk) <= context_len:
                continue
            if first < context_len:
                sizes.append(first + len(chunk) - context_len)
            else:
                sizes.append(len(chunk))
        return ChunkPartition.from_sizes(sizes, context_len)

    def fingerprint(self, mode: GenerationMode = "schedule") -> str:
        """Compact description of the chunk layout, e.g. 'waypoint:4|move:16'."""
        parts = []
        for chunk in self.chunks(mode):
            kinds = {kind for kind, _ in chunk}
            tag = "+".join(sorted(kinds))
            parts.append(f"{tag}:{len(chunk)}")
        return "|".join(parts)

    def to_dict(self) -> dict:
        return {
            "segments": [
                {"kind": s.kind, "count": s.count, "chunk_size": s.chunk_size}
                for s in self.segments
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChunkSchedule":
        return cls(
            tuple(
                Segment(d["kind"], int(d["count"]), int(d["chunk_size"]))
                for d in data["segments"]
            )
        )
