"""Chunked autoregressive action-sequence policies at desk scale.

The package bundles a small reverse-mode autodiff core, composite-mask
attention, heterogeneous action codecs, a chunk-schedule-driven generator,
a deterministic 2D block-pushing environment, and a behavior-cloning
training harness, plus a CLI and a JSON service for interactive use.
"""

from .tensor import Rng, Tape, Tensor, precision

__all__ = ["Tensor", "Tape", "Rng", "precision"]
__version__ = "0.1.0"
