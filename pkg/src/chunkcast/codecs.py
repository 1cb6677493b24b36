"""Embedding, decoding, losses, and samplers for the three action families.

Actions come in three flavors with no shared vocabulary: discrete ids,
continuous vectors, and pixel coordinates on the observation. Each family
owns an embedder (value -> model-dim vector) and a decoder (output embedding
-> distribution):

  discrete    table lookup            -> categorical via linear + softmax
  continuous  linear layer            -> diagonal Gaussian mixture via linear
  pixel       feature gather at coord -> coarse logits against the feature
                                         map, bilinearly upsampled to a
                                         full-resolution heatmap

The upsampling is a fixed bilinear operator (closed-form interpolation
matrices), keeping the full-resolution heatmap contract testable without a
learned upsampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from . import tensor as T
from .nn import Embedding, Linear, Module
from .tensor import Rng, Tensor

__all__ = [
    "DiscreteSpec",
    "ContinuousSpec",
    "PixelSpec",
    "KindSpec",
    "ActionValue",
    "GmmParams",
    "Heatmap",
    "gmm_nll",
    "gmm_sample",
    "bilinear_upsample",
    "DiscreteCodec",
    "ContinuousCodec",
    "PixelCodec",
    "make_codec",
]

LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiscreteSpec:
    name: str
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError(f"{self.name}: discrete cardinality must be >= 2")


@dataclass(frozen=True)
class ContinuousSpec:
    name: str
    dim: int
    components: int = 4

    def __post_init__(self):
        if self.dim < 1 or self.components < 1:
            raise ValueError(f"{self.name}: dim and components must be >= 1")


@dataclass(frozen=True)
class PixelSpec:
    name: str
    height: int
    width: int
    upsample: int = 8

    def __post_init__(self):
        if min(self.height, self.width, self.upsample) < 1:
            raise ValueError(f"{self.name}: grid dims and upsample must be >= 1")

    @property
    def full_height(self) -> int:
        return self.height * self.upsample

    @property
    def full_width(self) -> int:
        return self.width * self.upsample


KindSpec = Union[DiscreteSpec, ContinuousSpec, PixelSpec]


@dataclass(frozen=True)
class ActionValue:
    """One concrete action: a discrete id, a continuous vector, or a
    full-resolution (row, col) pixel coordinate, tagged with its kind name."""

    kind: str
    value: object

    def as_id(self) -> int:
        return int(self.value)

    def as_vector(self) -> np.ndarray:
        return np.asarray(self.value, dtype=np.float64)

    def as_coord(self) -> tuple[int, int]:
        r, c = self.value
        return int(r), int(c)


# ---------------------------------------------------------------------------
# Gaussian mixture math
# ---------------------------------------------------------------------------


@dataclass
class GmmParams:
    """Diagonal Gaussian mixture: weights on the simplex, means and log-stds
    of shape (..., M, D). log-stds arrive already clamped by the decoder."""

    weights: Tensor
    means: Tensor
    log_stds: Tensor

    @property
    def n_components(self) -> int:
        return self.means.shape[-2]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]


def gmm_nll(params: GmmParams, x: np.ndarray) -> Tensor:
    """Negative log density of x under the mixture, log-sum-exp stabilized.

    x has shape (..., D) matching the params' leading dims; the result keeps
    the leading dims (scalar for a single row). May be negative: densities
    exceed one for tight components.
    """
    m, d = params.n_components, params.dim
    x = np.asarray(x, dtype=params.means.data.dtype)
    xb = np.broadcast_to(np.expand_dims(x, -2), params.means.shape)
    inv_std = T.exp(T.neg(params.log_stds))
    z = T.mul(T.sub(Tensor(xb, dtype=xb.dtype), params.means), inv_std)
    comp = T.mul(T.tsum(T.mul(z, z), axis=-1), -0.5)
    comp = T.sub(comp, T.tsum(params.log_stds, axis=-1))
    comp = T.add(comp, -0.5 * d * _LOG_2PI)
    mixed = T.logsumexp(T.add(T.log(params.weights), comp), axis=-1)
    return T.neg(mixed)


def gmm_sample(params: GmmParams, rng: Rng, temperature: float = 1.0) -> np.ndarray:
    """Draw one vector: pick a component by weight, then a diagonal Gaussian.

    Temperature scales the component stds; zero returns the mean of the
    highest-weight component (mode approximation; the exact mixture mode has
    no closed form).
    """
    w = params.weights.data.reshape(-1, params.n_components)[0]
    means = params.means.data.reshape(params.n_components, params.dim)
    if temperature <= 0.0:
        return means[int(np.argmax(w))].copy()
    stds = np.exp(params.log_stds.data.reshape(params.n_components, params.dim))
    comp = rng.categorical(w)
    noise = rng.normal((params.dim,), dtype=np.float64)
    return means[comp] + temperature * stds[comp] * noise


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor, n) half-pixel bilinear interpolation weights, edge-clamped."""
    out = np.zeros((n * factor, n))
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        out[o, lo] += 1.0 - frac
        out[o, hi] += frac
    return out


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample the trailing two axes of (..., H, W) by a fixed bilinear
    operator; differentiable because it is just two matrix products."""
    h, w = x.shape[-2], x.shape[-1]
    uh = Tensor(_interp_matrix(h, factor).T.copy(), dtype=x.data.dtype)  # (H, H*f)
    uw = Tensor(_interp_matrix(w, factor).T.copy(), dtype=x.data.dtype)  # (W, W*f)
    nd = x.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    rows = T.transpose(T.matmul(T.transpose(x, perm), uh), perm)  # (..., H*f, W)
    return T.matmul(rows, uw)  # (..., H*f, W*f)


@dataclass
class Heatmap:
    """Normalized spatial distribution over the full-resolution grid."""

    probs: np.ndarray

    def __post_init__(self):
        total = float(self.probs.sum())
        if not math.isclose(total, 1.0, abs_tol=1e-6):
            raise ValueError(f"heatmap not normalized: sum={total}")

    def argmax(self) -> tuple[int, int]:
        """Row-major first maximum."""
        flat = int(np.argmax(self.probs))
        return flat // self.probs.shape[1], flat % self.probs.shape[1]

    def top_k(self, k: int) -> list[tuple[int, int, float]]:
        flat = self.probs.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:k]
        w = self.probs.shape[1]
        return [(int(i) // w, int(i) % w, float(flat[i])) for i in order]


# ---------------------------------------------------------------------------
# codecs: embedders + decoders bound to their weights
# ---------------------------------------------------------------------------


class DiscreteCodec(Module):
    def __init__(self, spec: DiscreteSpec, dim: int, rng: Rng):
        self.spec = spec
        re, rh = rng.split(2)
        self.table = Embedding(spec.cardinality, dim, re)
        self.head = Linear(dim, spec.cardinality, rh)

    def embed(self, ids, featmap=None) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.spec.cardinality):
            raise IndexError(
                f"{self.spec.name}: id outside [0, {self.spec.cardinality})"
            )
        return self.table(ids)

    def decode(self, h: Tensor, featmap=None) -> Tensor:
        """Return categorical logits; softmax happens in prob/loss helpers."""
        return self.head(h)

    def probs(self, h: Tensor) -> np.ndarray:
        return T.softmax(self.decode(h), axis=-1).data

    def loss(self, h: Tensor, target_ids) -> Tensor:
        logp = T.log_softmax(self.decode(h), axis=-1)
        return T.neg(T.gather_last(logp, np.asarray(target_ids)))

    def log_prob(self, h: Tensor, value: ActionValue) -> float:
        logp = T.log_softmax(self.decode(h), axis=-1)
        return float(logp.data.reshape(-1, self.spec.cardinality)[0][value.as_id()])

    def sample(self, h: Tensor, rng: Rng, temperature: float = 1.0) -> ActionValue:
        logits = self.decode(h).data.reshape(-1)
        if temperature <= 0.0:
            pick = int(np.argmax(logits))
        else:
            z = logits / temperature
            z = z - z.max()
            p = np.exp(z)
            pick = rng.categorical(p / p.sum())
        return ActionValue(self.spec.name, pick)


class ContinuousCodec(Module):
    def __init__(self, spec: ContinuousSpec, dim: int, rng: Rng):
        self.spec = spec
        ri, rh = rng.split(2)
        self.inp = Linear(spec.dim, dim, ri)
        m, d = spec.components, spec.dim
        self.head = Linear(dim, m + 2 * m * d, rh)

    def embed(self, vectors, featmap=None) -> Tensor:
        arr = np.asarray(vectors)
        if arr.shape[-1] != self.spec.dim:
            raise ValueError(f"{self.spec.name}: expected dim {self.spec.dim}")
        return self.inp(Tensor(arr, dtype=self.inp.w.data.dtype))

    def decode(self, h: Tensor, featmap=None) -> GmmParams:
        m, d = self.spec.components, self.spec.dim
        raw = self.head(h)
        lead = raw.shape[:-1]
        logits = T.narrow(raw, -1, 0, m)
        means = T.reshape(T.narrow(raw, -1, m, m * d), lead + (m, d))
        log_stds = T.reshape(T.narrow(raw, -1, m + m * d, m * d), lead + (m, d))
        return GmmParams(
            weights=T.softmax(logits, axis=-1),
            means=means,
            log_stds=T.clip(log_stds, LOG_STD_MIN, LOG_STD_MAX),
        )

    def loss(self, h: Tensor, target_vectors) -> Tensor:
        return gmm_nll(self.decode(h), np.asarray(target_vectors))

    def log_prob(self, h: Tensor, value: ActionValue) -> float:
        params = self.decode(h)
        nll = gmm_nll(params, value.as_vector().astype(params.means.data.dtype))
        return -float(nll.data.reshape(-1)[0])

    def sample(self, h: Tensor, rng: Rng, temperature: float = 1.0) -> ActionValue:
        params = self.decode(h)
        return ActionValue(self.spec.name, gmm_sample(params, rng, temperature))


class PixelCodec(Module):
    def __init__(self, spec: PixelSpec, dim: int, feat_channels: int, rng: Rng):
        self.spec = spec
        self.feat_channels = feat_channels
        ri, rh = rng.split(2)
        self.inp = Linear(feat_channels, dim, ri)
        self.out_proj = Linear(dim, feat_channels, rh)

    def _check_featmap(self, featmap: Tensor) -> None:
        c, h, w = featmap.shape[-3:]
        if (c, h, w) != (self.feat_channels, self.spec.height, self.spec.width):
            raise ValueError(
                f"{self.spec.name}: featmap {featmap.shape} does not match "
                f"({self.feat_channels}, {self.spec.height}, {self.spec.width})"
            )

    def _coarse_cells(self, coords) -> np.ndarray:
        s = self.spec.upsample
        arr = np.asarray(coords, dtype=np.int64)
        rows, cols = arr[..., 0], arr[..., 1]
        if arr.size and (
            rows.min() < 0
            or rows.max() >= self.spec.full_height
            or cols.min() < 0
            or cols.max() >= self.spec.full_width
        ):
            raise IndexError(
                f"{self.spec.name}: coordinate outside "
                f"{self.spec.full_height}x{self.spec.full_width} raster"
            )
        return np.stack([rows // s, cols // s], axis=-1)

    def embed(self, coords, featmap: Tensor) -> Tensor:
        """Gather point-wise features at the coarse cell of each coordinate.

        coords: (..., 2) full-resolution (row, col); featmap (C, H, W) or
        batched (B, C, H, W) with coords leading dim B.
        """
        self._check_featmap(featmap)
        cells = self._coarse_cells(coords)
        if featmap.ndim == 3:
            feats = T.gather_2d(featmap, cells)
        else:
            per_sample = [
                T.gather_2d(T.narrow(featmap, 0, b, 1).reshape(featmap.shape[1:]), cells[b])
                for b in range(featmap.shape[0])
            ]
            stacked = T.concat([T.reshape(f, (1,) + f.shape) for f in per_sample], axis=0)
            feats = stacked
        return self.inp(feats)

    def decode(self, h: Tensor, featmap: Tensor) -> Tensor:
        """Full-resolution logits: project the embedding into feature space,
        correlate with the feature map, upsample bilinearly."""
        self._check_featmap(featmap)
        proj = self.out_proj(h)  # (..., C)
        c, hh, ww = self.feat_channels, self.spec.height, self.spec.width
        if featmap.ndim == 3:
            flat = T.reshape(featmap, (c, hh * ww))
            coarse = T.reshape(T.matmul(T.reshape(proj, (1, c)), flat), (hh, ww))
        else:
            b = featmap.shape[0]
            flat = T.reshape(featmap, (b, c, hh * ww))
            coarse = T.reshape(
                T.matmul(T.reshape(proj, (b, 1, c)), flat), (b, hh, ww)
            )
        return bilinear_upsample(coarse, self.spec.upsample)

    def heatmap(self, h: Tensor, featmap: Tensor) -> Heatmap:
        logits = self.decode(h, featmap)
        fh, fw = self.spec.full_height, self.spec.full_width
        probs = T.softmax(T.reshape(logits, (-1, fh * fw)), axis=-1)
        return Heatmap(probs.data.reshape(-1, fh, fw)[0].astype(np.float64))

    def loss(self, h: Tensor, target_coords, featmap: Tensor) -> Tensor:
        logits = self.decode(h, featmap)
        fh, fw = self.spec.full_height, self.spec.full_width
        arr = np.asarray(target_coords, dtype=np.int64)
        flat_ids = arr[..., 0] * fw + arr[..., 1]
        lead = logits.shape[:-2]
        logp = T.log_softmax(T.reshape(logits, lead + (fh * fw,)), axis=-1)
        return T.neg(T.gather_last(logp, flat_ids))

    def log_prob(self, h: Tensor, value: ActionValue, featmap: Tensor) -> float:
        r, c = value.as_coord()
        loss = self.loss(h, np.array([r, c]).reshape(1, 2)[0], featmap)
        return -float(loss.data.reshape(-1)[0])

    def sample(self, h: Tensor, rng: Rng, featmap: Tensor, temperature: float = 1.0) -> ActionValue:
        logits = self.decode(h, featmap).data.reshape(-1).astype(np.float64)
        fw = self.spec.full_width
        if temperature <= 0.0:
            pick = int(np.argmax(logits))
        else:
            z = logits / temperature
            z = z - z.max()
            p = np.exp(z)
            pick = rng.categorical(p / p.sum())
        return ActionValue(self.spec.name, (pick // fw, pick % fw))


def make_codec(spec: KindSpec, dim: int, feat_channels: int, rng: Rng):
    if isinstance(spec, DiscreteSpec):
        return DiscreteCodec(spec, dim, rng)
    if isinstance(spec, ContinuousSpec):
        return ContinuousCodec(spec, dim, rng)
    if isinstance(spec, PixelSpec):
        return PixelCodec(spec, dim, feat_channels, rng)
    raise TypeError(f"unknown kind spec {spec!r}")
