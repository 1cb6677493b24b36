"""Parameter containers and the standard layers built on the tensor ops."""

from __future__ import annotations

import numpy as np

from .tensor import (
    Rng,
    Tensor,
    gelu,
    layernorm,
    linear,
)

__all__ = ["Module", "Linear", "LayerNorm", "Embedding", "Mlp", "Conv2d"]


class Module:
    """Minimal parameter container with hierarchical naming.

    Attributes that are `Tensor`s with requires_grad participate as
    parameters; attributes that are Modules (or lists of Modules) contribute
    their parameters under a dotted prefix.
    """

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{name}.{key}.{sub}"] = p
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{key}"] = item
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def _param(rng: Rng, shape, std: float) -> Tensor:
    return Tensor(rng.normal(shape, std=std), requires_grad=True)


class Linear(Module):
    """Affine map x @ w + b with w stored as (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.w = _param(rng, (d_in, d_out), std=1.0 / np.sqrt(d_in))
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)


class Embedding(Module):
    """Learned lookup table of shape (vocab, dim)."""

    def __init__(self, vocab: int, dim: int, rng: Rng, std: float = 0.02):
        self.table = _param(rng, (vocab, dim), std=std)

    def __call__(self, ids) -> Tensor:
        from .tensor import embedding_lookup

        return embedding_lookup(self.table, ids)


class Mlp(Module):
    """Two-layer feed-forward block with gelu in between."""

    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.fc_in = Linear(dim, hidden, rng)
        self.fc_out = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc_out(gelu(self.fc_in(x)))


class Conv2d(Module):
    """Square-kernel convolution over NCHW tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        self.w = _param(rng, (c_out, c_in, kernel, kernel), std=1.0 / np.sqrt(c_in * kernel * kernel))
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import conv2d

        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
