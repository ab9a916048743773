"""Attention primitives and the small parameter containers built on them."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

LN_EPS = 1e-5


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ConfigurationError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``mask`` marks disallowed key positions with True.
    """
    return ad.attention(q, k, v, heads=1, mask=mask)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Project into ``heads`` subspaces, attend in each, concatenate, project out.

    Head ``i`` uses columns ``i*d/h:(i+1)*d/h`` of each input projection.
    """
    d = w_q.shape[1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"head count {heads} does not divide width {d}")
    for name, x, w in (("query", q, w_q), ("key", k, w_k), ("value", v, w_v)):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"{name} width {x.shape[-1]} != projection rows {w.shape[0]}")
    out = ad.attention(ad.linear(q, w_q), ad.linear(k, w_k), ad.linear(v, w_v), heads, mask)
    return out if w_o is None else ad.linear(out, w_o)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = init_uniform(rng, (n_in, n_out), n_in)
        self.bias = init_uniform(rng, (n_out,), n_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    """Per-head query/key/value projections plus a square output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, identity: bool = False):
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"head count {heads} does not divide width {dim}")
        self.heads = heads
        if identity:
            self.w_q, self.w_k, self.w_v, self.w_o = (ad.parameter(np.eye(dim)) for _ in range(4))
        else:
            self.w_q, self.w_k, self.w_v, self.w_o = (
                init_uniform(rng, (dim, dim), dim) for _ in range(4)
            )

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return multi_head_attention(q, k, v, self.heads, self.w_q, self.w_k, self.w_v, self.w_o, mask)


def row_ffn(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"row_ffn: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return ad.relu(ad.linear(x, weight, bias))


class RowFFN(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.weight = init_uniform(rng, (dim, dim), dim)
        self.bias = init_uniform(rng, (dim,), dim)

    def __call__(self, x: Tensor) -> Tensor:
        return row_ffn(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, LN_EPS)


class MLP(Module):
    """One hidden Relu layer of the input width."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.hidden = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(ad.relu(self.hidden(x)))
