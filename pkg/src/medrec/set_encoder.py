"""Intra-visit encoder: code embeddings, stacked ISAB blocks, visit vector."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Visit
from .errors import ContractViolation, ShapeError
from .layers import LayerNorm, Module, MultiHeadAttention, RowFFN, init_uniform


class EmbeddingTables(Module):
    """Diagnosis, procedure and medication tables.

    The medication table has one extra row, index ``n_med``, used as the
    medication input of a patient's first visit.
    """

    def __init__(self, n_diag: int, n_proc: int, n_med: int, dim: int, rng: np.random.Generator):
        self.n_med = n_med
        self.diag = init_uniform(rng, (n_diag, dim), dim)
        self.proc = init_uniform(rng, (n_proc, dim), dim)
        self.med = init_uniform(rng, (n_med + 1, dim), dim)

    @property
    def padding_index(self) -> int:
        return self.n_med


def embed_codes(
    visit: Visit,
    previous_meds: Sequence[int] | None,
    tables: EmbeddingTables,
) -> tuple[Tensor, Tensor, Tensor]:
    """Look up diagnosis, procedure and previous-medication embeddings.

    Rows follow ascending code index.  ``previous_meds=None`` selects the
    padding row.
    """
    if previous_meds is None:
        med_index = [tables.padding_index]
    else:
        med_index = sorted(previous_meds)
        if any(m >= tables.n_med or m < 0 for m in med_index):
            raise ContractViolation(f"medication index outside [0, {tables.n_med})")
        if not med_index:
            med_index = [tables.padding_index]
    return (
        ad.take_rows(tables.diag, sorted(visit.diagnoses)),
        ad.take_rows(tables.proc, sorted(visit.procedures)),
        ad.take_rows(tables.med, med_index),
    )


class IsabBlock(Module):
    """Induced set attention: the set talks to learned inducing points and back."""

    def __init__(self, dim: int, n_inducing: int, heads: int, rng: np.random.Generator):
        if n_inducing < 1:
            raise ContractViolation("ISAB needs at least one inducing point")
        self.dim = dim
        self.inducing = init_uniform(rng, (n_inducing, dim), dim)
        self.att_induced = MultiHeadAttention(dim, heads, rng)
        self.ffn_induced = RowFFN(dim, rng)
        self.att_set = MultiHeadAttention(dim, heads, rng)
        self.ffn_set = RowFFN(dim, rng)
        self.norm_z = LayerNorm(dim)
        self.norm_y = LayerNorm(dim)
        self.norm_h = LayerNorm(dim)
        self.norm_out = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return isab_forward(x, self)


def isab_forward(x: Tensor, block: IsabBlock) -> Tensor:
    if x.ndim != 2 or x.shape[1] != block.dim:
        raise ShapeError(f"ISAB expects (m, {block.dim}) input, got {x.shape}")
    i = block.inducing
    z = block.norm_z(i + block.att_induced(i, x, x))
    y = block.norm_y(z + block.ffn_induced(z))
    h = block.norm_h(x + block.att_set(x, y, y))
    return block.norm_out(h + block.ffn_set(h))


class SabBlock(Module):
    """Plain self-attention block of the same width, for the SA ablation."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.dim = dim
        self.att = MultiHeadAttention(dim, heads, rng)
        self.ffn = RowFFN(dim, rng)
        self.norm_h = LayerNorm(dim)
        self.norm_out = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"SAB expects (m, {self.dim}) input, got {x.shape}")
        h = self.norm_h(x + self.att(x, x, x))
        return self.norm_out(h + self.ffn(h))


class SetEncoder(Module):
    """Exactly two stacked blocks."""

    def __init__(self, dim: int, n_inducing: int, heads: int, rng: np.random.Generator,
                 self_attention: bool = False):
        if self_attention:
            self.blocks = [SabBlock(dim, heads, rng), SabBlock(dim, heads, rng)]
        else:
            self.blocks = [IsabBlock(dim, n_inducing, heads, rng), IsabBlock(dim, n_inducing, heads, rng)]

    def __call__(self, x: Tensor) -> Tensor:
        return self.blocks[1](self.blocks[0](x))


def set_encode(
    matrices: tuple[Tensor, Tensor, Tensor],
    encoders: tuple[SetEncoder, SetEncoder, SetEncoder],
) -> tuple[Tensor, Tensor, Tensor]:
    return tuple(enc(x) for enc, x in zip(encoders, matrices))


def visit_representation(s_d: Tensor, s_p: Tensor, s_m: Tensor) -> Tensor:
    """Sum each encoded set over its code axis and concatenate: ``1 x 3*dim``."""
    return ad.concat([ad.sum_reduce(s, axis=0, keepdims=True) for s in (s_d, s_p, s_m)], axis=1)
