"""Inter-visit encoder: a recurrent attention block over a learned state set.

One visit is consumed per step, so the representation at visit t depends on
visits 1..t only.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, ShapeError
from .layers import MLP, Linear, Module, MultiHeadAttention


class Gate(Module):
    """``x * f + z * i`` with forget/input/candidate computed from ``y``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.forget = Linear(dim, dim, rng)
        self.input = Linear(dim, dim, rng)
        self.candidate = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        return gate(x, y, self)


def gate(x: Tensor, y: Tensor, params: Gate) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"gate: x {x.shape} and y {y.shape} differ")
    f = ad.sigmoid(ad.shift(params.forget(y), 1.0))
    i = ad.sigmoid(ad.shift(params.input(y), -1.0))
    z = ad.tanh(params.candidate(y))
    return ad.add(ad.mul(x, f), ad.mul(z, i))


class RecurrentAttentionBlock(Module):
    def __init__(self, d_model: int, n_states: int, rng: np.random.Generator, heads: int = 1):
        if n_states < 1:
            raise ContractViolation("state set needs at least one vector")
        self.d_model = d_model
        self.initial_state = ad.parameter(np.zeros((n_states, d_model)))
        self.att_state_self = MultiHeadAttention(d_model, heads, rng)
        self.att_state_visit = MultiHeadAttention(d_model, heads, rng)
        self.att_visit_self = MultiHeadAttention(d_model, heads, rng)
        self.att_visit_state = MultiHeadAttention(d_model, heads, rng)
        self.state_proj = Linear(2 * d_model, d_model, rng)
        self.visit_proj = Linear(2 * d_model, d_model, rng)
        self.gate_1 = Gate(d_model, rng)
        self.gate_2 = Gate(d_model, rng)
        self.state_mlp = MLP(d_model, rng)
        self.visit_mlp = MLP(d_model, rng)

    def __call__(self, tokens: Sequence[Tensor]) -> list[Tensor]:
        return encode_sequence(tokens, self)


def rab_step(state: Tensor, token: Tensor, rab: RecurrentAttentionBlock) -> tuple[Tensor, Tensor]:
    """Advance the state by one visit; returns ``(next_state, updated_token)``."""
    d = rab.d_model
    if state.ndim != 2 or state.shape[1] != d or token.shape != (1, d):
        raise ShapeError(f"rab_step: state {state.shape}, token {token.shape}, width {d}")
    mixed = rab.state_proj(ad.concat([
        rab.att_state_self(state, state, state),
        rab.att_state_visit(state, token, token),
    ], axis=1))
    gated = rab.gate_1(mixed, state)
    next_state = rab.gate_2(rab.state_mlp(gated), gated)

    attended = rab.visit_proj(ad.concat([
        rab.att_visit_self(token, token, token),
        rab.att_visit_state(token, state, state),
    ], axis=1))
    residual = ad.add(attended, token)
    return next_state, ad.add(rab.visit_mlp(residual), residual)


def encode_sequence(tokens: Sequence[Tensor], rab: RecurrentAttentionBlock) -> list[Tensor]:
    if not tokens:
        raise ContractViolation("cannot encode an empty visit sequence")
    state = rab.initial_state
    out = []
    for token in tokens:
        state, updated = rab_step(state, token, rab)
        out.append(updated)
    return out


class RecurrentBaseline(Module):
    """Elman RNN standing in for the attention block in the ILE ablation."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.initial_state = ad.parameter(np.zeros((1, d_model)))
        self.input_proj = Linear(d_model, d_model, rng)
        self.state_proj = Linear(d_model, d_model, rng, bias=False)

    def __call__(self, tokens: Sequence[Tensor]) -> list[Tensor]:
        if not tokens:
            raise ContractViolation("cannot encode an empty visit sequence")
        h = self.initial_state
        out = []
        for token in tokens:
            h = ad.tanh(ad.add(self.input_proj(token), self.state_proj(h)))
            out.append(h)
        return out
