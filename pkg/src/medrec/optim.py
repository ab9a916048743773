"""Adam with a per-patient learning rate scaled by progress and visit length.

The step size for a patient with ``l`` visits at iteration ``I`` is
``gamma * (1 - (I + l) / I_max)``, floored at zero.

Moments are kept raw (``m = b1*m + (1-b1)*g``) and divided by a correction
term before use: the constants ``1 - b1`` / ``1 - b2`` in ``"literal"`` mode,
or the usual ``1 - b1**t`` / ``1 - b2**t`` in ``"standard"`` mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError, ContractViolation

MOMENT_MODES = ("literal", "standard")


def effective_lr(gamma: float, iteration: int, visit_length: int, max_iter: int) -> float:
    if max_iter <= 0:
        raise ConfigurationError(f"maximum iteration must be positive, got {max_iter}")
    return max(0.0, gamma * (1 - (iteration + visit_length) / max_iter))


@dataclass
class CurriculumContext:
    iteration: int
    visit_length: int

    def __post_init__(self):
        if self.iteration < 0 or self.visit_length < 1:
            raise ContractViolation(
                f"need iteration >= 0 and visit length >= 1, got {self.iteration}, {self.visit_length}"
            )


@dataclass
class OptimizerState:
    lr: float = 1e-3
    max_iter: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    moment_mode: str = "literal"
    curriculum: bool = True
    steps: int = 0
    mu: dict[str, np.ndarray] = field(default_factory=dict)
    eta: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.moment_mode not in MOMENT_MODES:
            raise ConfigurationError(f"moment_mode must be one of {MOMENT_MODES}")
        if self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be at least 1, got {self.max_iter}")

    def corrections(self) -> tuple[float, float]:
        if self.moment_mode == "literal":
            return 1.0 - self.beta1, 1.0 - self.beta2
        t = self.steps
        return 1.0 - self.beta1 ** t, 1.0 - self.beta2 ** t

    def corrected(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        c1, c2 = self.corrections()
        return self.mu[name] / c1, self.eta[name] / c2

    def step_size(self, ctx: CurriculumContext) -> float:
        if not self.curriculum:
            return self.lr
        return effective_lr(self.lr, ctx.iteration, ctx.visit_length, self.max_iter)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    ctx: CurriculumContext,
) -> float:
    """Update ``params`` in place from ``grads``; returns the step size used."""
    if set(grads) != set(params):
        raise ContractViolation("gradient names do not match parameter names")
    lr = state.step_size(ctx)
    state.steps += 1
    c1, c2 = state.corrections()
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolation(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.mu.get(name)
        if m is None:
            m = state.mu[name] = np.zeros_like(p.data)
            state.eta[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractViolation(f"{name}: moment {m.shape} vs parameter {p.shape}")
        m = state.mu[name] = b1 * m + (1.0 - b1) * g
        v = state.eta[name] = b2 * state.eta[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
