"""The full hierarchical recommender: set encoders, recurrence, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PatientRecord, to_multihot
from .errors import ConfigurationError
from .layers import Module
from .longitudinal import RecurrentAttentionBlock, RecurrentBaseline
from .objective import (
    LossConfig,
    PredictionHead,
    bce_loss,
    combined_loss,
    ddi_loss,
    predict_probabilities,
)
from .set_encoder import EmbeddingTables, SetEncoder, embed_codes, set_encode, visit_representation


@dataclass(frozen=True)
class ModelConfig:
    n_diag: int
    n_proc: int
    n_med: int
    dim: int = 128
    n_inducing: int = 16
    heads: int = 4
    n_states: int = 4
    rab_heads: int = 1
    set_encoder: bool = True
    longitudinal: bool = True
    self_attention: bool = False
    seed: int = 2023

    def __post_init__(self):
        if self.dim < 1 or self.dim % self.heads:
            raise ConfigurationError(f"heads {self.heads} must divide dim {self.dim}")
        if (3 * self.dim) % self.rab_heads:
            raise ConfigurationError(f"rab_heads {self.rab_heads} must divide {3 * self.dim}")
        if self.n_inducing < 1 or self.n_states < 1:
            raise ConfigurationError("inducing points and state vectors must be positive")

    @property
    def d_model(self) -> int:
        return 3 * self.dim

    def to_json(self) -> dict:
        return asdict(self)


class MedRecModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.embeddings = EmbeddingTables(c.n_diag, c.n_proc, c.n_med, c.dim, rng)
        if c.set_encoder:
            self.encoders = [
                SetEncoder(c.dim, c.n_inducing, c.heads, rng, self_attention=c.self_attention)
                for _ in range(3)
            ]
        else:
            self.encoders = []
        if c.longitudinal:
            self.sequence = RecurrentAttentionBlock(c.d_model, c.n_states, rng, heads=c.rab_heads)
        else:
            self.sequence = RecurrentBaseline(c.d_model, rng)
        self.head = PredictionHead(c.d_model, c.n_med, rng)

    def visit_tokens(self, patient: PatientRecord) -> list[Tensor]:
        tokens = []
        previous = None
        for visit in patient.visits:
            matrices = embed_codes(visit, previous, self.embeddings)
            if self.encoders:
                matrices = set_encode(matrices, tuple(self.encoders))
            tokens.append(visit_representation(*matrices))
            previous = visit.medications
        return tokens

    def forward(self, patient: PatientRecord) -> Tensor:
        """Per-visit medication probabilities, shape ``T x n_med``."""
        encoded = self.sequence(self.visit_tokens(patient))
        # Row-at-a-time keeps each visit's arithmetic independent of T.
        return ad.concat([predict_probabilities(v, self.head) for v in encoded], axis=0)

    __call__ = forward

    def targets(self, patient: PatientRecord) -> np.ndarray:
        return np.stack([to_multihot(v.medications, self.config.n_med) for v in patient.visits])

    def loss(self, patient: PatientRecord, ddi: np.ndarray, loss_cfg: LossConfig) -> Tensor:
        probs = self.forward(patient)
        bce = bce_loss(probs, self.targets(patient))
        if loss_cfg.alpha == 0:
            return bce
        return combined_loss(bce, ddi_loss(probs, ddi, loss_cfg.ddi_mode), loss_cfg.alpha)

    def predict(self, patient: PatientRecord) -> np.ndarray:
        return self.forward(patient).data
