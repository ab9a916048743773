"""Run configuration: defaults, presets, file loading, flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .model import ModelConfig
from .objective import DDI_MODES, LossConfig
from .optim import MOMENT_MODES

ABLATIONS = ("no_ise", "no_ile", "no_aclm", "no_ddi_loss", "sab_variant")
CURRICULUM_DIRECTIONS = ("longer-slower", "shorter-slower")

PRESETS = {
    "full": {},
    "desk": {"dim": 32, "n_inducing": 8, "heads": 2, "n_states": 2},
}


@dataclass(frozen=True)
class RunConfig:
    dim: int = 128
    n_inducing: int = 16
    heads: int = 4
    n_states: int = 4
    rab_heads: int = 1
    lr: float = 1e-3
    epochs: int = 50
    seed: int = 2023
    alpha: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iter: int | None = None
    patience: int | None = 10
    no_ise: bool = False
    no_ile: bool = False
    no_aclm: bool = False
    no_ddi_loss: bool = False
    sab_variant: bool = False
    moment_mode: str = "literal"
    ddi_mode: str = "penalty"
    curriculum: str = "longer-slower"
    split_ratios: tuple[float, float, float] = (4, 1, 1)
    eval_rounds: int = 10
    eval_fraction: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "split_ratios", tuple(self.split_ratios))
        if self.moment_mode not in MOMENT_MODES:
            raise ConfigurationError(f"moment_mode must be one of {MOMENT_MODES}")
        if self.ddi_mode not in DDI_MODES:
            raise ConfigurationError(f"ddi_mode must be one of {DDI_MODES}")
        if self.curriculum not in CURRICULUM_DIRECTIONS:
            raise ConfigurationError(f"curriculum must be one of {CURRICULUM_DIRECTIONS}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.sab_variant and self.no_ise:
            raise ConfigurationError("sab_variant replaces the set encoder that no_ise removes")

    @property
    def variant(self) -> str:
        active = [name.replace("_", "-") for name in ABLATIONS if getattr(self, name)]
        return "+".join(active) if active else "base"

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.no_ddi_loss else self.alpha

    def loss_config(self) -> LossConfig:
        return LossConfig(self.effective_alpha, self.ddi_mode)

    def model_config(self, n_diag: int, n_proc: int, n_med: int) -> ModelConfig:
        return ModelConfig(
            n_diag, n_proc, n_med,
            dim=self.dim, n_inducing=self.n_inducing, heads=self.heads,
            n_states=self.n_states, rab_heads=self.rab_heads,
            set_encoder=not self.no_ise, longitudinal=not self.no_ile,
            self_attention=self.sab_variant, seed=self.seed,
        )

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["split_ratios"] = list(self.split_ratios)
        doc["variant"] = self.variant
        return doc


def _field_names() -> set[str]:
    return {f.name for f in fields(RunConfig)}


def normalise_keys(mapping: dict) -> dict:
    out = {}
    known = _field_names()
    for key, value in mapping.items():
        name = str(key).replace("-", "_")
        if name not in known:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        out[name] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: cannot parse configuration ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: configuration must be a mapping")
    return normalise_keys(doc)


def build_config(preset: str | None = None, file: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then preset, then config file, then flags (flags win)."""
    values: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if file is not None:
        values.update(load_config_file(file))
    if overrides:
        values.update(normalise_keys({k: v for k, v in overrides.items() if v is not None}))
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
