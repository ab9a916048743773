"""Synthetic longitudinal EHR data with planted diagnosis-to-medication rules.

Each visit's medications are the union of the rule images of its diagnoses
plus a carried-over fraction of the previous visit's medications.  With
``ddi_avoiding`` set, candidates that interact with an already accepted
medication are dropped (carried-over medications are accepted first).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import CodeVocabulary, EHRDataset, PatientRecord, Visit, save_dataset
from .errors import ConfigurationError

RULES_FILE = "rules.json"


@dataclass
class SynthConfig:
    n_diag: int = 60
    n_proc: int = 40
    n_med: int = 30
    n_patients: int = 600
    mean_visits: float = 2.4
    max_visits: int = 10
    diag_per_visit: tuple[int, int] = (2, 5)
    meds_per_diag: tuple[int, int] = (1, 2)
    chronic_rate: float = 0.5
    procedure_rate: float = 0.7
    persistence: float = 0.5
    ddi_density: float = 0.05
    ddi_avoiding: bool = False
    seed: int = 2023
    rules: dict[int, list[int]] | None = field(default=None)

    def validate(self) -> None:
        if min(self.n_diag, self.n_proc, self.n_med) < 1:
            raise ConfigurationError("vocabulary sizes must be positive")
        if self.n_patients < 1:
            raise ConfigurationError("patient count must be positive")
        if self.mean_visits < 1 or self.max_visits < 1:
            raise ConfigurationError("visit lengths must be at least 1")
        lo, hi = self.diag_per_visit
        if not 1 <= lo <= hi <= self.n_diag:
            raise ConfigurationError(f"diag_per_visit {self.diag_per_visit} out of range")
        lo, hi = self.meds_per_diag
        if not 1 <= lo <= hi <= self.n_med:
            raise ConfigurationError(f"meds_per_diag {self.meds_per_diag} out of range")
        for name in ("chronic_rate", "procedure_rate", "persistence", "ddi_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.rules is not None:
            for d, meds in self.rules.items():
                if not 0 <= int(d) < self.n_diag:
                    raise ConfigurationError(f"rule table names diagnosis {d} outside [0, {self.n_diag})")
                if not meds:
                    raise ConfigurationError(f"rule for diagnosis {d} is empty")
                for m in meds:
                    if not 0 <= m < self.n_med:
                        raise ConfigurationError(f"rule {d} names medication {m} outside [0, {self.n_med})")


def make_vocab(n_diag: int, n_proc: int, n_med: int) -> CodeVocabulary:
    return CodeVocabulary(
        [f"D{i:04d}" for i in range(n_diag)],
        [f"P{i:04d}" for i in range(n_proc)],
        [f"M{i:04d}" for i in range(n_med)],
    )


def random_ddi(rng: np.random.Generator, n_med: int, density: float) -> np.ndarray:
    upper = np.triu(rng.random((n_med, n_med)) < density, k=1)
    a = (upper | upper.T).astype(np.float64)
    return a


def _sample_visit_count(rng, cfg: SynthConfig) -> int:
    return int(min(rng.geometric(1.0 / cfg.mean_visits), cfg.max_visits))


def synth_generate(cfg: SynthConfig) -> tuple[EHRDataset, dict[int, tuple[int, ...]]]:
    """Generate a dataset in memory; returns it with the rule table used."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.rules is None:
        lo, hi = cfg.meds_per_diag
        rules = {
            d: tuple(sorted(rng.choice(cfg.n_med, size=rng.integers(lo, hi + 1), replace=False).tolist()))
            for d in range(cfg.n_diag)
        }
    else:
        rules = {int(d): tuple(sorted(set(m))) for d, m in cfg.rules.items()}
    proc_of = rng.integers(0, cfg.n_proc, size=cfg.n_diag)
    ddi = random_ddi(rng, cfg.n_med, cfg.ddi_density)

    # Unruled diagnoses cannot produce targets, so only ruled ones are sampled.
    ruled = np.array(sorted(rules))
    d_lo, d_hi = cfg.diag_per_visit
    d_hi = min(d_hi, len(ruled))
    d_lo = min(d_lo, d_hi)

    patients = []
    for k in range(cfg.n_patients):
        visits = []
        diags: set[int] = set()
        prev_meds: tuple[int, ...] = ()
        for _ in range(_sample_visit_count(rng, cfg)):
            kept = {d for d in sorted(diags) if rng.random() < cfg.chronic_rate}
            target = int(rng.integers(d_lo, d_hi + 1))
            fresh = [int(d) for d in rng.permutation(ruled) if d not in kept]
            diags = kept | set(fresh[: max(0, target - len(kept))])
            if not diags:
                diags = {fresh[0]}
            d_sorted = sorted(diags)
            procs = {int(proc_of[d]) for d in d_sorted if rng.random() < cfg.procedure_rate}
            if not procs:
                procs = {int(proc_of[d_sorted[0]])}

            carried: list[int] = []
            if prev_meds and cfg.persistence > 0:
                n_keep = int(round(cfg.persistence * len(prev_meds)))
                carried = sorted(rng.choice(prev_meds, size=n_keep, replace=False).tolist())
            ruled_meds = sorted({m for d in d_sorted for m in rules[d]})
            meds: list[int] = []
            for m in carried + [m for m in ruled_meds if m not in carried]:
                if cfg.ddi_avoiding and any(ddi[m, other] for other in meds):
                    continue
                meds.append(int(m))
            visits.append(Visit(tuple(d_sorted), tuple(sorted(procs)), tuple(sorted(meds))))
            prev_meds = tuple(sorted(meds))
        patients.append(PatientRecord(f"P{k:06d}", visits))

    vocab = make_vocab(cfg.n_diag, cfg.n_proc, cfg.n_med)
    return EHRDataset(vocab, patients, ddi), rules


def write_synthetic(cfg: SynthConfig, out_dir: str | Path) -> EHRDataset:
    dataset, rules = synth_generate(cfg)
    root = save_dataset(dataset, out_dir)
    meta = asdict(cfg)
    meta["rules"] = {str(d): list(m) for d, m in sorted(rules.items())}
    (root / RULES_FILE).write_text(json.dumps(meta, separators=(",", ":"), sort_keys=True) + "\n",
                                   encoding="utf-8")
    return dataset


def read_rules(path: str | Path) -> dict[int, tuple[int, ...]]:
    meta = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(d): tuple(m) for d, m in meta["rules"].items()}
