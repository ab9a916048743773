"""Longitudinal EHR records, the DDI graph, and the on-disk dataset format.

A dataset directory holds three files::

    vocab.json       {"diagnoses": [...], "procedures": [...], "medications": [...]}
    patients.jsonl   {"id": ..., "visits": [{"diagnoses": [...], "procedures": [...],
                                             "medications": [...]}, ...]}
    ddi.json         [[i, j], [j, i], ...]   symmetric medication index pairs

All indices are 0-based.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, IngestionError

VOCAB_FILE = "vocab.json"
PATIENTS_FILE = "patients.jsonl"
DDI_FILE = "ddi.json"


@dataclass(frozen=True)
class CodeVocabulary:
    diagnoses: tuple[str, ...]
    procedures: tuple[str, ...]
    medications: tuple[str, ...]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("diagnoses", "procedures", "medications"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        spaces = [set(self.diagnoses), set(self.procedures), set(self.medications)]
        for codes, space in zip((self.diagnoses, self.procedures, self.medications), spaces):
            if len(space) != len(codes):
                raise IngestionError("duplicate code inside one vocabulary namespace")
        if spaces[0] & spaces[1] or spaces[0] & spaces[2] or spaces[1] & spaces[2]:
            raise IngestionError("vocabulary namespaces overlap")
        index = {
            "diagnoses": {c: i for i, c in enumerate(self.diagnoses)},
            "procedures": {c: i for i, c in enumerate(self.procedures)},
            "medications": {c: i for i, c in enumerate(self.medications)},
        }
        object.__setattr__(self, "_index", index)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.diagnoses), len(self.procedures), len(self.medications)

    def index_of(self, namespace: str, code: str) -> int:
        return self._index[namespace][code]

    def to_json(self) -> dict:
        return {
            "diagnoses": list(self.diagnoses),
            "procedures": list(self.procedures),
            "medications": list(self.medications),
        }


@dataclass(frozen=True)
class Visit:
    """Code index sets of one admission, stored sorted."""

    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    medications: tuple[int, ...]

    def __post_init__(self):
        for name in ("diagnoses", "procedures", "medications"):
            object.__setattr__(self, name, tuple(sorted(getattr(self, name))))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        if not self.visits:
            raise ContractViolation(f"patient {self.patient_id} has no visits")

    def __len__(self) -> int:
        return len(self.visits)


@dataclass
class EHRDataset:
    vocab: CodeVocabulary
    patients: list[PatientRecord]
    ddi: np.ndarray

    @property
    def n_med(self) -> int:
        return len(self.vocab.medications)

    def by_id(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}

    def subset(self, ids: Iterable[str]) -> list[PatientRecord]:
        lookup = self.by_id()
        return [lookup[i] for i in ids]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def part(self, name: str) -> tuple[str, ...]:
        try:
            return {"train": self.train, "validation": self.validation, "val": self.validation,
                    "test": self.test}[name]
        except KeyError:
            raise ConfigurationError(f"unknown split {name!r}") from None


def to_multihot(indices: Iterable[int], size: int) -> np.ndarray:
    out = np.zeros(size)
    for i in indices:
        if not 0 <= i < size:
            raise ContractViolation(f"index {i} outside vocabulary of size {size}")
        out[i] = 1.0
    return out


def ddi_from_pairs(pairs: Iterable[Sequence[int]], n_med: int) -> np.ndarray:
    """Build the adjacency matrix from ordered pairs; mirrors each pair."""
    a = np.zeros((n_med, n_med))
    for i, j in pairs:
        if i == j:
            raise ContractViolation(f"self-interaction ({i}, {j})")
        a[i, j] = a[j, i] = 1.0
    return a


def validate_ddi(a: np.ndarray, n_med: int) -> None:
    if a.shape != (n_med, n_med):
        raise IngestionError(f"DDI matrix shape {a.shape} != ({n_med}, {n_med})")
    if not np.isin(a, (0.0, 1.0)).all():
        raise IngestionError("DDI matrix entries must be 0 or 1")
    if np.any(np.diag(a)):
        raise IngestionError("DDI matrix diagonal must be zero")
    if not np.array_equal(a, a.T):
        raise IngestionError("DDI matrix is not symmetric")


# -- parsing ----------------------------------------------------------------


def _parse_codes(raw, bound: int, what: str, where: str) -> tuple[int, ...]:
    if not isinstance(raw, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in raw):
        raise IngestionError(f"{what} must be a list of integers", where)
    if len(set(raw)) != len(raw):
        raise IngestionError(f"duplicate code in {what}", where)
    for c in raw:
        if not 0 <= c < bound:
            raise IngestionError(f"{what} code {c} outside vocabulary of size {bound}", where)
    return tuple(raw)


def parse_patient(obj, sizes: tuple[int, int, int], where: str, supervised: bool = True) -> PatientRecord:
    if not isinstance(obj, dict) or "id" not in obj or "visits" not in obj:
        raise IngestionError("record needs 'id' and 'visits'", where)
    visits_raw = obj["visits"]
    if not isinstance(visits_raw, list) or not visits_raw:
        raise IngestionError("patient must have at least one visit", where)
    n_diag, n_proc, n_med = sizes
    visits = []
    for t, v in enumerate(visits_raw, start=1):
        at = f"{where} visit {t}"
        if not isinstance(v, dict):
            raise IngestionError("visit must be an object", at)
        d = _parse_codes(v.get("diagnoses"), n_diag, "diagnoses", at)
        p = _parse_codes(v.get("procedures"), n_proc, "procedures", at)
        m = _parse_codes(v.get("medications", []), n_med, "medications", at)
        if not d or not p:
            raise IngestionError("diagnosis and procedure sets must be non-empty", at)
        if supervised and not m:
            raise IngestionError("medication set is empty in a supervised record", at)
        visits.append(Visit(d, p, m))
    return PatientRecord(str(obj["id"]), visits)


def read_patients(path: str | os.PathLike, sizes: tuple[int, int, int], supervised: bool = True) -> list[PatientRecord]:
    path = Path(path)
    records = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON ({exc.msg})", where) from None
            record = parse_patient(obj, sizes, where, supervised)
            if record.patient_id in seen:
                raise IngestionError(f"duplicate patient id {record.patient_id!r}", where)
            seen.add(record.patient_id)
            records.append(record)
    return records


def read_vocab(path: str | os.PathLike) -> CodeVocabulary:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"invalid JSON ({exc.msg})", f"{path.name}:{exc.lineno}") from None
    keys = ("diagnoses", "procedures", "medications")
    if not isinstance(obj, dict) or any(not isinstance(obj.get(k), list) for k in keys):
        raise IngestionError(f"vocabulary needs lists {keys}", path.name)
    try:
        return CodeVocabulary(*(obj[k] for k in keys))
    except IngestionError as exc:
        raise IngestionError(str(exc), path.name) from None


def read_ddi(path: str | os.PathLike, n_med: int) -> np.ndarray:
    path = Path(path)
    try:
        pairs = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"invalid JSON ({exc.msg})", f"{path.name}:{exc.lineno}") from None
    if not isinstance(pairs, list):
        raise IngestionError("DDI file must hold a list of index pairs", path.name)
    a = np.zeros((n_med, n_med))
    for k, pair in enumerate(pairs):
        where = f"{path.name} pair {k}"
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in pair)):
            raise IngestionError("pair must be two integers", where)
        i, j = pair
        if not (0 <= i < n_med and 0 <= j < n_med):
            raise IngestionError(f"pair ({i}, {j}) outside medication vocabulary", where)
        if i == j:
            raise IngestionError(f"self-interaction ({i}, {j})", where)
        a[i, j] = 1.0
    asym = np.argwhere(a != a.T)
    if len(asym):
        i, j = asym[0]
        raise IngestionError(f"pair ({i}, {j}) present without ({j}, {i})", path.name)
    return a


def load_dataset(path: str | os.PathLike, supervised: bool = True) -> EHRDataset:
    root = Path(path)
    if not root.is_dir():
        raise IngestionError("dataset directory not found", str(root))
    vocab = read_vocab(root / VOCAB_FILE)
    patients = read_patients(root / PATIENTS_FILE, vocab.sizes, supervised)
    ddi = read_ddi(root / DDI_FILE, len(vocab.medications))
    return EHRDataset(vocab, patients, ddi)


# -- writing ----------------------------------------------------------------


def patient_to_json(p: PatientRecord) -> dict:
    return {
        "id": p.patient_id,
        "visits": [
            {"diagnoses": list(v.diagnoses), "procedures": list(v.procedures),
             "medications": list(v.medications)}
            for v in p.visits
        ],
    }


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_patients(path: str | os.PathLike, patients: Iterable[PatientRecord]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in patients:
            fh.write(_dump(patient_to_json(p)) + "\n")


def save_dataset(dataset: EHRDataset, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    validate_ddi(dataset.ddi, dataset.n_med)
    (root / VOCAB_FILE).write_text(_dump(dataset.vocab.to_json()) + "\n", encoding="utf-8")
    write_patients(root / PATIENTS_FILE, dataset.patients)
    pairs = [[int(i), int(j)] for i, j in np.argwhere(dataset.ddi > 0)]
    (root / DDI_FILE).write_text(_dump(pairs) + "\n", encoding="utf-8")
    return root


# -- splitting --------------------------------------------------------------


def split_dataset(
    records: Sequence[PatientRecord],
    ratios: Sequence[float] = (4, 1, 1),
    seed: int = 2023,
) -> DatasetSplit:
    """Shuffle patients, then cut train/validation/test blocks by ``ratios``.

    Validation and test sizes are floored (at least one patient each); the
    remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigurationError(f"ratios must be three positive numbers, got {ratios}")
    n = len(records)
    if n < 3:
        raise ConfigurationError(f"{n} patients cannot fill three partitions")
    total = float(sum(ratios))
    n_val = max(1, int(n * ratios[1] // total))
    n_test = max(1, int(n * ratios[2] // total))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ConfigurationError(f"{n} patients leave no training partition")
    order = np.random.default_rng(seed).permutation(n)
    ids = [records[i].patient_id for i in order]
    return DatasetSplit(
        tuple(ids[:n_train]),
        tuple(ids[n_train:n_train + n_val]),
        tuple(ids[n_train + n_val:]),
    )
