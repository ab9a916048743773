"""Set-based recommendation metrics and the bootstrap evaluation protocol.

Aggregation is fixed: per visit, then the mean over a patient's visits, then
the unweighted mean over patients in a round, then mean and population
standard deviation over rounds.

Empty-set conventions: Jaccard of two empty sets is 1; precision of an empty
prediction is 0 unless the truth is also empty (then 1); a visit with fewer
than two predicted drugs has DDI rate 0; a visit with no positive labels is
left out of PRAUC.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean, pstdev
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError
from .objective import infer_medications

METRICS = ("jaccard", "f1", "prauc", "ddi_rate", "avg_drugs")


@dataclass(frozen=True)
class VisitPrediction:
    probabilities: np.ndarray
    predicted: tuple[int, ...]
    truth: tuple[int, ...]


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    visits: tuple[VisitPrediction, ...]


# -- per-visit values -------------------------------------------------------


def visit_jaccard(truth: Iterable[int], pred: Iterable[int]) -> float:
    t, p = set(truth), set(pred)
    union = t | p
    return len(t & p) / len(union) if union else 1.0


def visit_f1(truth: Iterable[int], pred: Iterable[int]) -> float:
    t, p = set(truth), set(pred)
    hit = len(t & p)
    if p:
        precision = hit / len(p)
    else:
        precision = 1.0 if not t else 0.0
    if t:
        recall = hit / len(t)
    else:
        recall = 1.0 if not p else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def visit_average_precision(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """Average precision over the score-ranked list; ties go to the lower index.

    Returns None when there are no positive labels.
    """
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_hits = hits[ranked] / ranks[ranked]
    return float(precision_at_hits.sum() / n_pos)


def visit_ddi_rate(pred: Sequence[int], ddi: np.ndarray) -> float:
    pred = sorted(pred)
    n = len(pred)
    if n < 2:
        return 0.0
    sub = ddi[np.ix_(pred, pred)]
    return float(np.triu(sub, k=1).sum() / (n * (n - 1) / 2))


# -- per-patient means ------------------------------------------------------


def jaccard(patient: PatientPrediction) -> float:
    return fmean(visit_jaccard(v.truth, v.predicted) for v in patient.visits)


def f1(patient: PatientPrediction) -> float:
    return fmean(visit_f1(v.truth, v.predicted) for v in patient.visits)


def prauc(patient: PatientPrediction) -> float | None:
    values = []
    for v in patient.visits:
        labels = np.zeros(len(v.probabilities), dtype=bool)
        labels[list(v.truth)] = True
        ap = visit_average_precision(labels, v.probabilities)
        if ap is not None:
            values.append(ap)
    return fmean(values) if values else None


def ddi_rate(patient: PatientPrediction, ddi: np.ndarray) -> float:
    return fmean(visit_ddi_rate(v.predicted, ddi) for v in patient.visits)


def avg_drug_count(patient: PatientPrediction) -> float:
    return fmean(len(v.predicted) for v in patient.visits)


def patient_metrics(patient: PatientPrediction, ddi: np.ndarray) -> dict[str, float | None]:
    return {
        "jaccard": jaccard(patient),
        "f1": f1(patient),
        "prauc": prauc(patient),
        "ddi_rate": ddi_rate(patient, ddi),
        "avg_drugs": avg_drug_count(patient),
    }


def aggregate(per_patient: Sequence[dict[str, float | None]]) -> dict[str, float]:
    out = {}
    for name in METRICS:
        values = [m[name] for m in per_patient if m[name] is not None]
        out[name] = fmean(values) if values else math.nan
    return out


# -- protocol ---------------------------------------------------------------


@dataclass
class MetricsReport:
    rounds: int
    fraction: float
    sample_size: int
    seed: int
    per_round: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]
    prauc_excluded_visits: int = 0
    by_visit: list[dict] | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {}
        for name in METRICS:
            doc[f"{name}_mean"] = self.mean[name]
            doc[f"{name}_std"] = self.std[name]
        doc.update({
            "rounds": self.rounds,
            "fraction": self.fraction,
            "sample_size": self.sample_size,
            "seed": self.seed,
            "prauc_excluded_visits": self.prauc_excluded_visits,
            "per_round": self.per_round,
        })
        if self.by_visit is not None:
            doc["by_visit"] = self.by_visit
        if self.config:
            doc["config"] = self.config
        return doc

    def format(self) -> str:
        lines = [f"{'metric':<10} {'mean':>10} {'std':>10}"]
        for name in METRICS:
            lines.append(f"{name:<10} {self.mean[name]:>10.4f} {self.std[name]:>10.4f}")
        lines.append(f"rounds={self.rounds} fraction={self.fraction} sample_size={self.sample_size}")
        if self.by_visit is not None:
            lines.append("")
            lines.append(f"{'visit':<6} {'count':>6} " + " ".join(f"{n:>9}" for n in METRICS))
            for row in self.by_visit:
                vals = " ".join(
                    f"{row[n]:>9.4f}" if row[n] is not None else f"{'-':>9}" for n in METRICS
                )
                lines.append(f"{row['visit']:<6} {row['count']:>6} {vals}")
        return "\n".join(lines)


def bootstrap_evaluate(
    dump: Sequence[PatientPrediction],
    ddi: np.ndarray,
    rounds: int = 10,
    fraction: float = 0.8,
    seed: int = 2023,
) -> MetricsReport:
    """Repeatedly score a ``fraction`` of patients sampled without replacement."""
    if rounds < 1:
        raise ConfigurationError(f"rounds must be at least 1, got {rounds}")
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(dump)
    size = math.floor(fraction * n)
    if size == 0:
        raise ConfigurationError(f"sampling {fraction} of {n} patients selects nobody")
    per_patient = [patient_metrics(p, ddi) for p in dump]
    rng = np.random.default_rng(seed)
    per_round = []
    for _ in range(rounds):
        chosen = np.sort(rng.choice(n, size=size, replace=False))
        per_round.append(aggregate([per_patient[i] for i in chosen]))
    mean = {k: fmean(r[k] for r in per_round) for k in METRICS}
    std = {k: pstdev([r[k] for r in per_round]) for k in METRICS}
    excluded = sum(1 for p in dump for v in p.visits if not v.truth)
    return MetricsReport(rounds, fraction, size, seed, per_round, mean, std, excluded)


def visit_breakdown(dump: Sequence[PatientPrediction], ddi: np.ndarray, max_visit: int = 5) -> list[dict]:
    """Metrics over all k-th visits, for k = 1..max_visit."""
    rows = []
    for k in range(1, max_visit + 1):
        visits = [p.visits[k - 1] for p in dump if len(p.visits) >= k]
        row: dict = {"visit": k, "count": len(visits)}
        if visits:
            row["jaccard"] = fmean(visit_jaccard(v.truth, v.predicted) for v in visits)
            row["f1"] = fmean(visit_f1(v.truth, v.predicted) for v in visits)
            aps = []
            for v in visits:
                labels = np.zeros(len(v.probabilities), dtype=bool)
                labels[list(v.truth)] = True
                ap = visit_average_precision(labels, v.probabilities)
                if ap is not None:
                    aps.append(ap)
            row["prauc"] = fmean(aps) if aps else None
            row["ddi_rate"] = fmean(visit_ddi_rate(v.predicted, ddi) for v in visits)
            row["avg_drugs"] = fmean(len(v.predicted) for v in visits)
        else:
            row.update({name: None for name in METRICS})
        rows.append(row)
    return rows


# -- prediction dumps -------------------------------------------------------


def predict_dump(model, patients) -> list[PatientPrediction]:
    out = []
    for patient in patients:
        probs = model.predict(patient)
        visits = tuple(
            VisitPrediction(probs[t].copy(), infer_medications(probs[t]), v.medications)
            for t, v in enumerate(patient.visits)
        )
        out.append(PatientPrediction(patient.patient_id, visits))
    return out


def write_dump(path, dump: Sequence[PatientPrediction]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in dump:
            for t, v in enumerate(p.visits, start=1):
                fh.write(json.dumps({
                    "patient_id": p.patient_id,
                    "visit_index": t,
                    "probabilities": [float(x) for x in v.probabilities],
                    "predicted": list(v.predicted),
                    "truth": list(v.truth),
                }, separators=(",", ":")) + "\n")


def read_dump(path) -> list[PatientPrediction]:
    path = Path(path)
    grouped: dict[str, list[tuple[int, VisitPrediction]]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                rec = json.loads(line)
                visit = VisitPrediction(
                    np.asarray(rec["probabilities"], dtype=np.float64),
                    tuple(int(i) for i in rec["predicted"]),
                    tuple(int(i) for i in rec["truth"]),
                )
                key, index = str(rec["patient_id"]), int(rec["visit_index"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestionError(f"malformed prediction record ({exc})", where) from None
            width = len(visit.probabilities)
            if any(not 0 <= i < width for i in visit.predicted + visit.truth):
                raise IngestionError("index outside probability vector", where)
            grouped.setdefault(key, []).append((index, visit))
    return [
        PatientPrediction(pid, tuple(v for _, v in sorted(visits, key=lambda x: x[0])))
        for pid, visits in grouped.items()
    ]
