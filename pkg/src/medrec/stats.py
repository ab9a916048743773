"""Dataset statistics: visit-count histogram and medication-history overlap."""

from __future__ import annotations

from collections import Counter, defaultdict
from statistics import fmean
from typing import Sequence

from .data import PatientRecord
from .errors import ContractViolation


def _jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def dataset_stats(records: Sequence[PatientRecord], ddi=None) -> dict:
    """Summary, visit-count histogram, history Jaccard, and windowed overlap.

    ``history_jaccard`` compares each visit's medications (t >= 2) with the
    union of all earlier medications.  ``windows`` holds, per visit index t
    and window size w < t, the mean overlap rate ``|M_t & H| / |M_t|`` and
    Jaccard against ``H``, the union of the w preceding visits.
    """
    if not records:
        raise ContractViolation("statistics need at least one patient")
    lengths = [len(p) for p in records]
    visits = [v for p in records for v in p.visits]
    histogram = dict(sorted(Counter(lengths).items()))

    history = []
    cells: dict[tuple[int, int], list[tuple[float, float]]] = defaultdict(list)
    for p in records:
        meds = [set(v.medications) for v in p.visits]
        for t in range(1, len(meds)):
            current = meds[t]
            seen = set().union(*meds[:t])
            history.append(_jaccard(current, seen))
            for w in range(1, t + 1):
                window = set().union(*meds[t - w:t])
                overlap = len(current & window) / len(current) if current else 0.0
                cells[(t + 1, w)].append((overlap, _jaccard(current, window)))

    summary = {
        "patients": len(records),
        "visits": len(visits),
        "avg_visits": fmean(lengths),
        "max_visits": max(lengths),
        "avg_diagnoses": fmean(len(v.diagnoses) for v in visits),
        "max_diagnoses": max(len(v.diagnoses) for v in visits),
        "avg_procedures": fmean(len(v.procedures) for v in visits),
        "max_procedures": max(len(v.procedures) for v in visits),
        "avg_medications": fmean(len(v.medications) for v in visits),
        "max_medications": max(len(v.medications) for v in visits),
    }
    if ddi is not None:
        summary["ddi_pairs"] = int(ddi.sum() // 2)

    jaccard_hist = Counter(min(int(j * 10), 9) for j in history)
    return {
        "summary": summary,
        "visit_count_histogram": histogram,
        "history_jaccard": history,
        "history_jaccard_mean": fmean(history) if history else None,
        "history_jaccard_histogram": {f"{b / 10:.1f}-{(b + 1) / 10:.1f}": jaccard_hist.get(b, 0)
                                      for b in range(10)},
        "windows": [
            {"visit": t, "window": w, "count": len(vals),
             "overlap_rate": fmean(o for o, _ in vals),
             "jaccard": fmean(j for _, j in vals)}
            for (t, w), vals in sorted(cells.items())
        ],
    }


def format_stats(report: dict) -> str:
    s = report["summary"]
    lines = [
        "Item                                  Size",
        f"# of visits / # of patients           {s['visits']} / {s['patients']}",
        f"avg. / max. # of visits               {s['avg_visits']:.2f} / {s['max_visits']}",
        f"avg. / max. # of diagnoses per visit  {s['avg_diagnoses']:.2f} / {s['max_diagnoses']}",
        f"avg. / max. # of procedure per visit  {s['avg_procedures']:.2f} / {s['max_procedures']}",
        f"avg. / max. # of medication per visit {s['avg_medications']:.2f} / {s['max_medications']}",
    ]
    if "ddi_pairs" in s:
        lines.append(f"total # of DDI pairs                  {s['ddi_pairs']}")
    lines += ["", "visits  patients"]
    lines += [f"{k:>6}  {v}" for k, v in report["visit_count_histogram"].items()]
    lines += ["", "history jaccard  visits"]
    lines += [f"{k:>15}  {v}" for k, v in report["history_jaccard_histogram"].items()]
    lines += ["", "visit  window  count  overlap  jaccard"]
    lines += [f"{c['visit']:>5}  {c['window']:>6}  {c['count']:>5}  {c['overlap_rate']:.4f}   {c['jaccard']:.4f}"
              for c in report["windows"]]
    return "\n".join(lines)
