"""Per-step attention trace files and their per-phase summary.

Trace CSV columns: ``step,alpha_pc,alpha_tac,force_norm,phase``.  Policies
without attention write ``NA`` in both weight columns.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HEADER = ("step", "alpha_pc", "alpha_tac", "force_norm", "phase")
MISSING = "NA"
CONTACT_PHASES = ("PRESS", "FLIP")


@dataclass
class TraceRecord:
    step: int
    alpha_pc: float | None
    alpha_tac: float | None
    force_norm: float
    phase: str


def _fmt(x: float | None) -> str:
    return MISSING if x is None else repr(float(x))


def write_trace(path, records: Iterable[TraceRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow([r.step, _fmt(r.alpha_pc), _fmt(r.alpha_tac), repr(float(r.force_norm)), r.phase])


def _parse(x: str) -> float | None:
    return None if x == MISSING else float(x)


def read_trace(path) -> list[TraceRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != HEADER:
        raise ValueError(f"{path}: unexpected trace header {rows[0] if rows else None}")
    return [TraceRecord(int(r[0]), _parse(r[1]), _parse(r[2]), float(r[3]), r[4]) for r in rows[1:]]


def phase_summary(traces: Sequence[Sequence[TraceRecord]]) -> dict:
    """Mean alpha_tac per phase over all records, plus the REACH -> contact delta.

    ``contact`` pools the PRESS and FLIP phases.  Means are None where a
    phase never occurs or the traces carry no weights.
    """
    buckets: dict[str, list[float]] = {}
    all_tac: list[float] = []
    for trace in traces:
        for r in trace:
            if r.alpha_tac is None:
                continue
            buckets.setdefault(r.phase, []).append(r.alpha_tac)
            all_tac.append(r.alpha_tac)
    per_phase = {p: float(np.mean(v)) for p, v in sorted(buckets.items())}
    counts = {p: len(v) for p, v in sorted(buckets.items())}
    contact = [a for p in CONTACT_PHASES for a in buckets.get(p, [])]
    reach = per_phase.get("REACH")
    contact_mean = float(np.mean(contact)) if contact else None
    flip = per_phase.get("FLIP")
    return {
        "mean_alpha_tac": per_phase,
        "counts": counts,
        "overall_alpha_tac": float(np.mean(all_tac)) if all_tac else None,
        "contact_alpha_tac": contact_mean,
        "reach_to_flip_delta": None if reach is None or flip is None else flip - reach,
        "reach_to_contact_delta": None if reach is None or contact_mean is None else contact_mean - reach,
    }


def load_traces(directory) -> list[list[TraceRecord]]:
    paths = sorted(Path(directory).glob("*.csv"))
    return [read_trace(p) for p in paths]


def write_summary_csv(path, summary: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("phase", "count", "mean_alpha_tac"))
        for phase, mean in summary["mean_alpha_tac"].items():
            w.writerow((phase, summary["counts"][phase], repr(mean) if not math.isnan(mean) else MISSING))
