"""
CSV and structured-text report writers.

CSV files use ',' separators, '.' decimals and LF endings; floats are written
with 17 significant digits so that every value round-trips exactly.
"""

import csv
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from pydantic import BaseModel

from src.db.event_log import fmt
from src.db.models import EssReport, ScalingFit, TuningCertificate

PathLike = Union[str, Path]

ESS_COLUMNS = ["function", "d", "policy", "replicate", "n_events", "ess", "events_per_ess"]
TRACE_COLUMNS = ["replicate", "t", "d2"]
SUMMARY_COLUMNS = ["t", "mean_d2", "se"]
WEAK_LIMIT_COLUMNS = ["d", "distance", "se", "p_value", "hamiltonian_rms"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return fmt(value)
    return str(value)


def write_csv(out: PathLike, columns: Sequence[str], rows: Iterable[Sequence]) -> int:
    """Write rows under a header line; returns the number of data rows."""
    count = 0
    with open(out, "w", encoding="ascii", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
            count += 1
    return count


def read_csv(source: PathLike) -> List[dict]:
    with open(source, "r", encoding="ascii", newline="") as handle:
        return list(csv.DictReader(handle))


def write_ess_reports(out: PathLike, reports: Sequence[EssReport]) -> int:
    return write_csv(out, ESS_COLUMNS, (
        (r.function_id, r.d, r.lambda_ref_policy, r.replicate, r.n_events, float(r.ess), float(r.events_per_ess))
        for r in reports
    ))


def write_coupling_traces(out: PathLike, traces) -> int:
    return write_csv(out, TRACE_COLUMNS, (
        (i, float(t), float(d2)) for i, trace in enumerate(traces) for t, d2 in zip(trace.times, trace.d2)
    ))


def write_ensemble_summary(out: PathLike, summary) -> int:
    return write_csv(out, SUMMARY_COLUMNS, (
        (float(t), float(m), float(s)) for t, m, s in zip(summary.times, summary.mean_d2, summary.se)
    ))


def write_weak_limit(out: PathLike, points) -> int:
    return write_csv(out, WEAK_LIMIT_COLUMNS, (
        (p.d, p.distance, p.se, p.p_value, p.hamiltonian_rms) for p in points
    ))


def write_record(out: PathLike, record: BaseModel) -> None:
    """Structured-text (JSON) record of a certificate or scaling fit."""
    Path(out).write_text(record.model_dump_json(indent=2) + "\n", encoding="ascii")


def read_certificate(source: PathLike) -> TuningCertificate:
    return TuningCertificate.model_validate_json(Path(source).read_text(encoding="ascii"))


def read_scaling_fit(source: PathLike) -> ScalingFit:
    return ScalingFit.model_validate_json(Path(source).read_text(encoding="ascii"))


def format_summary(value: Optional[float]) -> str:
    """Six significant digits for human-facing summaries."""
    return "nan" if value is None else "%.6g" % value
