"""
Report emission: CSV reports, balance certificates, SVG histograms and
ASCII summary tables.

Only the first comment line of a report carries a timestamp and runtime;
everything below it is a deterministic function of the records.
"""

import csv
import io
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from errors import MalformedFileError  # noqa: E402
from models import CheckRecord, VerificationReport  # noqa: E402
from services.measure_io import atomic_write_text, format_float  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REPORT_COLUMNS = ["check_id", "seed", "passed", "value", "tolerance", "detail"]


def report_body(report: VerificationReport) -> str:
    """Deterministic CSV body (header and sorted records)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in report.sorted_records():
        writer.writerow([
            r.check_id,
            r.seed,
            "true" if r.passed else "false",
            format_float(r.value),
            format_float(r.tolerance),
            r.detail,
        ])
    return buffer.getvalue()


def write_report_csv(report: VerificationReport, path: PathLike) -> None:
    generated_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    header = f"# campaign={report.campaign} generated_at={generated_at} runtime_s={report.runtime_s:.3f}\n"
    atomic_write_text(path, header + report_body(report))
    logger.info(f"Report written to {path} ({report.passed_count} passed, {report.failed_count} failed)")


def read_report_csv(path: PathLike) -> VerificationReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise MalformedFileError(f"cannot read report {path}: {e}")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise MalformedFileError(f"{path}: missing report header line")
    meta: Dict[str, str] = dict(item.split("=", 1) for item in lines[0][2:].split() if "=" in item)

    reader = csv.DictReader(io.StringIO("\n".join(lines[1:])))
    if reader.fieldnames != REPORT_COLUMNS:
        raise MalformedFileError(f"{path}: unexpected columns {reader.fieldnames}")
    records = []
    for row in reader:
        try:
            records.append(CheckRecord(
                check_id=row["check_id"],
                seed=int(row["seed"]),
                passed=row["passed"] == "true",
                value=float(row["value"]),
                tolerance=float(row["tolerance"]),
                detail=row["detail"] or "",
            ))
        except (TypeError, ValueError) as e:
            raise MalformedFileError(f"{path}: bad record {row}: {e}")
    return VerificationReport(
        campaign=meta.get("campaign", Path(path).stem),
        records=records,
        runtime_s=float(meta.get("runtime_s", 0.0)),
    )


def write_certificate_csv(residuals: Sequence[Dict[str, object]], path: PathLike) -> None:
    """Per-target residual table of a balance check."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["target_kind", "target_id", "expected", "received", "residual"])
    for row in residuals:
        writer.writerow([
            row["target_kind"],
            row["target_id"],
            format_float(row["expected"]),
            format_float(row["received"]),
            format_float(row["residual"]),
        ])
    atomic_write_text(path, buffer.getvalue())


def write_histogram_svg(values: Sequence[float], path: PathLike, title: str, xlabel: str = "value") -> None:
    """Static SVG histogram; output bytes depend only on the values."""
    plt.rcParams["svg.hashsalt"] = "factorlab"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(values), bins=min(30, max(1, len(values))), color="#4c72b0", edgecolor="white")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    fig.tight_layout()
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_text(path, buffer.getvalue())


def format_table(columns: List[str], rows: List[Dict[str, object]], max_width: int = 60) -> str:
    """ASCII table of the given columns."""
    if not rows:
        return "No results"

    col_widths = {col: min(max(len(col), 8), max_width) for col in columns}
    for row in rows:
        for col in columns:
            col_widths[col] = min(max(col_widths[col], len(str(row.get(col, "")))), max_width)

    separator = "+" + "+".join("-" * (col_widths[col] + 2) for col in columns) + "+"
    lines = [separator, "|" + "|".join(f" {col:<{col_widths[col]}} " for col in columns) + "|", separator]
    for row in rows:
        values = []
        for col in columns:
            value = str(row.get(col, ""))
            if len(value) > max_width:
                value = value[:max_width - 3] + "..."
            values.append(f" {value:<{col_widths[col]}} ")
        lines.append("|" + "|".join(values) + "|")
    lines.append(separator)
    return "\n".join(lines)


def summary_table(reports: Sequence[VerificationReport]) -> str:
    """One line per check id: counts and worst value."""
    rows = []
    for report in reports:
        by_check: Dict[str, List[CheckRecord]] = {}
        for r in report.sorted_records():
            by_check.setdefault(r.check_id, []).append(r)
        for check_id, records in by_check.items():
            failed = sum(1 for r in records if not r.passed)
            rows.append({
                "campaign": report.campaign,
                "check": check_id,
                "passed": len(records) - failed,
                "failed": failed,
                "worst": format(max(r.value for r in records), ".3g"),
            })
    table = format_table(["campaign", "check", "passed", "failed", "worst"], rows)
    total_failed = sum(r.failed_count for r in reports)
    return f"{table}\nTotal checks: {sum(len(r.records) for r in reports)}, failed: {total_failed}"
