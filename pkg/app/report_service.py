import csv
import hashlib
import io
import json
import logging
import os
from typing import Dict, Iterable, List

from .constants import CSV_COLUMNS, REPORT_FILES
from .models import Report, ReportRecord

logger = logging.getLogger(__name__)

FORMATS = ("json", "csv")


def _record_line(record: ReportRecord) -> str:
    return json.dumps(record.model_dump(mode="json"), sort_keys=True)


def _csv_text(records: Iterable[ReportRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for record in records:
        row = record.model_dump(mode="json")
        writer.writerow([
            json.dumps(row[column], sort_keys=True) if column in ("parameters", "extra") else ("" if row[column] is None else row[column])
            for column in CSV_COLUMNS
        ])
    return buffer.getvalue()


def _write(path: str, text: str) -> Dict[str, object]:
    data = text.encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(data)
    return {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}


def emit_report(report: Report, out_dir: str, formats: Iterable[str] = FORMATS) -> List[str]:
    """
    Writes the report under out_dir: JSON lines per record plus a summary, a CSV
    for plotting, and a manifest of sha256 digests. Output bytes depend only on
    the report. IO errors propagate unchanged.
    """
    formats = tuple(formats)
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ValueError(f"unknown report format(s) {unknown}, expected some of {FORMATS}")

    os.makedirs(out_dir, exist_ok=True)
    manifest: Dict[str, Dict[str, object]] = {}

    if "json" in formats:
        lines = "".join(_record_line(r) + "\n" for r in report.records)
        manifest[REPORT_FILES["records"]] = _write(os.path.join(out_dir, REPORT_FILES["records"]), lines)
        summary = report.model_dump(mode="json", exclude={"records"})
        manifest[REPORT_FILES["summary"]] = _write(
            os.path.join(out_dir, REPORT_FILES["summary"]), json.dumps(summary, sort_keys=True, indent=2) + "\n"
        )
    if "csv" in formats:
        manifest[REPORT_FILES["csv"]] = _write(os.path.join(out_dir, REPORT_FILES["csv"]), _csv_text(report.records))

    _write(os.path.join(out_dir, REPORT_FILES["manifest"]), json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    written = sorted(manifest) + [REPORT_FILES["manifest"]]
    logger.info(f"Wrote {len(report.records)} record(s) for '{report.kind}' to {out_dir}: {', '.join(written)}.")
    return [os.path.join(out_dir, name) for name in written]


def load_report(out_dir: str) -> Report:
    """Parses the JSON outputs of emit_report back into a Report."""
    with open(os.path.join(out_dir, REPORT_FILES["summary"]), encoding="utf-8") as handle:
        summary = json.load(handle)
    with open(os.path.join(out_dir, REPORT_FILES["records"]), encoding="utf-8") as handle:
        records = [json.loads(line) for line in handle if line.strip()]
    return Report.model_validate({**summary, "records": records})
