"""Observation CSV ingestion and grouper-building metadata curation.

Ingestion is lossless-or-logged: every input row is either stored or written
to a reject file with a reason. Timestamps are normalized to UTC at ingest
because UTC conversion is universal across elements.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from . import timeutil
from .model import (
    MISSING,
    REQUIRED_TIMESTAMP,
    CohortManifest,
    DqaError,
    ElementCategory,
    ObservationRecord,
    ObservationStore,
)
from .stats import mean_sd, parse_numeric, top_k

EXPECTED_COLUMNS = [
    "patient_id",
    "encounter_id",
    "category",
    "source_id",
    "source_name",
    "value_raw",
    "unit_raw",
    "specimen_source",
    "mar_action",
    "route",
    "order_time",
    "collection_time",
    "result_time",
    "measurement_time",
    "administration_time",
    "ed_arrival_time",
    "admission_time",
    "discharge_time",
]

TS_COLUMNS = {
    "order_time": "order",
    "collection_time": "collection",
    "result_time": "result",
    "measurement_time": "measurement",
    "administration_time": "administration",
    "ed_arrival_time": "ed_arrival",
    "admission_time": "admission",
    "discharge_time": "discharge",
}

_CATEGORY_TOKENS = {c.value for c in ElementCategory}


class IngestError(DqaError):
    """Fatal ingestion problem (malformed header, unusable file)."""


@dataclass(frozen=True)
class RejectRow:
    file: str
    line_no: int
    reason: str
    raw_line: str


@dataclass
class IngestResult:
    store: ObservationStore
    rejects: list[RejectRow] = field(default_factory=list)
    warnings: list[RejectRow] = field(default_factory=list)
    per_file: dict[str, dict[str, int]] = field(default_factory=dict)


def _parse_csv_line(line: str) -> list[str]:
    return next(csv.reader(io.StringIO(line)))


def ingest_observations(
    files,
    manifest: CohortManifest,
    site_tz: str = "UTC",
    reject_path: str | Path | None = None,
    warning_path: str | Path | None = None,
) -> IngestResult:
    """Parse observation CSV files into a sealed store.

    Rows for patients outside the manifest are rejected with reason
    "not_in_cohort"; encounter rows dated outside the cohort window are
    rejected with "outside_cohort_window". A malformed header is fatal;
    malformed rows are rejected, never fatal.
    """
    records: list[ObservationRecord] = []
    rejects: list[RejectRow] = []
    warnings: list[RejectRow] = []
    per_file: dict[str, dict[str, int]] = {}

    for path in files:
        path = Path(path)
        stem = path.stem
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise IngestError(f"{path}: empty file, missing header")
        header = _parse_csv_line(lines[0])
        if header != EXPECTED_COLUMNS:
            raise IngestError(f"{path}: malformed header {header!r}")

        stored = rejected = 0
        for idx, raw_line in enumerate(lines[1:], start=2):
            if not raw_line.strip():
                continue
            outcome = _parse_row(raw_line, idx, stem, manifest, site_tz, warnings, path.name)
            if isinstance(outcome, RejectRow):
                rejects.append(outcome)
                rejected += 1
            else:
                records.append(outcome)
                stored += 1
        per_file[str(path)] = {"stored": stored, "rejected": rejected, "total": stored + rejected}

    if reject_path is not None:
        _append_log_csv(reject_path, rejects)
    if warning_path is not None:
        _append_log_csv(warning_path, warnings)
    return IngestResult(ObservationStore(tuple(records)), rejects, warnings, per_file)


def _parse_row(raw_line, line_no, stem, manifest, site_tz, warnings, file_name):
    def reject(reason: str) -> RejectRow:
        return RejectRow(file_name, line_no, reason, raw_line)

    try:
        fields = _parse_csv_line(raw_line)
    except (csv.Error, StopIteration):
        return reject("malformed_row")
    if len(fields) != len(EXPECTED_COLUMNS):
        return reject("malformed_row")
    row = dict(zip(EXPECTED_COLUMNS, fields))

    if not row["patient_id"]:
        return reject("missing_patient_id")
    if row["category"] not in _CATEGORY_TOKENS:
        return reject("unknown_category")
    category = ElementCategory(row["category"])
    if row["patient_id"] not in manifest.patient_ids:
        return reject("not_in_cohort")

    timestamps = {}
    for column, role in TS_COLUMNS.items():
        text = row[column]
        if not text:
            continue
        try:
            instant, warning = timeutil.parse_instant(text, site_tz)
        except timeutil.TimestampError:
            return reject(f"unparseable_timestamp:{column}")
        if warning:
            warnings.append(RejectRow(file_name, line_no, f"{warning}:{column}", raw_line))
        timestamps[role] = instant

    required = REQUIRED_TIMESTAMP.get(category)
    if required and not any(role in timestamps for role in required):
        return reject("missing_required_timestamp")

    if category == ElementCategory.ENCOUNTER:
        anchor = timestamps.get("admission") or timestamps.get("ed_arrival")
        if not (manifest.start_date <= anchor.date() <= manifest.end_date):
            return reject("outside_cohort_window")

    return ObservationRecord(
        locator=f"{stem}:{line_no}",
        patient_id=row["patient_id"],
        encounter_id=row["encounter_id"] or None,
        category=category,
        source_id=row["source_id"],
        source_name=row["source_name"],
        value_raw=row["value_raw"],
        unit_raw=row["unit_raw"] or None,
        specimen_source=row["specimen_source"] or None,
        mar_action=row["mar_action"] or None,
        route=row["route"] or None,
        timestamps=timestamps,
    )


def _append_log_csv(path, rows: list[RejectRow]) -> None:
    """Append-only audit log with columns (line_no, reason, raw_line)."""
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new_file:
            writer.writerow(["line_no", "reason", "raw_line"])
        for row in rows:
            writer.writerow([row.line_no, row.reason, row.raw_line])


# --- metadata curation -------------------------------------------------------

METADATA_CATEGORIES = (
    ElementCategory.ANALYTE,
    ElementCategory.MEDICATION,
    ElementCategory.FLOWSHEET,
)

METADATA_COLUMNS = {
    ElementCategory.ANALYTE: [
        "source_id",
        "source_names",
        "count",
        "numeric_count",
        "numeric_mean",
        "top_specimen_sources",
        "top_units",
        "normal_lower",
        "normal_upper",
    ],
    ElementCategory.MEDICATION: [
        "source_id",
        "mar_names",
        "count",
        "top_mar_actions",
        "top_routes",
        "top_dose_values",
        "top_dose_units",
    ],
    ElementCategory.FLOWSHEET: [
        "source_id",
        "source_names",
        "count",
        "display_name",
        "value_type",
        "top_values",
    ],
}


@dataclass
class MetadataTable:
    """Per-source-id statistics used by humans when building groupers."""

    category: ElementCategory
    rows: list[dict]

    @property
    def columns(self) -> list[str]:
        return METADATA_COLUMNS[self.category]


def curate_metadata(store: ObservationStore, category: ElementCategory, k: int = 10) -> MetadataTable:
    """Build the grouper-curation table for one category.

    Supported categories: analyte, medication, flowsheet. Top-k lists are
    sorted by count descending with lexicographic tie-breaks.
    """
    if category not in METADATA_CATEGORIES:
        raise IngestError(f"no metadata schema for category {category.value!r}")

    groups: dict[str, list] = {}
    for rec in store.records:
        if rec.category == category:
            groups.setdefault(rec.source_id, []).append(rec)

    rows = []
    for source_id in sorted(groups):
        recs = groups[source_id]
        names = "|".join(sorted({r.source_name for r in recs if r.source_name}))
        if category == ElementCategory.ANALYTE:
            numeric = [v for v in (parse_numeric(r.value_raw) for r in recs) if v is not None]
            mean, _ = mean_sd(numeric)
            rows.append(
                {
                    "source_id": source_id,
                    "source_names": names,
                    "count": len(recs),
                    "numeric_count": len(numeric),
                    "numeric_mean": mean,
                    "top_specimen_sources": top_k((r.specimen_source or "" for r in recs), k),
                    "top_units": top_k((r.unit_raw or "" for r in recs), k),
                    # The observation schema carries no reference-range fields,
                    # so normal bounds cannot be derived from the store.
                    "normal_lower": None,
                    "normal_upper": None,
                }
            )
        elif category == ElementCategory.MEDICATION:
            rows.append(
                {
                    "source_id": source_id,
                    "mar_names": names,
                    "count": len(recs),
                    "top_mar_actions": top_k((r.mar_action or "" for r in recs), k),
                    "top_routes": top_k((r.route or "" for r in recs), k),
                    "top_dose_values": top_k((r.value_raw for r in recs), k),
                    "top_dose_units": top_k((r.unit_raw or "" for r in recs), k),
                }
            )
        else:  # flowsheet
            nonempty = [r.value_raw for r in recs if r.value_raw != MISSING]
            all_numeric = bool(nonempty) and all(parse_numeric(v) is not None for v in nonempty)
            name_counts = Counter(r.source_name for r in recs if r.source_name)
            if name_counts:
                modal = max(name_counts.values())
                display = min(n for n, c in name_counts.items() if c == modal)
            else:
                display = ""
            rows.append(
                {
                    "source_id": source_id,
                    "source_names": names,
                    "count": len(recs),
                    "display_name": display,
                    "value_type": "numeric" if all_numeric else "string",
                    "top_values": top_k((r.value_raw for r in recs), k),
                }
            )
    return MetadataTable(category, rows)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, list):
        return "|".join(f"{v}:{c}" for v, c in value)
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def metadata_to_csv(table: MetadataTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_cell(row[col]) for col in table.columns])
