"""Clinician adjudication round-trip: emit forms, apply decisions, track impact.

Forms are plain CSV with a fixed 23-column layout (four sections: reference
aggregates, quality judgments, decisions, free-text comments). Applying a
filled form drives the element state machine:

    pending -> fit_for_use | needs_rework | excluded
    needs_rework -> pending (on rework, bounded by max rounds)
    excluded is terminal

Bound decisions become bound_filter rule stubs for the next transform pass.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from .model import DqaError, ElementRegistry
from .timeutil import iso_utc

FORM_COLUMNS = [
    "element",
    "category",
    "n_total",
    "pct_patients",
    "mean",
    "sd",
    "reference_unit",
    "ref_mean",
    "ref_sd",
    "ref_source",
    "sufficiently_complete",
    "completeness_notes",
    "sufficiently_conformant",
    "conformance_notes",
    "sufficiently_plausible",
    "plausibility_notes",
    "include",
    "transform",
    "exclude_values",
    "values_excluded",
    "lower_bound",
    "upper_bound",
    "comments",
]

_YN_COLUMNS = (
    "sufficiently_complete",
    "sufficiently_conformant",
    "sufficiently_plausible",
    "include",
    "transform",
    "exclude_values",
)

DEFAULT_MAX_REWORK_ROUNDS = 3


class FormError(DqaError):
    """Adjudication form fails its invariants (fatal, with row number)."""


@dataclass
class AdjudicationRound:
    round_number: int
    timestamp: str
    outcomes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round_number": self.round_number,
            "timestamp": self.timestamp,
            "outcomes": dict(sorted(self.outcomes.items())),
        }


@dataclass
class ProjectState:
    """Per-project adjudication state, persisted as a JSON file."""

    project_name: str
    elements: dict[str, dict] = field(default_factory=dict)
    rounds: list[dict] = field(default_factory=list)

    def ensure_elements(self, registry: ElementRegistry) -> None:
        for element in registry:
            entry = self.elements.setdefault(element.name, {"status": element.status})
            element.status = entry["status"]

    def set_status(self, name: str, status: str, **extra) -> None:
        entry = self.elements.setdefault(name, {})
        entry["status"] = status
        entry.update(extra)


def load_state(path: str | Path) -> ProjectState:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return ProjectState(
        project_name=data["project_name"],
        elements=data.get("elements", {}),
        rounds=data.get("rounds", []),
    )


def save_state(state: ProjectState, path: str | Path) -> None:
    doc = {
        "project_name": state.project_name,
        "elements": {k: state.elements[k] for k in sorted(state.elements)},
        "rounds": state.rounds,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_reference_aggregates(path: str | Path) -> dict[str, dict]:
    """Reference aggregates CSV: element,ref_mean,ref_sd,ref_source."""
    refs: dict[str, dict] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["element", "ref_mean", "ref_sd", "ref_source"]
        if reader.fieldnames != expected:
            raise FormError(f"{path}: expected header {','.join(expected)}")
        for row in reader:
            refs[row["element"]] = {
                "ref_mean": row["ref_mean"],
                "ref_sd": row["ref_sd"],
                "ref_source": row["ref_source"],
            }
    return refs


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def emit_form(registry: ElementRegistry, results, reference: dict | None = None) -> list[dict]:
    """One form row per pending element, section 1 prefilled, sections 2-4 blank.

    Section-1 aggregates come from the element's check results (total count,
    patient proportion, mean/sd off the decile check) plus the optional
    reference aggregates table. An element without check results is fatal.
    """
    reference = reference or {}
    by_id = {r.check_id: r for r in results}
    rows = []
    for element in registry:
        if element.status != "pending":
            continue
        total = by_id.get(f"{element.name}:total_count")
        proportion = by_id.get(f"{element.name}:patient_proportion")
        if total is None or proportion is None:
            raise FormError(f"element {element.name} missing check results")
        decile = by_id.get(f"{element.name}:value_deciles")
        mean = decile.payload.get("mean") if decile else None
        sd = decile.payload.get("sd") if decile else None
        ref = reference.get(element.name, {})
        row = {col: "" for col in FORM_COLUMNS}
        row.update(
            {
                "element": element.name,
                "category": element.category.value,
                "n_total": _fmt(total.payload["count"]),
                "pct_patients": _fmt(proportion.payload["proportion"] * 100),
                "mean": _fmt(mean),
                "sd": _fmt(sd),
                "reference_unit": element.reference_unit or "",
                "ref_mean": ref.get("ref_mean", ""),
                "ref_sd": ref.get("ref_sd", ""),
                "ref_source": ref.get("ref_source", ""),
            }
        )
        rows.append(row)
    return rows


def write_form_csv(rows, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, FORM_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_form_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FORM_COLUMNS:
            raise FormError(f"{path}: form header does not match the expected column set")
        return list(reader)


def _parse_yn(row_no: int, column: str, raw: str) -> bool:
    if raw in ("Y", "y"):
        return True
    if raw in ("N", "n"):
        return False
    raise FormError(f"row {row_no}: column {column} must be Y or N, got {raw!r}")


def _parse_bound(row_no: int, column: str, raw: str) -> float | None:
    if raw == "":
        return None
    try:
        return float(raw)
    except ValueError:
        raise FormError(f"row {row_no}: column {column} must be numeric, got {raw!r}") from None


def apply_form(
    rows,
    registry: ElementRegistry,
    state: ProjectState,
    now: datetime,
) -> tuple[AdjudicationRound, list[dict]]:
    """Apply a filled adjudication form; returns the round plus rule stubs.

    Outcomes follow the round invariants: include=N excludes the element;
    include=Y with all section-2 answers Y and no pending transform work is
    fit_for_use; anything else needs rework. Rows carrying bounds or an
    exclude-values decision yield bound_filter stubs for the next transform
    pass (stubs without machine-usable bounds are marked "todo").
    """
    round_number = len(state.rounds) + 1
    outcomes: dict[str, str] = {}
    stubs: list[dict] = []

    for idx, row in enumerate(rows, start=2):
        name = row.get("element", "")
        element = registry.get(name)
        if element is None:
            raise FormError(f"row {idx}: unknown element {name!r}")
        if element.status != "pending":
            raise FormError(f"row {idx}: element {name} is not pending (status {element.status})")
        answers = {col: _parse_yn(idx, col, row.get(col, "")) for col in _YN_COLUMNS}
        lower = _parse_bound(idx, "lower_bound", row.get("lower_bound", ""))
        upper = _parse_bound(idx, "upper_bound", row.get("upper_bound", ""))
        if lower is not None and upper is not None and lower >= upper:
            raise FormError(f"row {idx}: lower_bound must be below upper_bound")

        section2_ok = (
            answers["sufficiently_complete"]
            and answers["sufficiently_conformant"]
            and answers["sufficiently_plausible"]
        )
        pending_transform = (
            answers["transform"]
            or answers["exclude_values"]
            or lower is not None
            or upper is not None
        )

        if not answers["include"]:
            outcome = "excluded"
        elif section2_ok and not pending_transform:
            outcome = "fit_for_use"
        else:
            outcome = "needs_rework"
        outcomes[name] = outcome

        extra = {}
        if answers["transform"] or answers["exclude_values"]:
            extra["transformed"] = True
        if outcome == "excluded":
            extra["exclude_reason"] = "adjudicated_exclude"
        element.status = outcome
        state.set_status(name, outcome, **extra)

        if answers["exclude_values"] or lower is not None or upper is not None:
            stub = {
                "rule_id": f"adjudication_r{round_number}_{name}",
                "kind": "bound_filter",
                "target": name,
                "params": {},
            }
            if lower is not None:
                stub["params"]["lower"] = lower
            if upper is not None:
                stub["params"]["upper"] = upper
            if row.get("values_excluded"):
                stub["params"]["values_excluded"] = row["values_excluded"]
            if lower is None and upper is None:
                stub["todo"] = True  # free-text exclusion needs a human to set bounds
            stubs.append(stub)

    record = AdjudicationRound(round_number, iso_utc(now), outcomes)
    state.rounds.append(record.to_dict())
    return record, stubs


def write_rule_stubs(stubs, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stubs, fh, indent=2, sort_keys=True)
        fh.write("\n")


def reset_for_rework(
    registry: ElementRegistry,
    state: ProjectState,
    max_rounds: int = DEFAULT_MAX_REWORK_ROUNDS,
) -> dict[str, str]:
    """Move needs_rework elements back to pending for the next round.

    Elements that already consumed ``max_rounds`` rework rounds are excluded
    with a logged reason instead of cycling forever.
    """
    changes: dict[str, str] = {}
    for element in registry:
        if element.status != "needs_rework":
            continue
        entry = state.elements.setdefault(element.name, {})
        done = entry.get("rework_rounds", 0) + 1
        if done > max_rounds:
            element.status = "excluded"
            state.set_status(element.name, "excluded", exclude_reason="max_rework_rounds")
            changes[element.name] = "excluded"
        else:
            element.status = "pending"
            entry["rework_rounds"] = done
            state.set_status(element.name, "pending")
            changes[element.name] = "pending"
    return changes


def status_accounting(registry: ElementRegistry) -> dict[str, int]:
    counts = {status: 0 for status in ("pending", "fit_for_use", "needs_rework", "excluded")}
    for element in registry:
        counts[element.status] += 1
    return counts


def summarize_impact(
    state: ProjectState,
    groupers_used: int = 0,
    checks_by_kind: dict | None = None,
    reports_generated: int = 0,
    people_notes: str = "",
) -> dict:
    """Impact summary in the per-project result-table shape.

    Counts groupers, checks by kind, reports, elements transformed and
    excluded, and completed adjudication rounds; personnel information passes
    through as free text.
    """
    transformed = sorted(
        name for name, entry in state.elements.items() if entry.get("transformed")
    )
    excluded = sorted(
        name for name, entry in state.elements.items() if entry.get("status") == "excluded"
    )
    checks = dict(checks_by_kind or {})
    checks.setdefault("total", sum(v for k, v in checks.items() if k != "total"))
    return {
        "project_name": state.project_name,
        "groupers_used": groupers_used,
        "checks_run": checks,
        "reports_generated": reports_generated,
        "elements_transformed": len(transformed),
        "transformed_elements": transformed,
        "elements_excluded": len(excluded),
        "excluded_elements": excluded,
        "rounds_completed": len(state.rounds),
        "people_notes": people_notes,
    }


def render_impact_text(summary: dict) -> str:
    """Plain-text impact table, one labelled row per metric."""
    checks = summary["checks_run"]
    lines = [
        f"Project:               {summary['project_name']}",
        f"Groupers used:         {summary['groupers_used']}",
        f"Checks run:            {checks.get('total', 0)}",
        f"  completeness:        {checks.get('completeness', 0)}",
        f"  conformance:         {checks.get('conformance', 0)}",
        f"  plausibility:        {checks.get('plausibility', 0)}",
        f"Reports generated:     {summary['reports_generated']}",
        f"Elements transformed:  {summary['elements_transformed']}",
        f"Elements excluded:     {summary['elements_excluded']}",
        f"Adjudication rounds:   {summary['rounds_completed']}",
        f"Personnel:             {summary['people_notes']}",
    ]
    return "\n".join(lines) + "\n"
