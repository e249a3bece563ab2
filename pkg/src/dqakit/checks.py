"""Quality check assignment and execution.

Each registered element gets a fixed battery of conformance, completeness,
and plausibility checks determined by its (category, value_kind). Checks run
atemporally (whole-cohort tables and summaries) and temporally (per UTC
calendar month series spanning the cohort window, zeros included).
Cross-element clinical-association checks compare outcome rates across a
factor split and warn when the observed direction contradicts expectation.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .model import (
    CohortManifest,
    DqaError,
    ElementRegistry,
    ObservationStore,
)
from .stats import box_stats, deciles, freq_table, mean_sd, nearest_rank_sorted, parse_numeric
from .timeutil import month_key, month_range

CHECK_KINDS = ("conformance", "completeness", "plausibility")

_COMPLETENESS = ("total_count", "patient_proportion", "per_patient_histogram")

# Check battery per (category, value_kind): 8/8/6/6/7/6/6 checks.
CHECK_MATRIX: dict[tuple[str, str], dict[str, tuple[str, ...]]] = {
    ("analyte", "numeric"): {
        "conformance": ("unit_frequency", "specimen_frequency", "value_deciles"),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_value_boxstats"),
    },
    ("analyte", "categorical"): {
        "conformance": ("unit_frequency", "specimen_frequency", "string_frequency"),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_category_lines"),
    },
    ("flowsheet", "numeric"): {
        "conformance": ("value_deciles",),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_value_boxstats"),
    },
    ("flowsheet", "categorical"): {
        "conformance": ("string_frequency",),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_category_lines"),
    },
    ("medication", "categorical"): {
        "conformance": ("mar_action_frequency", "raw_name_frequency"),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_per_patient_boxstats"),
    },
    ("encounter", "numeric"): {
        "conformance": ("value_deciles",),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_value_boxstats"),
    },
    ("encounter", "categorical"): {
        "conformance": ("string_frequency",),
        "completeness": _COMPLETENESS,
        "plausibility": ("monthly_counts", "monthly_category_lines"),
    },
}


class CheckConfigError(DqaError):
    """Element cannot be assigned checks, or the check config is invalid."""


@dataclass(frozen=True)
class CheckSpec:
    check_id: str
    element_name: str
    kind: str
    subtype: str

    def to_dict(self) -> dict:
        return {
            "check_id": self.check_id,
            "element_name": self.element_name,
            "kind": self.kind,
            "subtype": self.subtype,
        }


def spec_from_dict(data: dict) -> CheckSpec:
    return CheckSpec(data["check_id"], data["element_name"], data["kind"], data["subtype"])


@dataclass
class CheckResult:
    check_id: str
    element_name: str
    kind: str
    subtype: str
    status: str  # ok | warning | empty
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check_id": self.check_id,
            "element_name": self.element_name,
            "kind": self.kind,
            "subtype": self.subtype,
            "status": self.status,
            "payload": self.payload,
        }


def result_from_dict(data: dict) -> CheckResult:
    return CheckResult(
        data["check_id"],
        data["element_name"],
        data["kind"],
        data["subtype"],
        data["status"],
        data.get("payload", {}),
    )


def assign_checks(registry: ElementRegistry, overrides: dict | None = None) -> list[CheckSpec]:
    """Assign the standard check battery to every non-excluded element.

    ``overrides`` maps element name -> {kind: [subtypes]} for categories the
    matrix does not cover (orders, comorbidities, demographics need custom
    checks). An element with neither a matrix row nor an override is fatal.
    check_id is deterministic: "<element>:<subtype>".
    """
    overrides = overrides or {}
    specs: list[CheckSpec] = []
    seen: set[str] = set()
    for element in registry.active():
        battery = overrides.get(element.name) or CHECK_MATRIX.get(
            (element.category.value, element.value_kind)
        )
        if battery is None:
            raise CheckConfigError(
                f"no check mapping for element {element.name} "
                f"({element.category.value}/{element.value_kind}); supply overrides"
            )
        for kind in CHECK_KINDS:
            for subtype in battery.get(kind, ()):
                check_id = f"{element.name}:{subtype}"
                if check_id in seen:
                    raise CheckConfigError(f"duplicate check id {check_id}")
                seen.add(check_id)
                specs.append(CheckSpec(check_id, element.name, kind, subtype))
    return specs


def _monthly_buckets(records, months):
    by_month: dict[str, list] = {m: [] for m in months}
    out_of_range = 0
    for rec in records:
        instant = rec.primary_instant()
        if instant is None:
            out_of_range += 1
            continue
        key = month_key(instant)
        if key in by_month:
            by_month[key].append(rec)
        else:
            out_of_range += 1
    return by_month, out_of_range


def _compute_payload(subtype, records, manifest, months, histogram_cap):
    if subtype == "total_count":
        return {"count": len(records)}

    if subtype == "patient_proportion":
        numerator = len({r.patient_id for r in records})
        denominator = len(manifest.patient_ids)  # always the manifest size
        return {
            "numerator": numerator,
            "denominator": denominator,
            "proportion": numerator / denominator,
        }

    if subtype == "per_patient_histogram":
        per_patient = {pid: 0 for pid in manifest.patient_ids}
        for rec in records:
            if rec.patient_id in per_patient:
                per_patient[rec.patient_id] += 1
        labels = [str(i) for i in range(histogram_cap + 1)] + [f"{histogram_cap}+"]
        bins = {label: 0 for label in labels}
        for count in per_patient.values():
            label = str(count) if count <= histogram_cap else f"{histogram_cap}+"
            bins[label] += 1
        return {"bins": [[label, bins[label]] for label in labels]}

    if subtype == "unit_frequency":
        return {"table": freq_table(r.unit_raw or "" for r in records)}
    if subtype == "specimen_frequency":
        return {"table": freq_table(r.specimen_source or "" for r in records)}
    if subtype == "string_frequency":
        return {"table": freq_table(r.value_raw for r in records)}
    if subtype == "mar_action_frequency":
        return {"table": freq_table(r.mar_action or "" for r in records)}
    if subtype == "raw_name_frequency":
        return {"table": freq_table(r.source_name for r in records)}

    if subtype == "value_deciles":
        numeric = [v for v in (parse_numeric(r.value_raw) for r in records) if v is not None]
        mean, sd = mean_sd(numeric)
        return {"n": len(numeric), "deciles": deciles(numeric), "mean": mean, "sd": sd}

    if subtype == "monthly_counts":
        by_month, out_of_range = _monthly_buckets(records, months)
        return {
            "months": months,
            "counts": [len(by_month[m]) for m in months],
            "out_of_range": out_of_range,
        }

    if subtype == "monthly_value_boxstats":
        by_month, _ = _monthly_buckets(records, months)
        stats = []
        for m in months:
            numeric = [
                v for v in (parse_numeric(r.value_raw) for r in by_month[m]) if v is not None
            ]
            stats.append(box_stats(numeric))
        return {"months": months, "stats": stats}

    if subtype == "monthly_category_lines":
        by_month, _ = _monthly_buckets(records, months)
        totals = freq_table(r.value_raw for r in records)
        lines = []
        for value, _count in totals:
            lines.append(
                [value, [sum(1 for r in by_month[m] if r.value_raw == value) for m in months]]
            )
        return {"months": months, "lines": lines}

    if subtype == "monthly_per_patient_boxstats":
        by_month, _ = _monthly_buckets(records, months)
        stats = []
        for m in months:
            per_patient: dict[str, int] = {}
            for rec in by_month[m]:
                per_patient[rec.patient_id] = per_patient.get(rec.patient_id, 0) + 1
            # distribution over patients with >= 1 record that month
            stats.append(box_stats(list(per_patient.values())))
        return {"months": months, "stats": stats}

    raise CheckConfigError(f"unknown check subtype {subtype!r}")


def run_checks(
    store: ObservationStore,
    specs,
    manifest: CohortManifest,
    histogram_cap: int = 50,
    jobs: int = 1,
) -> list[CheckResult]:
    """Execute check specs against a sealed store.

    Pure function of its inputs: identical store + specs produce identical
    results regardless of ``jobs``. An element with zero records yields
    status "empty" for all of its results, never a crash.
    """
    months = month_range(manifest.start_date, manifest.end_date)
    by_element = store.by_element()
    by_name: dict[str, list[CheckSpec]] = {}
    for spec in specs:
        by_name.setdefault(spec.element_name, []).append(spec)

    def run_element(name: str) -> list[CheckResult]:
        records = by_element.get(name, [])
        status = "empty" if not records else "ok"
        results = []
        for spec in by_name[name]:
            payload = _compute_payload(spec.subtype, records, manifest, months, histogram_cap)
            results.append(
                CheckResult(spec.check_id, name, spec.kind, spec.subtype, status, payload)
            )
        return results

    names = sorted(by_name)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run_element, names))
    else:
        chunks = [run_element(name) for name in names]

    results = [res for chunk in chunks for res in chunk]
    results.sort(key=lambda r: (r.element_name, r.check_id))
    return results


# --- cross-element association checks ----------------------------------------------


@dataclass(frozen=True)
class AssociationSpec:
    """Expected direction of association between a factor and an outcome element."""

    factor_element: str
    outcome_element: str
    direction: str  # positive | negative
    split: str = "median"  # "median" or "threshold"
    threshold: float | None = None

    def __post_init__(self):
        if self.direction not in ("positive", "negative"):
            raise CheckConfigError(f"direction must be positive or negative, got {self.direction!r}")
        if self.split not in ("median", "threshold"):
            raise CheckConfigError(f"split must be median or threshold, got {self.split!r}")
        if self.split == "threshold" and self.threshold is None:
            raise CheckConfigError("threshold split requires a threshold value")


def run_association(
    store: ObservationStore, spec: AssociationSpec, manifest: CohortManifest
) -> CheckResult:
    """Split patients on the factor and compare outcome rates across halves.

    Factor per patient is the mean of its numeric values, or presence when no
    value parses. Status is "warning" iff the observed direction contradicts
    the expected one; equal rates are "ok". Fewer than two patients on either
    side yields "empty".
    """
    by_element = store.by_element()
    factor_records = by_element.get(spec.factor_element, [])
    outcome_patients = {r.patient_id for r in by_element.get(spec.outcome_element, [])}

    factors: dict[str, float] = {}
    values_by_patient: dict[str, list[float]] = {}
    for rec in factor_records:
        v = parse_numeric(rec.value_raw)
        if v is not None:
            values_by_patient.setdefault(rec.patient_id, []).append(v)
    for rec in factor_records:
        pid = rec.patient_id
        if pid in factors:
            continue
        vals = values_by_patient.get(pid)
        factors[pid] = (sum(vals) / len(vals)) if vals else 1.0

    check_id = f"{spec.factor_element}~{spec.outcome_element}:association"
    payload: dict = {
        "factor_element": spec.factor_element,
        "outcome_element": spec.outcome_element,
        "direction": spec.direction,
        "split": spec.split,
    }

    if spec.split == "median" and factors:
        cut = nearest_rank_sorted(sorted(factors.values()), 1, 2)
    else:
        cut = spec.threshold
    payload["split_value"] = cut

    high = [pid for pid, f in factors.items() if cut is not None and f > cut]
    low = [pid for pid, f in factors.items() if cut is not None and f <= cut]
    if len(high) < 2 or len(low) < 2:
        payload["high"] = {"n": len(high)}
        payload["low"] = {"n": len(low)}
        return CheckResult(check_id, spec.outcome_element, "plausibility", "association", "empty", payload)

    rate_high = sum(1 for pid in high if pid in outcome_patients) / len(high)
    rate_low = sum(1 for pid in low if pid in outcome_patients) / len(low)
    payload["high"] = {"n": len(high), "rate": rate_high}
    payload["low"] = {"n": len(low), "rate": rate_low}

    contradicted = (spec.direction == "positive" and rate_high < rate_low) or (
        spec.direction == "negative" and rate_high > rate_low
    )
    status = "warning" if contradicted else "ok"
    return CheckResult(check_id, spec.outcome_element, "plausibility", "association", status, payload)


# --- persistence ------------------------------------------------------------------


def save_checks(specs, results, path: str | Path) -> None:
    doc = {
        "specs": [s.to_dict() for s in specs],
        "results": [r.to_dict() for r in results],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checks(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    specs = [spec_from_dict(d) for d in doc.get("specs", [])]
    results = [result_from_dict(d) for d in doc.get("results", [])]
    return specs, results
