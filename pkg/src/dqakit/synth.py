"""Synthetic cohort generation with ground-truth flaw injection.

Generates observation CSVs in the ingest schema plus a ledger listing every
injected flaw (record locator + flaw kind), so detection by the transform and
check stages can be scored exactly. Generation is single-threaded and fully
determined by (spec, seed): the same spec produces identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path

from .ingest import EXPECTED_COLUMNS
from .model import DqaError, ElementCategory, manifest_to_dict
from .timeutil import UTC, month_end

FLAW_KINDS = (
    "sentinel",
    "unit_mix",
    "specimen_contamination",
    "out_of_range_strings",
    "typo_units",
    "dropout_after_month",
    "composite_strings",
    "held_actions",
)

_PRIMARY_TS_COLUMN = {
    ElementCategory.ANALYTE: "result_time",
    ElementCategory.FLOWSHEET: "measurement_time",
    ElementCategory.MEDICATION: "administration_time",
    ElementCategory.ENCOUNTER: "admission_time",
    ElementCategory.ORDER: "order_time",
    ElementCategory.COMORBIDITY: "result_time",
    ElementCategory.DEMOGRAPHIC: "result_time",
}


class SynthSpecError(DqaError):
    """Synth spec is invalid; the message names the offending field."""


@dataclass(frozen=True)
class SynthElement:
    source_id: str
    source_name: str
    category: ElementCategory
    value_kind: str
    rate: float  # mean records per patient (Poisson)
    distribution: dict
    unit: str | None = None
    units: dict | None = None  # unit -> proportion, overrides `unit`
    specimen_source: str | None = None
    mar_action: str | None = None
    route: str | None = None


@dataclass(frozen=True)
class FlawSpec:
    kind: str
    source_id: str
    rate: float
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthSpec:
    project_name: str
    patients: int
    start_date: date
    end_date: date
    seed: int
    elements: tuple[SynthElement, ...]
    flaws: tuple[FlawSpec, ...] = ()


def load_synth_spec(path: str | Path) -> SynthSpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


def spec_from_dict(data: dict) -> SynthSpec:
    def require(name):
        if name not in data:
            raise SynthSpecError(f"missing field {name!r}")
        return data[name]

    if "seed" not in data:
        raise SynthSpecError("missing field 'seed' (seed is mandatory)")
    patients = require("patients")
    if not isinstance(patients, int) or patients < 1:
        raise SynthSpecError("field 'patients' must be a positive integer")

    elements = []
    for entry in require("elements"):
        try:
            dist = entry["distribution"]
            family = dist.get("family")
            if family not in ("normal", "lognormal", "categorical"):
                raise SynthSpecError(f"elements.distribution.family: unknown family {family!r}")
            rate = float(entry["rate"])
            if rate < 0:
                raise SynthSpecError("elements.rate: must be >= 0")
            elements.append(
                SynthElement(
                    source_id=entry["source_id"],
                    source_name=entry.get("source_name", entry["source_id"]),
                    category=ElementCategory(entry["category"]),
                    value_kind=entry.get("value_kind", "numeric"),
                    rate=rate,
                    distribution=dist,
                    unit=entry.get("unit"),
                    units=entry.get("units"),
                    specimen_source=entry.get("specimen_source"),
                    mar_action=entry.get("mar_action"),
                    route=entry.get("route"),
                )
            )
        except KeyError as exc:
            raise SynthSpecError(f"elements entry missing field {exc}") from exc

    known = {el.source_id for el in elements}
    flaws = []
    for entry in data.get("flaws", ()):
        kind = entry.get("kind")
        if kind not in FLAW_KINDS:
            raise SynthSpecError(f"flaws.kind: unknown kind {kind!r}")
        source_id = entry.get("source_id")
        if source_id not in known:
            raise SynthSpecError(f"flaws.source_id: unknown source {source_id!r}")
        rate = float(entry.get("rate", 1.0))
        if not 0 <= rate <= 1:
            raise SynthSpecError("flaws.rate: must be within [0, 1]")
        flaws.append(FlawSpec(kind, source_id, rate, dict(entry.get("params", {}))))

    try:
        start = date.fromisoformat(require("start_date"))
        end = date.fromisoformat(require("end_date"))
    except ValueError as exc:
        raise SynthSpecError(f"start_date/end_date: {exc}") from exc
    if start > end:
        raise SynthSpecError("start_date: must not be after end_date")

    return SynthSpec(
        project_name=require("project_name"),
        patients=patients,
        start_date=start,
        end_date=end,
        seed=data["seed"],
        elements=tuple(elements),
        flaws=tuple(flaws),
    )


def _poisson(rng: random.Random, lam: float) -> int:
    """Knuth's product-of-uniforms Poisson draw; deterministic given the rng."""
    if lam <= 0:
        return 0
    limit = math.exp(-lam)
    k, product = 0, 1.0
    while True:
        product *= rng.random()
        if product <= limit:
            return k
        k += 1


def _draw_value(rng: random.Random, dist: dict) -> str:
    family = dist["family"]
    if family == "normal":
        return format(rng.gauss(dist["mean"], dist["sd"]), ".6g")
    if family == "lognormal":
        return format(rng.lognormvariate(dist["mu"], dist["sigma"]), ".6g")
    labels = list(dist["values"])
    weights = [dist["values"][label] for label in labels]
    return rng.choices(labels, weights=weights, k=1)[0]


def _draw_unit(rng: random.Random, element: SynthElement) -> str:
    if element.units:
        labels = list(element.units)
        weights = [element.units[label] for label in labels]
        return rng.choices(labels, weights=weights, k=1)[0]
    return element.unit or ""


@dataclass
class SynthResult:
    header: list[str]
    rows: list[dict]  # column -> value, aligned with EXPECTED_COLUMNS
    ledger: list[dict]
    manifest: dict


def generate(spec: SynthSpec, file_stem: str = "observations") -> SynthResult:
    """Generate observations plus the ground-truth flaw ledger.

    Ledger entries carry the locator the ingest stage will assign
    ("<file_stem>:<line_no>"), the flaw kind, and its parameters. Structural
    dropout flaws are recorded once per element, record-level flaws once per
    affected record; clean records never appear in the ledger.
    """
    rng = random.Random(spec.seed)
    patients = [f"P{i:05d}" for i in range(1, spec.patients + 1)]
    flaws_by_source: dict[str, list[FlawSpec]] = {}
    for flaw in spec.flaws:
        flaws_by_source.setdefault(flaw.source_id, []).append(flaw)

    rows: list[dict] = []
    ledger: list[dict] = []

    # Structural flaws first: a dropout bounds the element's draw window.
    window_end: dict[str, date] = {}
    for flaw in spec.flaws:
        if flaw.kind == "dropout_after_month":
            month = flaw.params.get("month")
            if not month:
                raise SynthSpecError("flaws.params.month: required for dropout_after_month")
            window_end[flaw.source_id] = min(spec.end_date, month_end(month))
            ledger.append(
                {
                    "locator": None,
                    "source_id": flaw.source_id,
                    "patient_id": None,
                    "kind": flaw.kind,
                    "detail": {"month": month},
                }
            )

    start_dt = datetime.combine(spec.start_date, time.min, tzinfo=UTC)

    for patient in patients:
        encounter_seq = 0
        for element in spec.elements:
            end_date = window_end.get(element.source_id, spec.end_date)
            end_dt = datetime.combine(end_date + timedelta(days=1), time.min, tzinfo=UTC)
            span = int((end_dt - start_dt).total_seconds())
            for _ in range(_poisson(rng, element.rate)):
                instant = start_dt + timedelta(seconds=rng.randrange(span))
                encounter_seq += 1
                row = {col: "" for col in EXPECTED_COLUMNS}
                row.update(
                    {
                        "patient_id": patient,
                        "encounter_id": f"{patient}-E{encounter_seq:03d}",
                        "category": element.category.value,
                        "source_id": element.source_id,
                        "source_name": element.source_name,
                        "value_raw": _draw_value(rng, element.distribution),
                        "unit_raw": _draw_unit(rng, element),
                        "specimen_source": element.specimen_source or "",
                        "mar_action": element.mar_action or "",
                        "route": element.route or "",
                    }
                )
                row[_PRIMARY_TS_COLUMN[element.category]] = instant.isoformat()

                line_no = len(rows) + 2  # header occupies line 1
                locator = f"{file_stem}:{line_no}"
                for flaw in flaws_by_source.get(element.source_id, ()):
                    if flaw.kind == "dropout_after_month":
                        continue
                    if rng.random() >= flaw.rate:
                        continue
                    detail = _inject(row, flaw)
                    ledger.append(
                        {
                            "locator": locator,
                            "source_id": element.source_id,
                            "patient_id": patient,
                            "kind": flaw.kind,
                            "detail": detail,
                        }
                    )
                rows.append(row)

    manifest = {
        "project_name": spec.project_name,
        "patient_ids": patients,
        "start_date": spec.start_date.isoformat(),
        "end_date": spec.end_date.isoformat(),
        "inclusion_note": "synthetic cohort",
    }
    return SynthResult(list(EXPECTED_COLUMNS), rows, ledger, manifest)


def _inject(row: dict, flaw: FlawSpec) -> dict:
    """Mutate one row per the flaw kind; returns ledger detail."""
    params = flaw.params
    if flaw.kind == "sentinel":
        value = params.get("value", 999999)
        row["value_raw"] = str(value)
        return {"value": value}
    if flaw.kind == "unit_mix":
        # Raw value re-expressed in an alternate unit so unit_normalize can fix it.
        unit = params.get("unit", "alt")
        factor = float(params.get("factor", 1.0))
        current = float(row["value_raw"])
        row["value_raw"] = format(current * factor, ".6g")
        row["unit_raw"] = unit
        return {"unit": unit, "factor": factor}
    if flaw.kind == "specimen_contamination":
        value = params.get("value", "urine")
        row["specimen_source"] = value
        return {"specimen_source": value}
    if flaw.kind == "out_of_range_strings":
        comparator = params.get("comparator", ">")
        bound = params.get("bound", 600)
        suffix = params.get("suffix", "")
        row["value_raw"] = f"{comparator}{bound}{suffix}"
        return {"comparator": comparator, "bound": bound}
    if flaw.kind == "typo_units":
        unit = params.get("value", "mgg/dL")
        row["unit_raw"] = unit
        return {"unit": unit}
    if flaw.kind == "composite_strings":
        separator = params.get("separator", "/")
        second = params.get("second", "80")
        row["value_raw"] = f"{row['value_raw']}{separator}{second}"
        return {"separator": separator}
    if flaw.kind == "held_actions":
        action = params.get("action", "held")
        row["mar_action"] = action
        return {"mar_action": action}
    raise SynthSpecError(f"flaws.kind: unhandled kind {flaw.kind!r}")  # pragma: no cover


def write_outputs(result: SynthResult, out_dir: str | Path, file_stem: str = "observations"):
    """Write observations.csv, ledger.jsonl, and manifest.json into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    obs_path = out_dir / f"{file_stem}.csv"
    with open(obs_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, result.header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(result.rows)
    ledger_path = out_dir / "ledger.jsonl"
    with open(ledger_path, "w", encoding="utf-8") as fh:
        for entry in result.ledger:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return obs_path, ledger_path, manifest_path
