"""Core domain model: element categories, observation records, cohorts, registries.

Everything downstream (grouping, transforms, checks, reports, adjudication)
operates on the types defined here. Stores are sealed at construction and
never mutated; pipeline stages produce new stores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from enum import Enum
from pathlib import Path

from . import timeutil


class DqaError(Exception):
    """Base class for validation failures raised by this package."""


class ElementCategory(str, Enum):
    """Closed set of data element categories."""

    ANALYTE = "analyte"
    FLOWSHEET = "flowsheet"
    MEDICATION = "medication"
    ENCOUNTER = "encounter"
    ORDER = "order"
    COMORBIDITY = "comorbidity"
    DEMOGRAPHIC = "demographic"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


TIMESTAMP_ROLES = (
    "order",
    "collection",
    "result",
    "measurement",
    "administration",
    "ed_arrival",
    "admission",
    "discharge",
)

# Roles that must be present on an ingested record, by category. Encounters
# accept either an admission or an ED-arrival instant.
REQUIRED_TIMESTAMP: dict[ElementCategory, tuple[str, ...]] = {
    ElementCategory.ANALYTE: ("result",),
    ElementCategory.FLOWSHEET: ("measurement",),
    ElementCategory.MEDICATION: ("administration",),
    ElementCategory.ENCOUNTER: ("admission", "ed_arrival"),
}

# Preferred role for temporal bucketing, most specific first.
PRIMARY_TIMESTAMP: dict[ElementCategory, tuple[str, ...]] = {
    ElementCategory.ANALYTE: ("result", "collection", "order"),
    ElementCategory.FLOWSHEET: ("measurement",),
    ElementCategory.MEDICATION: ("administration", "order"),
    ElementCategory.ENCOUNTER: ("admission", "ed_arrival"),
    ElementCategory.ORDER: ("order",),
    ElementCategory.COMORBIDITY: ("result", "admission", "order"),
    ElementCategory.DEMOGRAPHIC: ("result", "measurement", "admission"),
}

#: Canonical representation of a missing value in stores and CSV files.
MISSING = ""

VALUE_KINDS = ("numeric", "categorical")
STATUSES = ("pending", "fit_for_use", "needs_rework", "excluded")


def locator_key(locator: str) -> tuple[str, int, str]:
    """Sort key for record locators of the form ``stem:line`` or ``stem:line#part``."""
    base, _, part = locator.partition("#")
    stem, _, line = base.rpartition(":")
    if line.isdigit():
        return (stem, int(line), part)
    return (base, -1, part)


@dataclass(frozen=True)
class ObservationRecord:
    """One raw measurement/administration/encounter fact plus source metadata.

    ``value_raw`` is always a string; the empty string means missing.
    ``timestamps`` maps role names (see TIMESTAMP_ROLES) to UTC instants.
    ``element`` is None until grouping assigns a canonical data element.
    """

    locator: str
    patient_id: str
    category: ElementCategory
    source_id: str
    source_name: str = ""
    value_raw: str = MISSING
    encounter_id: str | None = None
    unit_raw: str | None = None
    specimen_source: str | None = None
    mar_action: str | None = None
    route: str | None = None
    timestamps: dict[str, datetime] = field(default_factory=dict)
    element: str | None = None

    def primary_instant(self) -> datetime | None:
        """The instant used for temporal bucketing, per the category's role order."""
        for role in PRIMARY_TIMESTAMP.get(self.category, TIMESTAMP_ROLES):
            ts = self.timestamps.get(role)
            if ts is not None:
                return ts
        return None


def record_to_dict(rec: ObservationRecord) -> dict:
    return {
        "locator": rec.locator,
        "patient_id": rec.patient_id,
        "encounter_id": rec.encounter_id,
        "category": rec.category.value,
        "source_id": rec.source_id,
        "source_name": rec.source_name,
        "value_raw": rec.value_raw,
        "unit_raw": rec.unit_raw,
        "specimen_source": rec.specimen_source,
        "mar_action": rec.mar_action,
        "route": rec.route,
        "timestamps": {role: timeutil.iso_utc(ts) for role, ts in sorted(rec.timestamps.items())},
        "element": rec.element,
    }


def record_from_dict(data: dict) -> ObservationRecord:
    return ObservationRecord(
        locator=data["locator"],
        patient_id=data["patient_id"],
        encounter_id=data.get("encounter_id"),
        category=ElementCategory(data["category"]),
        source_id=data["source_id"],
        source_name=data.get("source_name", ""),
        value_raw=data.get("value_raw", MISSING),
        unit_raw=data.get("unit_raw"),
        specimen_source=data.get("specimen_source"),
        mar_action=data.get("mar_action"),
        route=data.get("route"),
        timestamps={role: timeutil.parse_iso_utc(ts) for role, ts in data.get("timestamps", {}).items()},
        element=data.get("element"),
    )


@dataclass(frozen=True)
class ObservationStore:
    """Sealed, immutable collection of observation records.

    Safe to share across readers; every transformation returns a new store.
    """

    records: tuple[ObservationRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_element(self) -> dict[str, list[ObservationRecord]]:
        out: dict[str, list[ObservationRecord]] = {}
        for rec in self.records:
            if rec.element is not None:
                out.setdefault(rec.element, []).append(rec)
        return out

    def count_for_category(self, category: ElementCategory) -> int:
        return sum(1 for rec in self.records if rec.category == category)


def store_to_jsonl(store: ObservationStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in store.records:
            fh.write(json.dumps(record_to_dict(rec), sort_keys=True) + "\n")


def store_from_jsonl(path: str | Path) -> ObservationStore:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_dict(json.loads(line)))
    return ObservationStore(tuple(records))


@dataclass(frozen=True)
class CohortManifest:
    """Defines the patient population and calendar window a project covers."""

    project_name: str
    patient_ids: frozenset[str]
    start_date: date
    end_date: date
    inclusion_note: str = ""

    def __post_init__(self):
        if not self.patient_ids:
            raise DqaError("manifest patient_ids must be nonempty")
        if self.start_date > self.end_date:
            raise DqaError("manifest start_date must be <= end_date")


def manifest_from_dict(data: dict) -> CohortManifest:
    try:
        return CohortManifest(
            project_name=data["project_name"],
            patient_ids=frozenset(data["patient_ids"]),
            start_date=date.fromisoformat(data["start_date"]),
            end_date=date.fromisoformat(data["end_date"]),
            inclusion_note=data.get("inclusion_note", ""),
        )
    except (KeyError, ValueError) as exc:
        raise DqaError(f"invalid manifest: {exc}") from exc


def load_manifest(path: str | Path) -> CohortManifest:
    with open(path, encoding="utf-8") as fh:
        return manifest_from_dict(json.load(fh))


def manifest_to_dict(manifest: CohortManifest) -> dict:
    return {
        "project_name": manifest.project_name,
        "patient_ids": sorted(manifest.patient_ids),
        "start_date": manifest.start_date.isoformat(),
        "end_date": manifest.end_date.isoformat(),
        "inclusion_note": manifest.inclusion_note,
    }


@dataclass
class DataElement:
    """A canonical clinical variable after entity resolution."""

    name: str
    category: ElementCategory
    value_kind: str
    reference_unit: str | None = None
    status: str = "pending"

    def __post_init__(self):
        if self.value_kind not in VALUE_KINDS:
            raise DqaError(f"element {self.name}: unknown value_kind {self.value_kind!r}")
        if self.value_kind == "categorical" and self.reference_unit:
            raise DqaError(f"element {self.name}: categorical elements carry no reference unit")
        if self.status not in STATUSES:
            raise DqaError(f"element {self.name}: unknown status {self.status!r}")


class ElementRegistry:
    """Name-unique collection of data elements; iteration is name-sorted."""

    def __init__(self, elements=()):
        self._by_name: dict[str, DataElement] = {}
        for el in elements:
            self.add(el)

    def add(self, element: DataElement) -> None:
        if element.name in self._by_name:
            raise DqaError(f"duplicate element name {element.name!r}")
        self._by_name[element.name] = element

    def get(self, name: str) -> DataElement | None:
        return self._by_name.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self._by_name)

    def __iter__(self):
        return iter(sorted(self._by_name.values(), key=lambda el: el.name))

    def active(self) -> list[DataElement]:
        """Elements still participating in checks/reports (not excluded)."""
        return [el for el in self if el.status != "excluded"]
