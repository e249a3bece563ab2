"""Entity resolution: map raw source identifiers onto canonical data elements.

Groupers are curated (category, source_id) -> element mappings; matching is
exact by identifier, never fuzzy. Also provides automated utilities for
diagnosis code groups and medication therapeutic classes, with an offline
file-backed terminology client so tests never touch the network.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .model import (
    DataElement,
    DqaError,
    ElementCategory,
    ElementRegistry,
    ObservationStore,
)

log = logging.getLogger(__name__)


class RegistryError(DqaError):
    """Grouper or mapping table violates a load-time invariant."""


@dataclass(frozen=True)
class GrouperMember:
    source_id: str
    source_name: str = ""  # informational only; matching is by source_id


@dataclass(frozen=True)
class Grouper:
    element_name: str
    category: ElementCategory
    value_kind: str
    reference_unit: str | None = None
    members: tuple[GrouperMember, ...] = ()


def load_groupers(path: str | Path) -> list[Grouper]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    groupers = []
    for entry in data:
        try:
            groupers.append(
                Grouper(
                    element_name=entry["element_name"],
                    category=ElementCategory(entry["category"]),
                    value_kind=entry["value_kind"],
                    reference_unit=entry.get("reference_unit"),
                    members=tuple(
                        GrouperMember(m["source_id"], m.get("source_name", ""))
                        for m in entry.get("members", [])
                    ),
                )
            )
        except (KeyError, ValueError) as exc:
            raise RegistryError(f"invalid grouper entry {entry!r}: {exc}") from exc
    validate_groupers(groupers)
    return groupers


def validate_groupers(groupers) -> None:
    """Enforce registry invariants; duplicate source ids are fatal."""
    names = set()
    seen: dict[tuple[ElementCategory, str], str] = {}
    for g in groupers:
        if g.element_name in names:
            raise RegistryError(f"duplicate element name {g.element_name!r}")
        names.add(g.element_name)
        member_ids = [m.source_id for m in g.members]
        if len(member_ids) != len(set(member_ids)):
            raise RegistryError(f"grouper {g.element_name!r} has duplicate member source_ids")
        for sid in member_ids:
            key = (g.category, sid)
            if key in seen:
                raise RegistryError(
                    f"source_id {sid!r} appears in groupers {seen[key]!r} and "
                    f"{g.element_name!r} for category {g.category.value}"
                )
            seen[key] = g.element_name


def build_registry(groupers) -> ElementRegistry:
    """Registry of data elements defined by the groupers, all pending."""
    validate_groupers(groupers)
    return ElementRegistry(
        DataElement(g.element_name, g.category, g.value_kind, g.reference_unit)
        for g in groupers
    )


@dataclass(frozen=True)
class UngroupedReport:
    """Counts of observations no grouper claimed, largest first."""

    entries: tuple[tuple[str, str, int], ...]  # (category, source_id, count)

    @property
    def total(self) -> int:
        return sum(count for _, _, count in self.entries)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["category", "source_id", "count"])
            writer.writerows(self.entries)


def apply_groupers(store: ObservationStore, groupers) -> tuple[ObservationStore, UngroupedReport]:
    """Tag every observation matched by a grouper member with its element name.

    Returns the grouped store (matched records only) plus an UngroupedReport;
    grouped + ungrouped always partition the input store.
    """
    validate_groupers(groupers)
    index = {
        (g.category, m.source_id): g.element_name for g in groupers for m in g.members
    }
    tagged = []
    missed: Counter = Counter()
    for rec in store.records:
        element = index.get((rec.category, rec.source_id))
        if element is None:
            missed[(rec.category.value, rec.source_id)] += 1
        else:
            tagged.append(replace(rec, element=element))
    entries = tuple(
        (cat, sid, n)
        for (cat, sid), n in sorted(missed.items(), key=lambda kv: (-kv[1], kv[0]))
    )
    return ObservationStore(tuple(tagged)), UngroupedReport(entries)


# --- diagnosis code grouping --------------------------------------------------


@dataclass(frozen=True)
class DiagnosisMap:
    """(code, code_system) -> comorbidity group lookup table."""

    groups: dict[tuple[str, str], str]


def load_diagnosis_map(path: str | Path) -> DiagnosisMap:
    groups: dict[tuple[str, str], str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["code", "code_system", "group_name"]:
            raise RegistryError(f"{path}: expected header code,code_system,group_name")
        for row in reader:
            key = (row["code"], row["code_system"])
            if not row["group_name"]:
                raise RegistryError(f"{path}: empty group_name for {key}")
            if key in groups:
                raise RegistryError(f"{path}: duplicate code {key}")
            groups[key] = row["group_name"]
    return DiagnosisMap(groups)


def map_diagnoses(codes, dmap: DiagnosisMap):
    """Pure lookup of (code, code_system) pairs.

    Returns (assignments, residual): assignments are (code, code_system,
    group_name) triples, residual holds the unmapped pairs. Unmapped is a
    normal outcome, never an error.
    """
    assignments = []
    residual = []
    for code, system in codes:
        group = dmap.groups.get((code, system))
        if group is None:
            residual.append((code, system))
        else:
            assignments.append((code, system, group))
    return assignments, residual


# --- medication therapeutic classes -------------------------------------------

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class MedClassMap:
    """token (lowercase) -> therapeutic class lookup table."""

    classes: dict[str, str]


def load_med_class_map(path: str | Path) -> MedClassMap:
    classes: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["token", "therapeutic_class"]:
            raise RegistryError(f"{path}: expected header token,therapeutic_class")
        for row in reader:
            token = row["token"].lower()
            if token in classes:
                raise RegistryError(f"{path}: duplicate token {token!r}")
            classes[token] = row["therapeutic_class"]
    return MedClassMap(classes)


class TerminologyClient:
    """Interface for remote therapeutic-class lookups. Network use is opt-in."""

    def lookup(self, raw_name: str) -> list[str]:  # pragma: no cover - interface
        raise NotImplementedError


class FileTerminologyClient(TerminologyClient):
    """File-backed stub client: a JSON map of raw name -> class list."""

    def __init__(self, path: str | Path, timeout: float = 5.0):
        self.timeout = timeout  # kept for interface parity with network clients
        with open(path, encoding="utf-8") as fh:
            self._responses = json.load(fh)

    def lookup(self, raw_name: str) -> list[str]:
        return list(self._responses.get(raw_name, []))


class ClassCache:
    """JSON-file cache of remote responses keyed by raw medication name."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, list[str]] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self._entries = json.load(fh)

    def get(self, raw_name: str) -> list[str] | None:
        return self._entries.get(raw_name)

    def put(self, raw_name: str, classes: list[str]) -> None:
        self._entries[raw_name] = classes
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self._entries, fh, indent=2, sort_keys=True)
            fh.write("\n")


def map_medication_class(
    raw_name: str,
    mmap: MedClassMap,
    remote: TerminologyClient | None = None,
    cache: ClassCache | None = None,
) -> set[str]:
    """Map a raw medication name to the set of known therapeutic classes.

    The name is tokenized and each token looked up in the local map. When
    there is no local hit and a remote client is configured, the client is
    queried (cached responses first) and the result cached. Remote failure
    degrades to the local result with a logged warning, never an error.
    """
    if not raw_name:
        raise DqaError("raw_name must be nonempty")
    tokens = tokenize(raw_name)
    classes = {mmap.classes[t] for t in tokens if t in mmap.classes}
    if classes or remote is None:
        return classes
    if cache is not None:
        cached = cache.get(raw_name)
        if cached is not None:
            return set(cached)
    try:
        response = remote.lookup(raw_name)
    except Exception as exc:
        log.warning("terminology lookup failed for %r: %s", raw_name, exc)
        return classes
    result = set(response)
    if cache is not None:
        cache.put(raw_name, sorted(result))
    return result
