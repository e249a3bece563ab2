"""Rules-based transformation engine with a full audit log.

Fifteen rule kinds cover the transformation taxonomy: unit normalization and
unit-string cleanup, specimen/MAR-action subsetting, bound filters,
out-of-range string parsing, threshold-based unit imputation, categorical
reference-table mapping (hierarchical, binary, multi-select), indeterminate
scrubbing, composite value splitting, UTC timestamp normalization, and the
site sentinel rules (magic numerics and placeholder dates).

Rules are validated against an admissibility matrix keyed by the target
element's (category, value_kind) before anything runs. Every modified or
dropped record gets exactly one log entry per rule that touched it; records
can only vanish from a store via a rule with a log entry.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

from . import timeutil
from .model import (
    MISSING,
    DqaError,
    ElementCategory,
    ElementRegistry,
    ObservationRecord,
    ObservationStore,
    locator_key,
)
from .stats import format_number, parse_numeric


class RuleConfigError(DqaError):
    """Rule list fails validation: unknown target, bad params, inadmissible kind."""


# Admissibility matrix: which rule kinds may target an element of a given
# (category, value_kind). Sentinel rules are site-wide and admissible anywhere.
ADMISSIBLE_KINDS: dict[tuple[str, str], frozenset[str]] = {
    ("analyte", "numeric"): frozenset(
        {
            "unit_normalize",
            "specimen_subset",
            "unit_string_cleanup",
            "bound_filter",
            "out_of_range_string_to_bound",
            "utc_convert",
        }
    ),
    ("analyte", "categorical"): frozenset(
        {
            "specimen_subset",
            "hierarchical_map",
            "binary_map",
            "indeterminate_to_missing",
            "utc_convert",
        }
    ),
    ("flowsheet", "numeric"): frozenset(
        {
            "bound_filter",
            "composite_split",
            "unit_normalize",
            "threshold_unit_impute",
            "utc_convert",
        }
    ),
    ("flowsheet", "categorical"): frozenset(
        {
            "hierarchical_map",
            "binary_map",
            "multi_select_resolve",
            "utc_convert",
        }
    ),
    ("medication", "categorical"): frozenset({"mar_action_subset", "utc_convert"}),
}

SITE_KINDS = frozenset({"sentinel_numeric_to_missing", "sentinel_date_to_missing"})

RULE_KINDS = tuple(
    sorted(set().union(*ADMISSIBLE_KINDS.values()) | SITE_KINDS)
)

# Kinds that may target a whole category instead of a single element.
CATEGORY_TARGET_KINDS = {
    "utc_convert": None,  # any category
    "sentinel_numeric_to_missing": None,
    "sentinel_date_to_missing": None,
    "specimen_subset": {"analyte"},
    "mar_action_subset": {"medication"},
}

_CATEGORY_TOKENS = {c.value for c in ElementCategory}

DEFAULT_NUMERIC_SENTINELS = (999999, 9999999)
DEFAULT_DATE_SENTINELS = ("1841-12-31",)


@dataclass(frozen=True)
class TransformRule:
    rule_id: str
    kind: str
    target: str  # element name or category token
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TransformLogEntry:
    """Audit record for one rule touching one observation."""

    rule_id: str
    element: str
    locator: str
    action: str  # modified | dropped | passthrough-counted | added
    before_value: str
    before_unit: str | None
    after_value: str | None  # None means the record is gone
    after_unit: str | None
    note: str = ""

    def to_dict(self) -> dict:
        after = (
            "MISSING"
            if self.after_value is None
            else {"value": self.after_value, "unit": self.after_unit}
        )
        return {
            "rule_id": self.rule_id,
            "element": self.element,
            "locator": self.locator,
            "action": self.action,
            "before": {"value": self.before_value, "unit": self.before_unit},
            "after": after,
            "note": self.note,
        }


def write_log_jsonl(entries, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


# --- value-level operations ----------------------------------------------------

_COMPARATORS = (("<=", "<"), (">=", ">"), ("≤", "<"), ("≥", ">"), ("<", "<"), (">", ">"))


def strip_out_of_range(text: str) -> tuple[float | None, bool]:
    """Parse text conveying an out-of-instrument-range numeric result.

    A leading ">"/"≥" or "<"/"≤" followed by a number yields that number (the
    instrument bound); trailing unit text is ignored. Plain numerics parse
    unchanged. Returns (value, had_comparator); non-matching strings return
    (None, False) and pass through for later rules.
    """
    s = text.strip()
    if not s:
        return None, False
    for prefix, _ in _COMPARATORS:
        if s.startswith(prefix):
            rest = s[len(prefix):].strip()
            token = rest.split()[0] if rest.split() else ""
            value = parse_numeric(token)
            if value is None:
                # Unit may be glued to the number, e.g. ">600mg/dL".
                for end in range(len(token), 0, -1):
                    value = parse_numeric(token[:end])
                    if value is not None:
                        break
            return (value, True) if value is not None else (None, False)
    return parse_numeric(s), False


def threshold_convert(value: float, threshold: float, direction: str, convert) -> float | None:
    """Convert a value strictly beyond the threshold; the bound itself is kept.

    Returns the converted value or None when untouched. Conversions are chosen
    so outputs land on the kept side of the threshold, making the rule
    idempotent over its intended value domain.
    """
    if direction == "above":
        return convert(value) if value > threshold else None
    if direction == "below":
        return convert(value) if value < threshold else None
    raise RuleConfigError(f"unknown direction {direction!r}")


def convert_value(value: float, factor) -> float:
    """Apply a multiply factor or affine pair (a, b): out = a*value + b."""
    if isinstance(factor, (list, tuple)):
        a, b = factor
        return a * value + b
    return value * factor


def clean_unit(unit: str, substitutions) -> str:
    """Apply ordered find/replace pairs (greek letters, typos) to a unit string."""
    out = unit
    for find, repl in substitutions:
        out = out.replace(find, repl)
    return out


def split_composite(text: str, separator: str, n_parts: int) -> list[float] | None:
    """Split "A/B"-style composites into numeric parts; None when malformed."""
    parts = [p.strip() for p in text.strip().split(separator)]
    if len(parts) != n_parts:
        return None
    values = [parse_numeric(p) for p in parts]
    if any(v is None for v in values):
        return None
    return values


def map_categorical(text: str, table: dict, mode: str, delimiter: str = ";") -> tuple[str, bool]:
    """Map a raw string through an expert-derived reference table.

    table: lowercase input -> (output, rank). Modes: "hierarchical"/"binary"
    match the whole string; "multi_select_min" splits on the delimiter and
    returns the matched output with the minimum rank. Returns (output,
    matched); unmatched input yields (MISSING, False).

    Table outputs are fixed points: a value that already equals an output is
    returned unchanged, which makes repeated application idempotent.
    """
    key = text.strip().lower()
    outputs = {str(out).lower(): str(out) for out, _ in table.values()}
    if key in outputs:
        return outputs[key], True
    if mode in ("hierarchical", "binary"):
        hit = table.get(key)
        return (str(hit[0]), True) if hit else (MISSING, False)
    if mode == "multi_select_min":
        hits = []
        for part in key.split(delimiter):
            hit = table.get(part.strip())
            if hit is not None:
                out, rank = hit
                hits.append((rank if rank is not None else 0, str(out)))
        if not hits:
            return MISSING, False
        return min(hits)[1], True
    raise RuleConfigError(f"unknown categorical mode {mode!r}")


def matches_numeric_sentinel(text: str, sentinels) -> bool:
    value = parse_numeric(text)
    return value is not None and any(value == float(s) for s in sentinels)


def matches_date_sentinel(text: str, sentinel_dates) -> bool:
    """True when the value is a date (or instant) on a sentinel calendar date."""
    s = text.strip()
    parsed: date | None = None
    try:
        parsed = date.fromisoformat(s)
    except ValueError:
        try:
            parsed = timeutil.parse_iso_utc(s).date()
        except ValueError:
            return False
    return any(parsed == date.fromisoformat(str(d)) for d in sentinel_dates)


# --- rule loading and validation -------------------------------------------------


def _load_table_csv(path: Path) -> dict:
    """Categorical reference table: input,output[,rank] rows, inputs lowercased."""
    table = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_rank = len(header) > 2 and header[2] == "rank"
        for row in reader:
            if not row:
                continue
            rank = int(row[2]) if has_rank and len(row) > 2 and row[2] != "" else None
            table[row[0].lower()] = (row[1], rank)
    return table


def _load_factor_csv(path: Path) -> dict:
    """Unit factor table: from_unit,multiply,offset rows."""
    factors = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["from_unit", "multiply", "offset"]:
            raise RuleConfigError(f"{path}: expected header from_unit,multiply,offset")
        for row in reader:
            multiply = float(row["multiply"])
            offset = float(row["offset"] or 0)
            factors[row["from_unit"]] = multiply if offset == 0 else [multiply, offset]
    return factors


def _load_subs_csv(path: Path) -> list[tuple[str, str]]:
    subs = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["find", "replace"]:
            raise RuleConfigError(f"{path}: expected header find,replace")
        for row in reader:
            if row:
                subs.append((row[0], row[1]))
    return subs


def _materialize_params(rule_id: str, kind: str, params: dict, base_dir: Path) -> dict:
    """Resolve table_path references into loaded tables; fill sentinel defaults."""
    params = dict(params)
    path = params.pop("table_path", None)
    if path is not None:
        path = base_dir / path
        if kind == "unit_normalize":
            params["factors"] = _load_factor_csv(path)
        elif kind == "unit_string_cleanup":
            params["subs"] = _load_subs_csv(path)
        elif kind in ("hierarchical_map", "binary_map", "multi_select_resolve"):
            params["table"] = _load_table_csv(path)
        else:
            raise RuleConfigError(f"rule {rule_id}: kind {kind} takes no table_path")
    if kind in ("hierarchical_map", "binary_map", "multi_select_resolve") and "table" in params:
        table = {}
        for key, val in params["table"].items():
            if isinstance(val, (list, tuple)):
                table[key.lower()] = (val[0], val[1])
            else:
                table[key.lower()] = (val, None)
        params["table"] = table
    if kind == "unit_string_cleanup" and isinstance(params.get("subs"), dict):
        params["subs"] = list(params["subs"].items())
    if kind == "sentinel_numeric_to_missing":
        params.setdefault("values", list(DEFAULT_NUMERIC_SENTINELS))
    if kind == "sentinel_date_to_missing":
        params.setdefault("dates", list(DEFAULT_DATE_SENTINELS))
    return params


def load_rules(path: str | Path, default_sentinels=None) -> list[TransformRule]:
    """Load a JSON rule list; table_path params resolve relative to the file.

    Stub rules flagged "todo": true (emitted by adjudication for decisions that
    need human completion) are skipped. ``default_sentinels`` overrides the
    built-in numeric sentinel list for rules that do not name their own.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    rules = []
    for entry in data:
        if entry.get("todo"):
            continue
        try:
            params = dict(entry.get("params", {}))
            if (
                entry["kind"] == "sentinel_numeric_to_missing"
                and "values" not in params
                and default_sentinels
            ):
                params["values"] = list(default_sentinels)
            rules.append(
                TransformRule(
                    rule_id=entry["rule_id"],
                    kind=entry["kind"],
                    target=entry["target"],
                    params=_materialize_params(entry["rule_id"], entry["kind"], params, path.parent),
                )
            )
        except KeyError as exc:
            raise RuleConfigError(f"rule entry {entry!r} missing field {exc}") from exc
    return rules


def _require(rule: TransformRule, *names) -> None:
    for name in names:
        if name not in rule.params:
            raise RuleConfigError(f"rule {rule.rule_id}: missing param {name!r}")


def validate_rules(rules, registry: ElementRegistry) -> None:
    """Check targets exist and kinds are admissible for them; bad config is fatal."""
    for rule in rules:
        if rule.kind not in RULE_KINDS:
            raise RuleConfigError(f"rule {rule.rule_id}: unknown kind {rule.kind!r}")
        element = registry.get(rule.target)
        if element is not None:
            allowed = ADMISSIBLE_KINDS.get((element.category.value, element.value_kind), frozenset())
            if rule.kind not in allowed and rule.kind not in SITE_KINDS:
                raise RuleConfigError(
                    f"rule {rule.rule_id}: kind {rule.kind} not admissible for "
                    f"{element.name} ({element.category.value}/{element.value_kind})"
                )
        elif rule.target in _CATEGORY_TOKENS:
            if rule.kind not in CATEGORY_TARGET_KINDS:
                raise RuleConfigError(
                    f"rule {rule.rule_id}: kind {rule.kind} requires an element target"
                )
            categories = CATEGORY_TARGET_KINDS[rule.kind]
            if categories is not None and rule.target not in categories:
                raise RuleConfigError(
                    f"rule {rule.rule_id}: kind {rule.kind} cannot target category {rule.target}"
                )
        else:
            raise RuleConfigError(f"rule {rule.rule_id}: unknown element {rule.target!r}")

        _validate_params(rule, registry)


def _validate_params(rule: TransformRule, registry: ElementRegistry) -> None:
    kind, params = rule.kind, rule.params
    if kind == "unit_normalize":
        _require(rule, "factors")
        element = registry.get(rule.target)
        if element is not None and not element.reference_unit:
            raise RuleConfigError(f"rule {rule.rule_id}: element {rule.target} has no reference unit")
    elif kind == "unit_string_cleanup":
        _require(rule, "subs")
    elif kind == "bound_filter":
        if "lower" not in params and "upper" not in params:
            raise RuleConfigError(f"rule {rule.rule_id}: bound_filter needs lower and/or upper")
        if (
            params.get("lower") is not None
            and params.get("upper") is not None
            and float(params["lower"]) >= float(params["upper"])
        ):
            raise RuleConfigError(f"rule {rule.rule_id}: lower bound must be below upper bound")
    elif kind == "threshold_unit_impute":
        _require(rule, "threshold", "direction")
        if "factor" not in params and "affine" not in params:
            raise RuleConfigError(f"rule {rule.rule_id}: needs factor or affine")
        if params["direction"] not in ("above", "below"):
            raise RuleConfigError(f"rule {rule.rule_id}: direction must be above or below")
    elif kind in ("specimen_subset", "mar_action_subset"):
        if ("keep" in params) == ("drop" in params):
            raise RuleConfigError(f"rule {rule.rule_id}: give exactly one of keep/drop")
    elif kind in ("hierarchical_map", "binary_map", "multi_select_resolve"):
        _require(rule, "table")
    elif kind == "indeterminate_to_missing":
        _require(rule, "values")
    elif kind == "composite_split":
        _require(rule, "separator", "parts")
        if len(params["parts"]) < 2:
            raise RuleConfigError(f"rule {rule.rule_id}: composite_split needs >= 2 parts")
        for part in params["parts"]:
            if "name" not in part or "element" not in part:
                raise RuleConfigError(f"rule {rule.rule_id}: parts need name and element")
            if part["element"] not in registry:
                raise RuleConfigError(
                    f"rule {rule.rule_id}: unknown part element {part['element']!r}"
                )
    elif kind == "sentinel_numeric_to_missing":
        if not params.get("values"):
            raise RuleConfigError(f"rule {rule.rule_id}: sentinel list must be nonempty")
    elif kind == "sentinel_date_to_missing":
        if not params.get("dates"):
            raise RuleConfigError(f"rule {rule.rule_id}: sentinel date list must be nonempty")


# --- store-level application ------------------------------------------------------


def _entry(rule, rec, action, after_value, after_unit, note=""):
    return TransformLogEntry(
        rule_id=rule.rule_id,
        element=rec.element or "",
        locator=rec.locator,
        action=action,
        before_value=rec.value_raw,
        before_unit=rec.unit_raw,
        after_value=after_value,
        after_unit=after_unit,
        note=note,
    )


def _subset_field(rule, rec):
    return rec.specimen_source if rule.kind == "specimen_subset" else rec.mar_action


def _apply_one(rule: TransformRule, rec: ObservationRecord, element):
    """Apply one rule to one record.

    Returns (kept_records, split_records, log_entries); split_records carry the
    part element names and are routed to those elements by the caller.
    """
    kind, params = rule.kind, rule.params
    value = rec.value_raw

    if kind == "unit_string_cleanup":
        if rec.unit_raw:
            cleaned = clean_unit(rec.unit_raw, params["subs"])
            if cleaned != rec.unit_raw:
                out = replace(rec, unit_raw=cleaned)
                return [out], [], [_entry(rule, rec, "modified", value, cleaned, "unit_cleaned")]
        return [rec], [], []

    if kind == "unit_normalize":
        reference = element.reference_unit if element else params.get("reference_unit")
        unit = rec.unit_raw
        if not unit or unit == reference:
            return [rec], [], []
        factor = params["factors"].get(unit)
        if factor is None:
            return [rec], [], [_entry(rule, rec, "passthrough-counted", value, unit, "unknown_unit")]
        v = parse_numeric(value)
        if v is None:
            return [rec], [], [_entry(rule, rec, "passthrough-counted", value, unit, "non_numeric_value")]
        converted = format_number(convert_value(v, factor))
        out = replace(rec, value_raw=converted, unit_raw=reference)
        return [out], [], [_entry(rule, rec, "modified", converted, reference, "unit_normalized")]

    if kind == "bound_filter":
        v = parse_numeric(value)
        if v is None:
            return [rec], [], []
        upper = params.get("upper")
        lower = params.get("lower")
        if upper is not None and v > float(upper):
            return [], [], [_entry(rule, rec, "dropped", None, None, "above_upper_bound")]
        if lower is not None and v < float(lower):
            return [], [], [_entry(rule, rec, "dropped", None, None, "below_lower_bound")]
        return [rec], [], []

    if kind == "out_of_range_string_to_bound":
        v, had_comparator = strip_out_of_range(value)
        if v is None or not had_comparator:
            return [rec], [], []
        converted = format_number(v)
        out = replace(rec, value_raw=converted)
        return [out], [], [_entry(rule, rec, "modified", converted, rec.unit_raw, "out_of_range_bound")]

    if kind == "threshold_unit_impute":
        v = parse_numeric(value)
        if v is None:
            return [rec], [], []
        factor = params.get("factor", params.get("affine"))
        converted = threshold_convert(
            v, float(params["threshold"]), params["direction"], lambda x: convert_value(x, factor)
        )
        if converted is None:
            return [rec], [], []
        new_unit = params.get("target_unit", rec.unit_raw)
        out = replace(rec, value_raw=format_number(converted), unit_raw=new_unit)
        note = f"assumed_{params.get('assumed_unit', 'unit')}"
        return [out], [], [_entry(rule, rec, "modified", out.value_raw, new_unit, note)]

    if kind in ("specimen_subset", "mar_action_subset"):
        raw = (_subset_field(rule, rec) or "").strip().lower()
        if "drop" in params:
            if raw in {str(v).lower() for v in params["drop"]}:
                return [], [], [_entry(rule, rec, "dropped", None, None, "in_drop_list")]
            return [rec], [], []
        keeps = {str(v).lower() for v in params["keep"]}
        if raw not in keeps:
            note = "empty_field" if not raw else "not_in_keep_list"
            return [], [], [_entry(rule, rec, "dropped", None, None, note)]
        return [rec], [], []

    if kind in ("hierarchical_map", "binary_map", "multi_select_resolve"):
        if value == MISSING:
            return [rec], [], []
        mode = "multi_select_min" if kind == "multi_select_resolve" else "hierarchical"
        mapped, matched = map_categorical(
            value, params["table"], mode, params.get("delimiter", ";")
        )
        if mapped == value:
            return [rec], [], []
        note = "mapped" if matched else "unmatched_category"
        out = replace(rec, value_raw=mapped)
        return [out], [], [_entry(rule, rec, "modified", mapped, rec.unit_raw, note)]

    if kind == "indeterminate_to_missing":
        if value != MISSING and value.strip().lower() in {str(v).lower() for v in params["values"]}:
            out = replace(rec, value_raw=MISSING)
            return [out], [], [_entry(rule, rec, "modified", MISSING, rec.unit_raw, "indeterminate")]
        return [rec], [], []

    if kind == "composite_split":
        if value == MISSING:
            return [rec], [], []
        parts = params["parts"]
        values = split_composite(value, params["separator"], len(parts))
        if values is None:
            return [rec], [], [_entry(rule, rec, "passthrough-counted", value, rec.unit_raw, "split_mismatch")]
        entries = [_entry(rule, rec, "dropped", None, None, "composite_split")]
        splits = []
        for part, v in zip(parts, values):
            child = replace(
                rec,
                element=part["element"],
                value_raw=format_number(v),
                locator=f"{rec.locator}#{part['name']}",
            )
            splits.append(child)
            entries.append(
                TransformLogEntry(
                    rule_id=rule.rule_id,
                    element=part["element"],
                    locator=child.locator,
                    action="added",
                    before_value=value,
                    before_unit=rec.unit_raw,
                    after_value=child.value_raw,
                    after_unit=child.unit_raw,
                    note=f"split_part:{part['name']}",
                )
            )
        return [], splits, entries

    if kind == "sentinel_numeric_to_missing":
        if value != MISSING and matches_numeric_sentinel(value, params["values"]):
            out = replace(rec, value_raw=MISSING)
            return [out], [], [_entry(rule, rec, "modified", MISSING, rec.unit_raw, "sentinel_numeric")]
        return [rec], [], []

    if kind == "sentinel_date_to_missing":
        if value != MISSING and matches_date_sentinel(value, params["dates"]):
            out = replace(rec, value_raw=MISSING)
            return [out], [], [_entry(rule, rec, "modified", MISSING, rec.unit_raw, "sentinel_date")]
        return [rec], [], []

    if kind == "utc_convert":
        changed = {
            role: ts.astimezone(timeutil.UTC)
            for role, ts in rec.timestamps.items()
            if ts.utcoffset().total_seconds() != 0
        }
        if changed:
            out = replace(rec, timestamps={**rec.timestamps, **changed})
            return [out], [], [_entry(rule, rec, "modified", value, rec.unit_raw, "utc_normalized")]
        return [rec], [], []

    raise RuleConfigError(f"unhandled rule kind {kind!r}")  # pragma: no cover


def _element_order(names, rules, registry) -> list[str]:
    """Topological order so composite-split sources run before their part elements."""
    deps: dict[str, set[str]] = {name: set() for name in names}
    for rule in rules:
        if rule.kind != "composite_split":
            continue
        for part in rule.params["parts"]:
            child = part["element"]
            if child in deps and rule.target in deps:
                deps[child].add(rule.target)
    ordered = []
    visiting: set[str] = set()

    def visit(name):
        if name in ordered:
            return
        if name in visiting:
            raise RuleConfigError(f"composite_split cycle involving {name!r}")
        visiting.add(name)
        for dep in sorted(deps.get(name, ())):
            visit(dep)
        visiting.discard(name)
        ordered.append(name)

    for name in sorted(names):
        visit(name)
    return ordered


def apply_rules(
    grouped: ObservationStore, rules, registry: ElementRegistry
) -> tuple[ObservationStore, list[TransformLogEntry]]:
    """Apply the rule list, in listed order, per element.

    Dropped records are removed from the returned store but preserved in the
    log; for every element, input + added = output + dropped. Output records
    and log entries are sorted by (element, locator) so results are
    byte-stable regardless of execution order.
    """
    validate_rules(rules, registry)

    by_element: dict[str, list[ObservationRecord]] = {}
    passthrough: list[ObservationRecord] = []
    for rec in grouped.records:
        if rec.element is None:
            passthrough.append(rec)
        else:
            by_element.setdefault(rec.element, []).append(rec)

    # Part elements of split rules participate even when they start empty.
    names = set(by_element)
    for rule in rules:
        if rule.kind == "composite_split":
            names.update(part["element"] for part in rule.params["parts"])
            names.add(rule.target)

    log: list[TransformLogEntry] = []
    final: list[ObservationRecord] = list(passthrough)
    pending_splits: dict[str, list[ObservationRecord]] = {}

    for name in _element_order(names, rules, registry):
        element = registry.get(name)
        records = by_element.get(name, []) + pending_splits.pop(name, [])
        sequence = [
            rule
            for rule in rules
            if rule.target == name
            or (element is not None and rule.target == element.category.value)
        ]
        for rule in sequence:
            next_records: list[ObservationRecord] = []
            for rec in records:
                kept, splits, entries = _apply_one(rule, rec, element)
                next_records.extend(kept)
                log.extend(entries)
                for child in splits:
                    pending_splits.setdefault(child.element, []).append(child)
            records = next_records
        final.extend(records)

    if pending_splits:  # split into an element that never got processed
        for name, recs in pending_splits.items():
            final.extend(recs)

    final.sort(key=lambda r: (r.element or "", locator_key(r.locator)))
    order = {rule.rule_id: i for i, rule in enumerate(rules)}
    log.sort(key=lambda e: (e.element, locator_key(e.locator), order.get(e.rule_id, 0)))
    return ObservationStore(tuple(final)), log


def log_counts(entries) -> dict[str, dict[str, int]]:
    """Per-element counts of dropped/added/modified entries, for accounting."""
    counts: dict[str, dict[str, int]] = {}
    for entry in entries:
        per = counts.setdefault(entry.element, {"dropped": 0, "added": 0, "modified": 0})
        if entry.action in per:
            per[entry.action] += 1
    return counts
