"""Command-line pipeline over a project directory.

Subcommands: ingest, metadata, group, transform, check, report,
adjudicate emit, adjudicate apply, summarize, synth, and pipeline (which runs
ingest -> group -> transform -> check -> report). All artifacts are written
under --out/<project>/; logs go to standard error only.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from . import adjudication, checks, grouping, ingest, report, synth, transform
from .model import (
    DqaError,
    ElementCategory,
    load_manifest,
    store_from_jsonl,
    store_to_jsonl,
)
from .timeutil import UTC, parse_iso_utc

log = logging.getLogger("dqakit")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


@dataclass
class ProjectConfig:
    project_name: str
    paths: dict[str, object] = field(default_factory=dict)
    report_categories: list[str] = field(default_factory=lambda: list(report.DEFAULT_REPORT_SET))
    site_timezone: str = "UTC"
    sentinels: list = field(default_factory=lambda: list(transform.DEFAULT_NUMERIC_SENTINELS))
    seed: int | None = None
    people_notes: str = ""
    histogram_cap: int = 50
    associations: list[dict] = field(default_factory=list)
    extra_checks: dict = field(default_factory=dict)
    top_k: int = 10

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        return Path(value) if value else None

    def observation_files(self) -> list[Path]:
        value = self.paths.get("observations", [])
        if isinstance(value, (str, Path)):
            value = [value]
        return [Path(v) for v in value]


def load_config(path: str | Path) -> ProjectConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    if "project_name" not in data:
        raise DqaError("config missing project_name")
    categories = data.get("report_categories", list(report.DEFAULT_REPORT_SET))
    if not categories:
        raise DqaError("report_categories must be nonempty")
    paths = dict(data.get("paths", {}))
    for key, value in paths.items():
        if isinstance(value, list):
            paths[key] = [path.parent / v for v in value]
        else:
            paths[key] = path.parent / value
    return ProjectConfig(
        project_name=data["project_name"],
        paths=paths,
        report_categories=list(categories),
        site_timezone=data.get("site_timezone", "UTC"),
        sentinels=list(data.get("sentinels", transform.DEFAULT_NUMERIC_SENTINELS)),
        seed=data.get("seed"),
        people_notes=data.get("people_notes", ""),
        histogram_cap=data.get("histogram_cap", 50),
        associations=list(data.get("associations", [])),
        extra_checks=dict(data.get("extra_checks", {})),
        top_k=data.get("top_k", 10),
    )


@dataclass
class Workspace:
    """Filesystem conventions for one project's artifacts."""

    cfg: ProjectConfig
    out: Path

    @property
    def base(self) -> Path:
        return self.out / self.cfg.project_name

    def file(self, name: str) -> Path:
        return self.base / name

    def prepare(self) -> None:
        self.base.mkdir(parents=True, exist_ok=True)

    def load_registry(self):
        groupers = grouping.load_groupers(self.cfg.path("groupers"))
        registry = grouping.build_registry(groupers)
        state_path = self.file("state.json")
        if state_path.exists():
            state = adjudication.load_state(state_path)
        else:
            state = adjudication.ProjectState(self.cfg.project_name)
        state.ensure_elements(registry)
        return groupers, registry, state


def _require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise DqaError(f"config does not name a {what} path")
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# --- stage implementations ---------------------------------------------------------


def stage_ingest(ws: Workspace) -> None:
    ws.prepare()
    manifest = load_manifest(_require_file(ws.cfg.path("manifest"), "manifest"))
    files = [_require_file(p, "observations") for p in ws.cfg.observation_files()]
    if not files:
        raise DqaError("config names no observation files")
    result = ingest.ingest_observations(
        files,
        manifest,
        site_tz=ws.cfg.site_timezone,
        reject_path=ws.file("rejects.csv"),
        warning_path=ws.file("warnings.csv"),
    )
    store_to_jsonl(result.store, ws.file("store.ingested.jsonl"))
    for name, counts in result.per_file.items():
        log.info(
            "ingested %s: %d stored, %d rejected", name, counts["stored"], counts["rejected"]
        )


def stage_metadata(ws: Workspace, categories=None) -> None:
    ws.prepare()
    store = store_from_jsonl(_require_file(ws.file("store.ingested.jsonl"), "ingested store"))
    wanted = categories or [c.value for c in ingest.METADATA_CATEGORIES]
    for token in wanted:
        category = ElementCategory(token)
        table = ingest.curate_metadata(store, category, k=ws.cfg.top_k)
        path = ws.file(f"metadata.{category.value}.csv")
        ingest.metadata_to_csv(table, path)
        log.info("metadata for %s: %d source ids -> %s", category.value, len(table.rows), path)


def stage_group(ws: Workspace) -> None:
    ws.prepare()
    store = store_from_jsonl(_require_file(ws.file("store.ingested.jsonl"), "ingested store"))
    groupers, registry, state = ws.load_registry()
    grouped, ungrouped = grouping.apply_groupers(store, groupers)
    store_to_jsonl(grouped, ws.file("store.grouped.jsonl"))
    ungrouped.to_csv(ws.file("ungrouped.csv"))
    adjudication.save_state(state, ws.file("state.json"))
    log.info(
        "grouped %d records into %d elements; %d ungrouped",
        len(grouped),
        len(registry),
        ungrouped.total,
    )


def stage_transform(ws: Workspace, extra_rules=()) -> None:
    ws.prepare()
    grouped = store_from_jsonl(_require_file(ws.file("store.grouped.jsonl"), "grouped store"))
    _, registry, _ = ws.load_registry()
    rules = transform.load_rules(
        _require_file(ws.cfg.path("rules"), "rules"), default_sentinels=ws.cfg.sentinels
    )
    for extra in extra_rules:
        rules.extend(
            transform.load_rules(_require_file(Path(extra), "extra rules"), ws.cfg.sentinels)
        )
    transformed, entries = transform.apply_rules(grouped, rules, registry)
    store_to_jsonl(transformed, ws.file("store.transformed.jsonl"))
    transform.write_log_jsonl(entries, ws.file("transform_log.jsonl"))
    counts = transform.log_counts(entries)
    dropped = sum(c["dropped"] for c in counts.values())
    log.info("transformed store: %d -> %d records (%d dropped)", len(grouped), len(transformed), dropped)


def stage_check(ws: Workspace, jobs: int = 1) -> None:
    ws.prepare()
    store = store_from_jsonl(
        _require_file(ws.file("store.transformed.jsonl"), "transformed store")
    )
    manifest = load_manifest(_require_file(ws.cfg.path("manifest"), "manifest"))
    _, registry, _state = ws.load_registry()
    specs = checks.assign_checks(registry, overrides=ws.cfg.extra_checks or None)
    results = checks.run_checks(
        store, specs, manifest, histogram_cap=ws.cfg.histogram_cap, jobs=jobs
    )
    for assoc in ws.cfg.associations:
        spec = checks.AssociationSpec(
            factor_element=assoc["factor_element"],
            outcome_element=assoc["outcome_element"],
            direction=assoc["direction"],
            split=assoc.get("split", "median"),
            threshold=assoc.get("threshold"),
        )
        results.append(checks.run_association(store, spec, manifest))
    checks.save_checks(specs, results, ws.file("checks.json"))
    log.info("ran %d checks over %d elements", len(results), len(registry.active()))


def stage_report(ws: Workspace, now: datetime) -> list[Path]:
    ws.prepare()
    _, registry, _state = ws.load_registry()
    specs, results = checks.load_checks(_require_file(ws.file("checks.json"), "check results"))
    written = []
    for category_name in ws.cfg.report_categories:
        doc = report.build_report(
            results, registry, category_name, ws.cfg.project_name, now, specs=specs
        )
        json_path, html_path = report.write_report_pair(doc, ws.out)
        written.extend([json_path, html_path])
        log.info("report %s: %d elements -> %s", category_name, len(doc["elements"]), json_path)
    return written


def stage_adjudicate_emit(ws: Workspace) -> Path:
    ws.prepare()
    _, registry, state = ws.load_registry()
    adjudication.reset_for_rework(registry, state)
    _specs, results = checks.load_checks(_require_file(ws.file("checks.json"), "check results"))
    reference = None
    ref_path = ws.cfg.path("reference_aggregates")
    if ref_path is not None and ref_path.exists():
        reference = adjudication.load_reference_aggregates(ref_path)
    rows = adjudication.emit_form(registry, results, reference)
    round_number = len(state.rounds) + 1
    form_path = ws.file(f"adjudication.round{round_number}.form.csv")
    adjudication.write_form_csv(rows, form_path)
    adjudication.save_state(state, ws.file("state.json"))
    log.info("emitted adjudication form with %d rows -> %s", len(rows), form_path)
    return form_path


def stage_adjudicate_apply(ws: Workspace, form_path: Path, now: datetime) -> None:
    ws.prepare()
    _, registry, state = ws.load_registry()
    rows = adjudication.read_form_csv(_require_file(form_path, "filled form"))
    record, stubs = adjudication.apply_form(rows, registry, state, now)
    adjudication.save_state(state, ws.file("state.json"))
    if stubs:
        stub_path = ws.file(f"followup_rules.round{record.round_number}.json")
        adjudication.write_rule_stubs(stubs, stub_path)
        log.info("wrote %d follow-up rule stubs -> %s", len(stubs), stub_path)
    tally = {}
    for outcome in record.outcomes.values():
        tally[outcome] = tally.get(outcome, 0) + 1
    log.info("applied round %d: %s", record.round_number, tally)


def stage_summarize(ws: Workspace) -> dict:
    ws.prepare()
    _groupers, registry, state = ws.load_registry()
    checks_by_kind: dict[str, int] = {}
    checks_path = ws.file("checks.json")
    if checks_path.exists():
        _specs, results = checks.load_checks(checks_path)
        for result in results:
            checks_by_kind[result.kind] = checks_by_kind.get(result.kind, 0) + 1
        checks_by_kind["total"] = len(results)
    reports_generated = len(list(ws.base.glob("*.report.json")))
    summary = adjudication.summarize_impact(
        state,
        groupers_used=len(_groupers),
        checks_by_kind=checks_by_kind,
        reports_generated=reports_generated,
        people_notes=ws.cfg.people_notes,
    )
    with open(ws.file("impact.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    text = adjudication.render_impact_text(summary)
    ws.file("impact.txt").write_text(text, encoding="utf-8")
    log.info("impact summary -> %s", ws.file("impact.json"))
    return summary


# --- argument parsing ---------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="project config file (JSON or TOML)")
    parser.add_argument("--out", default="out", help="artifact output directory")


def _parse_now(value: str | None) -> datetime:
    if value is None:
        return datetime.now(UTC)
    return parse_iso_utc(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dqakit",
        description="Data quality assurance pipeline over a project directory.",
    )
    sub = parser.add_subparsers(dest="command")

    for name, help_text in (
        ("ingest", "parse observation CSVs into a validated store"),
        ("group", "apply groupers (entity resolution) to the ingested store"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("metadata", help="curate grouper-building metadata tables")
    _add_common(p)
    p.add_argument("--category", action="append", help="restrict to a category (repeatable)")

    p = sub.add_parser("transform", help="apply the rules library to the grouped store")
    _add_common(p)
    p.add_argument("--extra-rules", action="append", default=[], help="additional rules file (repeatable)")

    p = sub.add_parser("check", help="assign and run quality checks")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for check execution")

    p = sub.add_parser("report", help="render JSON + HTML quality reports")
    _add_common(p)
    p.add_argument("--now", help="inject the generated_at instant (ISO-8601)")

    p = sub.add_parser("adjudicate", help="adjudication form round-trip")
    adj = p.add_subparsers(dest="adjudicate_command")
    pe = adj.add_parser("emit", help="emit a blank adjudication form for pending elements")
    _add_common(pe)
    pa = adj.add_parser("apply", help="apply a filled adjudication form")
    _add_common(pa)
    pa.add_argument("--form", required=True, help="filled form CSV")
    pa.add_argument("--now", help="inject the round timestamp (ISO-8601)")

    p = sub.add_parser("summarize", help="write the impact summary")
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic cohort with injected flaws")
    p.add_argument("--spec", required=True, help="synth spec JSON")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="override the spec seed")

    p = sub.add_parser("pipeline", help="run ingest -> group -> transform -> check -> report")
    _add_common(p)
    p.add_argument("--now", help="inject the generated_at instant (ISO-8601)")
    p.add_argument("--seed", type=int, help="recorded for provenance; synth uses it")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--extra-rules", action="append", default=[])

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; map to the validation exit code.
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    if args.command == "adjudicate" and args.adjudicate_command is None:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION

    try:
        return _dispatch(args)
    except (DqaError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


def _dispatch(args) -> int:
    if args.command == "synth":
        spec = synth.load_synth_spec(args.spec)
        if args.seed is not None:
            spec = synth.SynthSpec(
                project_name=spec.project_name,
                patients=spec.patients,
                start_date=spec.start_date,
                end_date=spec.end_date,
                seed=args.seed,
                elements=spec.elements,
                flaws=spec.flaws,
            )
        result = synth.generate(spec)
        obs, ledger, manifest = synth.write_outputs(result, args.out)
        log.info("synth: %d rows, %d ledger entries -> %s", len(result.rows), len(result.ledger), obs)
        return EXIT_OK

    cfg = load_config(args.config)
    ws = Workspace(cfg, Path(args.out))

    if args.command == "ingest":
        stage_ingest(ws)
    elif args.command == "metadata":
        stage_metadata(ws, args.category)
    elif args.command == "group":
        stage_group(ws)
    elif args.command == "transform":
        stage_transform(ws, args.extra_rules)
    elif args.command == "check":
        stage_check(ws, jobs=args.jobs)
    elif args.command == "report":
        stage_report(ws, _parse_now(args.now))
    elif args.command == "adjudicate":
        if args.adjudicate_command == "emit":
            stage_adjudicate_emit(ws)
        else:
            stage_adjudicate_apply(ws, Path(args.form), _parse_now(args.now))
    elif args.command == "summarize":
        stage_summarize(ws)
    elif args.command == "pipeline":
        stage_ingest(ws)
        stage_group(ws)
        stage_transform(ws, args.extra_rules)
        stage_check(ws, jobs=args.jobs)
        stage_report(ws, _parse_now(args.now))
    else:  # pragma: no cover - argparse prevents this
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
