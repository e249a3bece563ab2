"""Deterministic quality report rendering: canonical JSON plus standalone HTML.

Reports are grouped by report category (Analytes, Encounters, Flowsheets,
Medications, ...) with one section per element, checks ordered conformance ->
completeness -> plausibility. JSON serialization is canonical: sorted keys,
floats fixed to 6 significant digits, byte-identical across runs given the
same inputs and an injected timestamp. HTML output is one self-contained file
with inline styles and inline SVG charts, no network resources.
"""

from __future__ import annotations

import html
import json
from datetime import datetime
from pathlib import Path

from .checks import CHECK_KINDS
from .model import DqaError, ElementCategory, ElementRegistry
from .timeutil import iso_utc

REPORT_CATEGORIES: dict[str, ElementCategory] = {
    "Analytes": ElementCategory.ANALYTE,
    "Flowsheets": ElementCategory.FLOWSHEET,
    "Medications": ElementCategory.MEDICATION,
    "Encounters": ElementCategory.ENCOUNTER,
    "Orders": ElementCategory.ORDER,
    "Comorbidities": ElementCategory.COMORBIDITY,
    "Demographics": ElementCategory.DEMOGRAPHIC,
}

DEFAULT_REPORT_SET = ("Analytes", "Encounters", "Flowsheets", "Medications")


class ReportCoverageError(DqaError):
    """An included element is missing results for one of its assigned checks."""


def _round_floats(value):
    if isinstance(value, float):
        return float(format(value, ".6g"))
    if isinstance(value, dict):
        return {k: _round_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_floats(v) for v in value]
    return value


def canonical_json(doc) -> str:
    """Serialize with stable key order and 6-significant-digit floats."""
    return json.dumps(_round_floats(doc), sort_keys=True, indent=2, ensure_ascii=True) + "\n"


def build_report(
    results,
    registry: ElementRegistry,
    category_name: str,
    project_name: str,
    generated_at: datetime,
    specs=None,
) -> dict:
    """Assemble the QualityReport document for one report category.

    Every non-excluded element of the category must have a result for each of
    its assigned checks (coverage violation is fatal). Elements are sorted by
    name; ``generated_at`` is injectable so golden-file tests are stable.
    """
    if category_name not in REPORT_CATEGORIES:
        raise DqaError(f"unknown report category {category_name!r}")
    category = REPORT_CATEGORIES[category_name]

    by_id = {r.check_id: r for r in results}
    elements = [el for el in registry.active() if el.category == category]

    spec_list = specs
    if spec_list is None:
        from .checks import assign_checks

        spec_list = assign_checks(registry)

    sections = []
    for element in elements:
        grouped: dict[str, list] = {kind: [] for kind in CHECK_KINDS}
        for spec in spec_list:
            if spec.element_name != element.name:
                continue
            result = by_id.get(spec.check_id)
            if result is None:
                raise ReportCoverageError(
                    f"element {element.name} missing result for check {spec.check_id}"
                )
            grouped[spec.kind].append(result.to_dict())
        sections.append(
            {
                "name": element.name,
                "category": element.category.value,
                "value_kind": element.value_kind,
                "reference_unit": element.reference_unit,
                "status": element.status,
                "checks": grouped,
            }
        )

    return {
        "project_name": project_name,
        "report_category": category_name,
        "generated_at": iso_utc(generated_at),
        "elements": sections,
    }


# --- HTML rendering ------------------------------------------------------------

_STYLE = """
body { font-family: system-ui, sans-serif; margin: 2em auto; max-width: 72em; color: #222; }
h1 { border-bottom: 2px solid #446; padding-bottom: 0.2em; }
section.element { border: 1px solid #ccd; border-radius: 6px; padding: 0 1em 1em; margin: 1.5em 0; }
section.check { margin: 0.8em 0; }
table { border-collapse: collapse; margin: 0.4em 0; }
th, td { border: 1px solid #bbc; padding: 0.15em 0.6em; text-align: left; font-size: 0.9em; }
th { background: #eef; }
.meta { color: #666; font-size: 0.9em; }
.status-empty { color: #a60; }
.status-warning { color: #a00; font-weight: bold; }
svg { background: #fafaff; border: 1px solid #dde; margin: 0.3em 0; }
"""


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def _esc(value) -> str:
    return html.escape(_fmt(value))


def _table(headers, rows) -> str:
    head = "".join(f"<th>{_esc(h)}</th>" for h in headers)
    body = "".join(
        "<tr>" + "".join(f"<td>{_esc(cell)}</td>" for cell in row) + "</tr>" for row in rows
    )
    return f"<table><tr>{head}</tr>{body}</table>"


def _svg_open(kind: str, width: int, height: int) -> str:
    return (
        f'<svg data-kind="{kind}" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" xmlns="http://www.w3.org/2000/svg">'
    )


_W, _H, _PAD = 560, 140, 24


def _scale(values) -> float:
    peak = max((v for v in values if v is not None), default=0)
    return max(peak, 1)


def _x(i: int, n: int) -> float:
    span = _W - 2 * _PAD
    return _PAD + (span * i / max(n - 1, 1))


def _y(v: float, peak: float) -> float:
    span = _H - 2 * _PAD
    return _H - _PAD - (span * v / peak)


_PALETTE = ("#345", "#c44", "#383", "#86c", "#a80", "#08a", "#d6a", "#664")


def _svg_line_chart(kind, labels, series_list, names=None) -> str:
    """Polyline chart; all-zero series still draw a flat baseline line."""
    peak = _scale([v for series in series_list for v in series])
    parts = [_svg_open(kind, _W, _H)]
    parts.append(
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="#999"/>'
    )
    for idx, series in enumerate(series_list):
        color = _PALETTE[idx % len(_PALETTE)]
        points = " ".join(
            f"{_x(i, len(series)):.1f},{_y(v, peak):.1f}" for i, v in enumerate(series)
        )
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        if names:
            parts.append(
                f'<text x="{_W - _PAD + 2}" y="{_PAD + 12 * idx}" font-size="9" '
                f'fill="{color}">{_esc(names[idx])}</text>'
            )
    if labels:
        parts.append(
            f'<text x="{_PAD}" y="{_H - 6}" font-size="9" fill="#555">{_esc(labels[0])}</text>'
        )
        parts.append(
            f'<text x="{_W - _PAD}" y="{_H - 6}" font-size="9" fill="#555" '
            f'text-anchor="end">{_esc(labels[-1])}</text>'
        )
    parts.append(
        f'<text x="4" y="{_PAD}" font-size="9" fill="#555">{_fmt(float(peak))}</text>'
    )
    parts.append("</svg>")
    return "".join(parts)


def _svg_bar_chart(kind, labels, counts) -> str:
    peak = _scale(counts)
    n = len(counts)
    span = _W - 2 * _PAD
    bar = span / max(n, 1)
    parts = [_svg_open(kind, _W, _H)]
    for i, v in enumerate(counts):
        x0 = _PAD + i * bar
        y0 = _y(v, peak)
        parts.append(
            f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{max(bar - 1, 1):.1f}" '
            f'height="{_H - _PAD - y0:.1f}" fill="#569"/>'
        )
    if labels:
        parts.append(f'<text x="{_PAD}" y="{_H - 6}" font-size="9" fill="#555">{_esc(labels[0])}</text>')
        parts.append(
            f'<text x="{_W - _PAD}" y="{_H - 6}" font-size="9" fill="#555" '
            f'text-anchor="end">{_esc(labels[-1])}</text>'
        )
    parts.append(f'<text x="4" y="{_PAD}" font-size="9" fill="#555">{_fmt(float(peak))}</text>')
    parts.append("</svg>")
    return "".join(parts)


def _svg_box_chart(kind, months, stats) -> str:
    """Box plots from five-number summaries only; empty months leave gaps."""
    peaks = [s.get("max") for s in stats if s.get("n", 0) > 0]
    lows = [s.get("min") for s in stats if s.get("n", 0) > 0]
    peak = max(peaks, default=1)
    low = min(lows, default=0)
    if peak == low:
        peak = low + 1
    span = _H - 2 * _PAD

    def y(v):
        return _H - _PAD - span * (v - low) / (peak - low)

    n = len(months)
    step = (_W - 2 * _PAD) / max(n, 1)
    parts = [_svg_open(kind, _W, _H)]
    for i, s in enumerate(stats):
        if s.get("n", 0) == 0:
            continue
        cx = _PAD + step * (i + 0.5)
        half = min(step * 0.3, 12)
        parts.append(
            f'<line x1="{cx:.1f}" y1="{y(s["min"]):.1f}" x2="{cx:.1f}" y2="{y(s["max"]):.1f}" stroke="#345"/>'
        )
        top, bottom = y(s["q3"]), y(s["q1"])
        parts.append(
            f'<rect x="{cx - half:.1f}" y="{top:.1f}" width="{2 * half:.1f}" '
            f'height="{max(bottom - top, 0.5):.1f}" fill="#bcd" stroke="#345"/>'
        )
        parts.append(
            f'<line x1="{cx - half:.1f}" y1="{y(s["median"]):.1f}" x2="{cx + half:.1f}" '
            f'y2="{y(s["median"]):.1f}" stroke="#a22" stroke-width="1.5"/>'
        )
    if months:
        parts.append(f'<text x="{_PAD}" y="{_H - 6}" font-size="9" fill="#555">{_esc(months[0])}</text>')
        parts.append(
            f'<text x="{_W - _PAD}" y="{_H - 6}" font-size="9" fill="#555" '
            f'text-anchor="end">{_esc(months[-1])}</text>'
        )
    parts.append(f'<text x="4" y="{_PAD}" font-size="9" fill="#555">{_fmt(float(peak))}</text>')
    parts.append("</svg>")
    return "".join(parts)


def _render_payload(result: dict) -> str:
    subtype = result["subtype"]
    kind = result["kind"]
    payload = result["payload"]

    if subtype in (
        "unit_frequency",
        "specimen_frequency",
        "string_frequency",
        "mar_action_frequency",
        "raw_name_frequency",
    ):
        rows = [[value or "(empty)", count] for value, count in payload["table"]]
        return _table(["value", "count"], rows)

    if subtype == "value_deciles":
        labels = [f"p{i * 10}" for i in range(11)]
        decs = payload["deciles"]
        summary = f"<p class=\"meta\">n={_fmt(payload['n'])}"
        if payload.get("mean") is not None:
            summary += f", mean={_fmt(payload['mean'])}"
        if payload.get("sd") is not None:
            summary += f", sd={_fmt(payload['sd'])}"
        summary += "</p>"
        if not decs:
            return summary + "<p class=\"meta\">no numeric values</p>"
        return summary + _table(labels, [decs])

    if subtype == "total_count":
        return f"<p>total records: <b>{_fmt(payload['count'])}</b></p>"

    if subtype == "patient_proportion":
        return (
            f"<p>patients with data: <b>{_fmt(payload['numerator'])}</b> of "
            f"{_fmt(payload['denominator'])} ({_fmt(payload['proportion'] * 100)}%)</p>"
        )

    if subtype == "per_patient_histogram":
        labels = [b[0] for b in payload["bins"]]
        counts = [b[1] for b in payload["bins"]]
        return _svg_bar_chart(kind, labels, counts)

    if subtype == "monthly_counts":
        chart = _svg_line_chart(kind, payload["months"], [payload["counts"]])
        extra = ""
        if payload.get("out_of_range"):
            extra = f"<p class=\"meta\">{payload['out_of_range']} records outside cohort months</p>"
        return chart + extra

    if subtype in ("monthly_value_boxstats", "monthly_per_patient_boxstats"):
        return _svg_box_chart(kind, payload["months"], payload["stats"])

    if subtype == "monthly_category_lines":
        names = [line[0] or "(empty)" for line in payload["lines"]]
        series = [line[1] for line in payload["lines"]]
        if not series:
            series = [[0] * len(payload["months"])]
            names = ["(no values)"]
        return _svg_line_chart(kind, payload["months"], series, names)

    if subtype == "association":
        rows = [
            ["high side", payload["high"].get("n"), payload["high"].get("rate")],
            ["low side", payload["low"].get("n"), payload["low"].get("rate")],
        ] if "high" in payload else []
        meta = (
            f"<p>factor <b>{_esc(payload['factor_element'])}</b> vs outcome "
            f"<b>{_esc(payload['outcome_element'])}</b>, expected direction "
            f"{_esc(payload['direction'])}</p>"
        )
        return meta + (_table(["group", "patients", "outcome rate"], rows) if rows else "")

    # Unknown subtype: render the payload as a raw key/value table.
    return _table(["field", "value"], [[k, json.dumps(v)] for k, v in sorted(payload.items())])


def render_html(report: dict) -> str:
    """Render a report document as one self-contained HTML page.

    Every check result in the JSON appears exactly once, tagged with its
    check id; charts carry a data-kind attribute naming their check kind.
    """
    out = [
        "<!DOCTYPE html>",
        '<html lang="en"><head><meta charset="utf-8"/>',
        f"<title>{_esc(report['project_name'])} - {_esc(report['report_category'])}</title>",
        f"<style>{_STYLE}</style></head><body>",
        f"<h1>{_esc(report['report_category'])} quality report</h1>",
        f"<p class=\"meta\">project {_esc(report['project_name'])} &middot; generated "
        f"{_esc(report['generated_at'])} &middot; {len(report['elements'])} elements</p>",
    ]
    for element in report["elements"]:
        out.append(f'<section class="element" id="el-{_esc(element["name"])}">')
        out.append(f"<h2>{_esc(element['name'])}</h2>")
        meta = f"{element['category']}/{element['value_kind']}"
        if element.get("reference_unit"):
            meta += f" &middot; reference unit {_esc(element['reference_unit'])}"
        meta += f" &middot; status {_esc(element['status'])}"
        out.append(f'<p class="meta">{meta}</p>')
        for kind in CHECK_KINDS:
            results = element["checks"].get(kind, [])
            if not results:
                continue
            out.append(f"<h3>{kind.capitalize()}</h3>")
            for result in results:
                status = result["status"]
                badge = (
                    f' <span class="status-{status}">[{status}]</span>' if status != "ok" else ""
                )
                out.append(
                    f'<section class="check" data-check-id="{_esc(result["check_id"])}">'
                    f"<h4>{_esc(result['subtype'])}{badge}</h4>"
                )
                out.append(_render_payload(result))
                out.append("</section>")
        out.append("</section>")
    out.append("</body></html>")
    return "\n".join(out) + "\n"


def write_report_pair(report: dict, out_dir: str | Path) -> tuple[Path, Path]:
    """Write {category}.report.json and .report.html under out_dir/{project}/."""
    base = Path(out_dir) / report["project_name"]
    base.mkdir(parents=True, exist_ok=True)
    json_path = base / f"{report['report_category']}.report.json"
    html_path = base / f"{report['report_category']}.report.html"
    json_path.write_text(canonical_json(report), encoding="utf-8")
    html_path.write_text(render_html(report), encoding="utf-8")
    return json_path, html_path
