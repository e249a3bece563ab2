"""Timestamp parsing and UTC normalization.

All instants stored by the engine are timezone-aware UTC datetimes. Input
timestamps without an offset are interpreted in a configured site zone;
ambiguous wall-clock times during a backward clock change resolve to the
earlier offset and are reported as warnings.
"""

from __future__ import annotations

from datetime import date, datetime, timedelta, timezone
from zoneinfo import ZoneInfo

UTC = timezone.utc


class TimestampError(ValueError):
    """Raised when a timestamp string cannot be parsed."""


def _site_zone(site_tz) -> ZoneInfo:
    if isinstance(site_tz, str):
        try:
            return ZoneInfo(site_tz)
        except Exception as exc:
            raise TimestampError(f"unknown timezone {site_tz!r}") from exc
    return site_tz


def parse_instant(text: str, site_tz="UTC") -> tuple[datetime, str | None]:
    """Parse an ISO-8601 timestamp into a UTC instant.

    Naive timestamps are localized to ``site_tz``. Returns ``(instant, warning)``
    where warning is "ambiguous_local_time" or "nonexistent_local_time" when the
    wall-clock time falls on a DST transition, else None.
    """
    raw = text.strip()
    if not raw:
        raise TimestampError("empty timestamp")
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError as exc:
        raise TimestampError(f"unparseable timestamp {text!r}") from exc

    warning = None
    if dt.tzinfo is None:
        tz = _site_zone(site_tz)
        early = dt.replace(tzinfo=tz, fold=0)
        late = dt.replace(tzinfo=tz, fold=1)
        if early.utcoffset() != late.utcoffset():
            # Repeated hour (fall back): keep the earlier offset, flag it.
            warning = "ambiguous_local_time"
        dt = early
        if warning is None:
            round_trip = dt.astimezone(UTC).astimezone(tz).replace(tzinfo=None)
            if round_trip != early.replace(tzinfo=None):
                # Skipped hour (spring forward): the wall time never existed.
                warning = "nonexistent_local_time"
    return dt.astimezone(UTC), warning


def iso_utc(dt: datetime) -> str:
    """Render an aware datetime as an ISO-8601 UTC instant with a Z suffix."""
    return dt.astimezone(UTC).isoformat().replace("+00:00", "Z")


def parse_iso_utc(text: str) -> datetime:
    """Parse an ISO-8601 instant; naive input is taken as already-UTC."""
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=UTC)
    return dt.astimezone(UTC)


def parse_date(text: str) -> date:
    return date.fromisoformat(text.strip())


def month_key(dt: datetime) -> str:
    """UTC calendar month bucket, e.g. "2019-03"."""
    dt = dt.astimezone(UTC)
    return f"{dt.year:04d}-{dt.month:02d}"


def month_range(start: date, end: date) -> list[str]:
    """Contiguous list of month keys covering [start, end]."""
    if start > end:
        raise ValueError("start after end")
    months = []
    year, month = start.year, start.month
    while (year, month) <= (end.year, end.month):
        months.append(f"{year:04d}-{month:02d}")
        month += 1
        if month > 12:
            month, year = 1, year + 1
    return months


def month_end(key: str) -> date:
    """Last calendar day of a "YYYY-MM" month key."""
    year, month = int(key[:4]), int(key[5:7])
    if month == 12:
        return date(year, 12, 31)
    return date(year, month + 1, 1) - timedelta(days=1)
