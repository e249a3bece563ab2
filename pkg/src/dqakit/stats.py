"""Numeric parsing and exact nearest-rank summary statistics.

Quantiles use the nearest-rank method (no interpolation) with integer rank
arithmetic so results are reproducible bit-for-bit across platforms.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from statistics import fmean, stdev

# Plain decimal or scientific literal; commas allowed only as thousands groups.
_PLAIN = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_GROUPED = re.compile(r"[+-]?\d{1,3}(?:,\d{3})+(?:\.\d+)?")


def parse_numeric(text: str | None) -> float | None:
    """Parse a numeric string, returning None for anything non-numeric.

    Accepts surrounding whitespace and comma thousands separators; rejects
    inf/nan and underscore-separated literals.
    """
    if text is None:
        return None
    s = text.strip()
    if not s:
        return None
    if "," in s:
        if not _GROUPED.fullmatch(s):
            return None
        s = s.replace(",", "")
    elif not _PLAIN.fullmatch(s):
        return None
    try:
        value = float(s)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def format_number(value: float) -> str:
    """Canonical compact rendering used when a rule rewrites a stored value."""
    value = float(value)
    if value == 0:
        value = 0.0  # avoid "-0"
    return format(value, ".12g")


def freq_table(values) -> list[tuple[str, int]]:
    """Frequency table sorted by descending count, ties broken lexicographically."""
    counts = Counter(values)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def top_k(values, k: int) -> list[tuple[str, int]]:
    if k < 1:
        raise ValueError("k must be positive")
    return freq_table(values)[:k]


def nearest_rank_sorted(sorted_values, num: int, den: int):
    """Nearest-rank quantile at p = num/den over an ascending sequence.

    rank = ceil(p * n) computed in integer arithmetic; p = 0 yields the minimum.
    """
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no values")
    rank = -((-num * n) // den)
    rank = min(max(rank, 1), n)
    return sorted_values[rank - 1]


def deciles(values) -> list[float]:
    """11-point nearest-rank decile vector at p = 0.0, 0.1, ..., 1.0."""
    ordered = sorted(values)
    if not ordered:
        return []
    return [ordered[0]] + [nearest_rank_sorted(ordered, i, 10) for i in range(1, 11)]


def box_stats(values) -> dict:
    """Five-number summary with nearest-rank quartiles; {"n": 0} when empty."""
    ordered = sorted(values)
    if not ordered:
        return {"n": 0}
    return {
        "n": len(ordered),
        "min": ordered[0],
        "q1": nearest_rank_sorted(ordered, 1, 4),
        "median": nearest_rank_sorted(ordered, 1, 2),
        "q3": nearest_rank_sorted(ordered, 3, 4),
        "max": ordered[-1],
    }


def mean_sd(values) -> tuple[float | None, float | None]:
    """Mean and sample standard deviation; sd is None below two values."""
    ordered = list(values)
    if not ordered:
        return None, None
    mean = fmean(ordered)
    sd = stdev(ordered) if len(ordered) >= 2 else None
    return mean, sd
