"""Time-window algebra over integer UNIX seconds.

Windows are half-open ``[start, end)``.  An :class:`IntervalSet` is kept in
canonical form: sorted, pairwise disjoint, with touching windows merged.
"""

from __future__ import annotations

import re
from bisect import bisect_right
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta, timezone
from typing import Iterable, Iterator, Sequence
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

import numpy as np

__all__ = [
    "TemporalError",
    "ExpansionTooLarge",
    "TimeWindow",
    "IntervalSet",
    "RecurrenceRule",
    "WEEKDAYS",
    "expand_recurrence",
    "intersect",
    "union",
    "subtract",
    "parse_clock",
    "resolve_timezone",
    "DEFAULT_EXPANSION_CAP",
]

WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
DEFAULT_EXPANSION_CAP = 10 * 366 * 86400


class TemporalError(ValueError):
    pass


class ExpansionTooLarge(TemporalError):
    pass


@dataclass(frozen=True, order=True)
class TimeWindow:
    start: int
    end: int

    def __post_init__(self):
        for name in ("start", "end"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise TemporalError(f"window {name} must be integer seconds, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.start >= self.end:
            raise TemporalError(f"window start {self.start} must precede end {self.end}")

    def __contains__(self, t: int) -> bool:
        return self.start <= t < self.end

    @property
    def duration(self) -> int:
        return self.end - self.start

    def to_json(self) -> dict[str, int]:
        return {"start": self.start, "end": self.end}

    @classmethod
    def from_json(cls, obj: dict) -> "TimeWindow":
        try:
            return cls(obj["start"], obj["end"])
        except (KeyError, TypeError):
            raise TemporalError(f"time window must be {{'start': int, 'end': int}}, got {obj!r}") from None


class IntervalSet:
    """Immutable canonical set of half-open windows."""

    __slots__ = ("windows", "_starts")

    def __init__(self, windows: Iterable[TimeWindow | tuple[int, int]] = ()):
        ws = sorted(w if isinstance(w, TimeWindow) else TimeWindow(*w) for w in windows)
        merged: list[TimeWindow] = []
        for w in ws:
            if merged and w.start <= merged[-1].end:
                if w.end > merged[-1].end:
                    merged[-1] = TimeWindow(merged[-1].start, w.end)
            else:
                merged.append(w)
        self.windows: tuple[TimeWindow, ...] = tuple(merged)
        self._starts = [w.start for w in merged]

    @classmethod
    def _trusted(cls, windows: list[TimeWindow]) -> "IntervalSet":
        obj = cls.__new__(cls)
        obj.windows = tuple(windows)
        obj._starts = [w.start for w in windows]
        return obj

    def __iter__(self) -> Iterator[TimeWindow]:
        return iter(self.windows)

    def __len__(self) -> int:
        return len(self.windows)

    def __bool__(self) -> bool:
        return bool(self.windows)

    def __eq__(self, other):
        if not isinstance(other, IntervalSet):
            return NotImplemented
        return self.windows == other.windows

    def __hash__(self):
        return hash(self.windows)

    def __repr__(self):
        body = ", ".join(f"({w.start},{w.end})" for w in self.windows[:6])
        more = f", ...{len(self.windows) - 6} more" if len(self.windows) > 6 else ""
        return f"IntervalSet([{body}{more}])"

    def __contains__(self, t: int) -> bool:
        i = bisect_right(self._starts, t) - 1
        return i >= 0 and t < self.windows[i].end

    def contains_many(self, ts) -> np.ndarray:
        """Vectorised membership for an array of timestamps."""
        ts = np.asarray(ts, dtype=np.int64)
        if not self.windows:
            return np.zeros(ts.shape, dtype=bool)
        starts = np.fromiter(self._starts, dtype=np.int64, count=len(self._starts))
        ends = np.fromiter((w.end for w in self.windows), dtype=np.int64, count=len(self.windows))
        i = np.searchsorted(starts, ts, side="right") - 1
        ok = i >= 0
        return ok & (ts < ends[np.maximum(i, 0)])

    @property
    def span(self) -> TimeWindow | None:
        if not self.windows:
            return None
        return TimeWindow(self.windows[0].start, self.windows[-1].end)

    @property
    def total(self) -> int:
        return sum(w.duration for w in self.windows)

    def intersect(self, other: "IntervalSet") -> "IntervalSet":
        return intersect(self, other)

    def union(self, other: "IntervalSet") -> "IntervalSet":
        return union(self, other)

    def subtract(self, other: "IntervalSet") -> "IntervalSet":
        return subtract(self, other)

    __and__ = intersect
    __or__ = union
    __sub__ = subtract

    def to_json(self) -> list[dict[str, int]]:
        return [w.to_json() for w in self.windows]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "IntervalSet":
        return cls(TimeWindow.from_json(x) for x in items)


def intersect(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    out: list[TimeWindow] = []
    i = j = 0
    aw, bw = a.windows, b.windows
    while i < len(aw) and j < len(bw):
        lo = max(aw[i].start, bw[j].start)
        hi = min(aw[i].end, bw[j].end)
        if lo < hi:
            out.append(TimeWindow(lo, hi))
        if aw[i].end < bw[j].end:
            i += 1
        else:
            j += 1
    return IntervalSet._trusted(out)


def union(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    if not a:
        return b
    if not b:
        return a
    return IntervalSet(a.windows + b.windows)


def subtract(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    out: list[TimeWindow] = []
    bw = b.windows
    j = 0
    for w in a.windows:
        cur = w.start
        while j < len(bw) and bw[j].end <= cur:
            j += 1
        k = j
        while k < len(bw) and bw[k].start < w.end:
            if bw[k].start > cur:
                out.append(TimeWindow(cur, bw[k].start))
            cur = max(cur, bw[k].end)
            k += 1
        if cur < w.end:
            out.append(TimeWindow(cur, w.end))
    return IntervalSet._trusted(out)


# ---------------------------------------------------------------------------
# recurrence

_CLOCK = re.compile(r"^\s*(\d{1,2})(?::(\d{2}))?\s*([AaPp][Mm])?\s*$")


def parse_clock(text: str) -> time:
    """Parse ``9AM``, ``5:30pm`` or ``17:00`` into a wall-clock time."""
    m = _CLOCK.match(text)
    if not m:
        raise TemporalError(f"unrecognised clock time {text!r}")
    hour, minute, ampm = int(m.group(1)), int(m.group(2) or 0), m.group(3)
    if minute > 59:
        raise TemporalError(f"bad minutes in {text!r}")
    if ampm:
        if not 1 <= hour <= 12:
            raise TemporalError(f"bad 12-hour clock value {text!r}")
        hour = hour % 12 + (12 if ampm.lower() == "pm" else 0)
    elif hour > 23:
        raise TemporalError(f"bad hour in {text!r}")
    return time(hour, minute)


def resolve_timezone(name: str):
    if name.upper() == "UTC":
        return timezone.utc
    try:
        return ZoneInfo(name)
    except (ZoneInfoNotFoundError, ValueError):
        raise TemporalError(f"unknown timezone {name!r}") from None


@dataclass(frozen=True)
class RecurrenceRule:
    """Daily wall-clock window repeated on every non-excluded weekday."""

    daily_start: time
    daily_end: time
    excluded_weekdays: frozenset[str] = frozenset()
    timezone: str = "UTC"

    def __post_init__(self):
        if not self.daily_start < self.daily_end:
            raise TemporalError("daily start must be earlier than daily end")
        days = frozenset(d.lower() for d in self.excluded_weekdays)
        bad = days - set(WEEKDAYS)
        if bad:
            raise TemporalError(f"unknown weekday(s): {sorted(bad)}")
        object.__setattr__(self, "excluded_weekdays", days)
        resolve_timezone(self.timezone)

    @classmethod
    def from_json(cls, obj: dict) -> "RecurrenceRule":
        span = obj.get("RepeatedHour")
        if not isinstance(span, str) or "-" not in span:
            raise TemporalError("RepeatedHour must look like '9AM-5PM'")
        lo, hi = span.split("-", 1)
        excl = obj.get("ExcludeDay", [])
        if isinstance(excl, str):
            excl = [excl]
        if not isinstance(excl, list) or not all(isinstance(d, str) for d in excl):
            raise TemporalError("ExcludeDay must be a list of weekday names")
        tz = obj.get("Timezone", "UTC")
        if not isinstance(tz, str):
            raise TemporalError("Timezone must be a string")
        return cls(parse_clock(lo), parse_clock(hi), frozenset(excl), tz)

    def to_json(self) -> dict:
        def fmt(t: time) -> str:
            h = t.hour % 12 or 12
            suffix = "AM" if t.hour < 12 else "PM"
            return f"{h}{suffix}" if not t.minute else f"{h}:{t.minute:02d}{suffix}"

        out = {
            "RepeatedHour": f"{fmt(self.daily_start)}-{fmt(self.daily_end)}",
            "ExcludeDay": [d for d in WEEKDAYS if d in self.excluded_weekdays],
        }
        if self.timezone != "UTC":
            out["Timezone"] = self.timezone
        return out


def _ts(d: date, t: time, tz) -> int:
    return int(datetime.combine(d, t, tzinfo=tz).timestamp())


def expand_recurrence(
    rule: RecurrenceRule, span: TimeWindow, cap: int = DEFAULT_EXPANSION_CAP
) -> IntervalSet:
    """One window per allowed local calendar day meeting ``span``, clipped to it."""
    if span.duration > cap:
        raise ExpansionTooLarge(f"span of {span.duration}s exceeds expansion cap {cap}s")
    tz = resolve_timezone(rule.timezone)
    first = datetime.fromtimestamp(span.start, tz).date() - timedelta(days=1)
    last = datetime.fromtimestamp(span.end, tz).date()
    allowed = [name not in rule.excluded_weekdays for name in WEEKDAYS]
    out: list[TimeWindow] = []
    d = first
    while d <= last:
        if allowed[d.weekday()]:
            lo = max(_ts(d, rule.daily_start, tz), span.start)
            hi = min(_ts(d, rule.daily_end, tz), span.end)
            if lo < hi:
                out.append(TimeWindow(lo, hi))
        d += timedelta(days=1)
    return IntervalSet(out)
