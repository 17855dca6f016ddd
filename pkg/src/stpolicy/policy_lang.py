"""Construct-chain policy language and per-owner keyword registry.

A policy is a dot-separated chain of constructs, each with a comma-separated
argument list::

    What(d_h).Where(LA, NOT HOME).When(WorkingHours).How(Hour).Whom(u_b).Who(DenyDataSharing)

Grammar::

    policy    := construct ("." construct)+
    construct := NAME "(" arg ("," arg)* ")"
    arg       := ["NOT" ws] (IDENT | QUOTED)

Construct names are case-insensitive and may appear in any order.  Quoted
arguments are only meaningful in ``When`` where they denote an inclusive date
range ``"M/D/YYYY-M/D/YYYY"``.
"""

from __future__ import annotations

import calendar
import logging
import re
import threading
import warnings
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Mapping

from .geometry import GeometryError, Polygon, polygon_from_json
from .temporal import IntervalSet, RecurrenceRule, TemporalError, TimeWindow

log = logging.getLogger(__name__)

__all__ = [
    "PolicyError",
    "PolicySyntaxError",
    "KeywordError",
    "ResolveError",
    "PolicyWarning",
    "Term",
    "DateRange",
    "PolicyAst",
    "KeywordDef",
    "KeywordRegistry",
    "ResolvedPolicy",
    "parse_policy",
    "format_policy",
    "resolve_ast",
    "TIME_RESOLUTIONS",
    "SPACE_RESOLUTIONS",
    "SHARING_KEYWORDS",
    "RESERVED_KEYWORDS",
    "CONSTRUCTS",
]

CONSTRUCTS = ("What", "Where", "When", "How", "Whom", "Who")
TIME_RESOLUTIONS = ("Second", "Minute", "Hour", "Day", "Week", "Month", "Year")
SPACE_RESOLUTIONS = ("ZipCodes", "City", "County", "Country")
SHARING_KEYWORDS = ("AllowDataSharing", "DenyDataSharing", "PolicyUpdateEffect")
# singular spelling accepted for compatibility
_ALIASES = {"zipcode": "ZipCodes"}

_CANON = {k.lower(): k for k in TIME_RESOLUTIONS + SPACE_RESOLUTIONS + SHARING_KEYWORDS}
_CANON.update(_ALIASES)
RESERVED_KEYWORDS = frozenset({"not"} | set(_CANON))

_IDENT = re.compile(r"[A-Za-z0-9_$@:\-]+")
_NAME = re.compile(r"[A-Za-z]+")
_DATE_RANGE = re.compile(r"^\s*(\d{1,2})/(\d{1,2})/(\d{4})\s*-\s*(\d{1,2})/(\d{1,2})/(\d{4})\s*$")
_QUOTES = {'"': '"', "“": "”", "'": "'"}


class PolicyError(ValueError):
    """Base class for policy language errors."""


class PolicySyntaxError(PolicyError):
    def __init__(self, message: str, offset: int | None = None, construct: str | None = None):
        self.offset = offset
        self.construct = construct
        where = []
        if construct:
            where.append(f"in {construct}")
        if offset is not None:
            where.append(f"at byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class KeywordError(PolicyError):
    """Invalid keyword definition or registration."""


class ResolveError(PolicyError):
    def __init__(self, message: str, construct: str | None = None, name: str | None = None):
        self.construct = construct
        self.name = name
        super().__init__(message)


class PolicyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DateRange:
    """Inclusive calendar-date range written inline in ``When``."""

    start: date
    end: date

    def __str__(self):
        return f"{self.start.month}/{self.start.day}/{self.start.year}-{self.end.month}/{self.end.day}/{self.end.year}"


@dataclass(frozen=True)
class Term:
    name: str
    negated: bool = False
    literal: DateRange | None = None

    def __str__(self):
        body = f'"{self.literal}"' if self.literal is not None else self.name
        return f"NOT {body}" if self.negated else body


@dataclass(frozen=True)
class PolicyAst:
    what: tuple[str, ...]
    whom: tuple[str, ...]
    where: tuple[Term, ...] = ()
    when: tuple[Term, ...] = ()
    how: tuple[str, ...] = ()
    who: tuple[str, ...] = ()

    def __str__(self):
        return format_policy(self)


def format_policy(ast: PolicyAst) -> str:
    """Render in normalised construct order; parsing the output gives ``ast`` back."""
    parts = [f"What({', '.join(ast.what)})"]
    if ast.where:
        parts.append(f"Where({', '.join(map(str, ast.where))})")
    if ast.when:
        parts.append(f"When({', '.join(map(str, ast.when))})")
    if ast.how:
        parts.append(f"How({', '.join(ast.how)})")
    parts.append(f"Whom({', '.join(ast.whom)})")
    if ast.who:
        parts.append(f"Who({', '.join(ast.who)})")
    return ".".join(parts)


# ---------------------------------------------------------------------------
# parser


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.construct: str | None = None

    def offset(self, pos: int | None = None) -> int:
        return len(self.text[: self.pos if pos is None else pos].encode("utf-8"))

    def fail(self, message: str, pos: int | None = None):
        raise PolicySyntaxError(message, self.offset(pos), self.construct)

    def ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        self.ws()
        if self.peek() != ch:
            got = repr(self.peek()) if self.peek() else "end of input"
            self.fail(f"expected {ch!r}, got {got}")
        self.pos += 1

    def match(self, pattern: re.Pattern) -> str | None:
        m = pattern.match(self.text, self.pos)
        if not m:
            return None
        self.pos = m.end()
        return m.group(0)


def _parse_date_range(raw: str, sc: _Scanner, pos: int) -> DateRange:
    m = _DATE_RANGE.match(raw)
    if not m:
        sc.fail(f"malformed date range {raw!r}; expected M/D/YYYY-M/D/YYYY", pos)
    nums = [int(g) for g in m.groups()]
    dates = []
    for month, day, year in (nums[0:3], nums[3:6]):
        if not 1 <= month <= 12 or day < 1:
            sc.fail(f"invalid date {month}/{day}/{year} in {raw!r}", pos)
        last = calendar.monthrange(year, month)[1]
        if day > last:
            warnings.warn(
                f"date {month}/{day}/{year} does not exist; clamped to {month}/{last}/{year}",
                PolicyWarning,
                stacklevel=4,
            )
            day = last
        dates.append(date(year, month, day))
    if dates[0] > dates[1]:
        sc.fail(f"date range {raw!r} ends before it starts", pos)
    return DateRange(dates[0], dates[1])


def _parse_arg(sc: _Scanner) -> tuple[Term, int]:
    sc.ws()
    start = sc.pos
    negated = False
    word = sc.match(_IDENT)
    if word is not None and word.upper() == "NOT":
        before = sc.pos
        sc.ws()
        if sc.pos == before or sc.peek() in (",", ")", ""):
            sc.fail("NOT must be followed by a keyword", start)
        negated = True
        word = None
    if word is None:
        q = sc.peek()
        if q in _QUOTES:
            close = _QUOTES[q]
            end = sc.text.find(close, sc.pos + 1)
            if end < 0:
                sc.fail("unterminated quoted literal")
            raw = sc.text[sc.pos + 1 : end]
            lit_pos = sc.pos
            sc.pos = end + 1
            return Term(raw, negated, _parse_date_range(raw, sc, lit_pos)), start
        word_pos = sc.pos
        word = sc.match(_IDENT)
        if word is None:
            got = repr(sc.peek()) if sc.peek() else "end of input"
            sc.fail(f"expected an argument, got {got}")
        if word.upper() == "NOT":
            sc.fail("NOT cannot be applied twice", word_pos)
    return Term(word, negated), start


def parse_policy(text: str) -> PolicyAst:
    """Parse policy text into a :class:`PolicyAst`.

    Raises :class:`PolicySyntaxError` (with byte offset and construct name)
    for unknown or duplicated constructs, empty argument lists, misplaced
    NOT, malformed date literals, or a missing What/Whom.
    """
    if not isinstance(text, str) or not text.strip():
        raise PolicySyntaxError("policy text is empty")
    sc = _Scanner(text)
    seen: dict[str, tuple[list[tuple[Term, int]], int]] = {}
    while True:
        sc.ws()
        sc.construct = None
        name_pos = sc.pos
        name = sc.match(_NAME)
        if name is None:
            sc.fail("expected a construct name")
        canon = next((c for c in CONSTRUCTS if c.lower() == name.lower()), None)
        if canon is None:
            sc.fail(f"unknown construct {name!r}", name_pos)
        sc.construct = canon
        if canon in seen:
            sc.fail(f"duplicate construct {canon}", name_pos)
        sc.expect("(")
        sc.ws()
        if sc.peek() == ")":
            sc.fail("empty argument list")
        args = [_parse_arg(sc)]
        while True:
            sc.ws()
            if sc.peek() == ",":
                sc.pos += 1
                args.append(_parse_arg(sc))
                continue
            sc.expect(")")
            break
        seen[canon] = (args, name_pos)
        sc.ws()
        if sc.peek() == "":
            break
        sc.construct = None
        sc.expect(".")

    missing = [c for c in ("What", "Whom") if c not in seen]
    if missing:
        sc.construct = None
        raise PolicySyntaxError(f"policy must contain What and Whom; missing {' and '.join(missing)}", 0)
    return _build_ast(seen, sc)


def _build_ast(seen: dict, sc: _Scanner) -> PolicyAst:
    def plain(construct: str) -> tuple[str, ...]:
        if construct not in seen:
            return ()
        args, _ = seen[construct]
        out = []
        sc.construct = construct
        for term, pos in args:
            if term.negated:
                sc.fail("NOT is only allowed in Where and When", pos)
            if term.literal is not None:
                sc.fail("quoted literals are only allowed in When", pos)
            out.append(term.name)
        return tuple(out)

    what, whom = plain("What"), plain("Whom")
    how = tuple(_CANON.get(h.lower(), h) for h in plain("How"))
    who = tuple(_CANON.get(w.lower(), w) for w in plain("Who"))

    sc.construct = "How"
    if len(how) > 2:
        sc.fail("How takes at most one time and one space resolution", seen["How"][1])
    if sum(h in TIME_RESOLUTIONS for h in how) > 1 or sum(h in SPACE_RESOLUTIONS for h in how) > 1:
        sc.fail("How takes at most one time and one space resolution", seen["How"][1])

    sc.construct = "Who"
    for w, (_, pos) in zip(who, seen.get("Who", ([], 0))[0]):
        if w not in SHARING_KEYWORDS:
            sc.fail(f"unknown sharing keyword {w!r}", pos)
    if len(set(who)) != len(who):
        sc.fail("repeated sharing keyword", seen["Who"][1])
    if "AllowDataSharing" in who and "DenyDataSharing" in who:
        sc.fail("AllowDataSharing and DenyDataSharing are mutually exclusive", seen["Who"][1])
    if "PolicyUpdateEffect" in who and "AllowDataSharing" not in who:
        warnings.warn("PolicyUpdateEffect has no meaning without AllowDataSharing", PolicyWarning, stacklevel=3)

    where = ()
    if "Where" in seen:
        sc.construct = "Where"
        for term, pos in seen["Where"][0]:
            if term.literal is not None:
                sc.fail("quoted literals are only allowed in When", pos)
        where = tuple(t for t, _ in seen["Where"][0])
    when = tuple(t for t, _ in seen["When"][0]) if "When" in seen else ()
    return PolicyAst(what=what, whom=whom, where=where, when=when, how=how, who=who)


# ---------------------------------------------------------------------------
# keywords


@dataclass(frozen=True, eq=False)
class KeywordDef:
    name: str
    kind: str  # "Where" | "When"
    body: Polygon | RecurrenceRule | IntervalSet
    owner: str = ""
    version: int = 1

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"Name": self.name, "Type": self.kind}
        if isinstance(self.body, Polygon):
            out["Polygon"] = self.body.to_json()
        elif isinstance(self.body, RecurrenceRule):
            out.update(self.body.to_json())
        else:
            out["Windows"] = self.body.to_json()
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], owner: str = "", version: int = 1) -> "KeywordDef":
        if not isinstance(obj, Mapping):
            raise KeywordError("keyword definition must be a JSON object")
        name = obj.get("Name")
        if not isinstance(name, str) or not _IDENT.fullmatch(name):
            raise KeywordError(f"keyword Name must be an identifier, got {name!r}")
        if name.lower() in RESERVED_KEYWORDS:
            raise KeywordError(f"{name!r} is a reserved keyword")
        kind = obj.get("Type")
        if kind not in ("Where", "When"):
            raise KeywordError(f"keyword Type must be 'Where' or 'When', got {kind!r}")
        if kind == "Where":
            if any(k in obj for k in ("RepeatedHour", "ExcludeDay", "Windows")):
                raise KeywordError(f"Where keyword {name!r} carries time fields")
            if "Polygon" not in obj:
                raise KeywordError(f"Where keyword {name!r} needs a Polygon")
            try:
                body: Any = polygon_from_json(obj["Polygon"])
            except GeometryError as exc:
                raise KeywordError(f"invalid polygon for {name!r}: {exc}") from None
        else:
            if "Polygon" in obj:
                raise KeywordError(f"When keyword {name!r} carries a Polygon")
            has_rule, has_windows = "RepeatedHour" in obj, "Windows" in obj
            if has_rule == has_windows:
                raise KeywordError(f"When keyword {name!r} needs exactly one of RepeatedHour or Windows")
            try:
                if has_rule:
                    body = RecurrenceRule.from_json(obj)
                else:
                    wins = obj["Windows"]
                    if not isinstance(wins, list) or not wins:
                        raise TemporalError("Windows must be a non-empty list")
                    body = IntervalSet(TimeWindow.from_json(w) for w in wins)
            except TemporalError as exc:
                raise KeywordError(f"invalid time rule for {name!r}: {exc}") from None
        return cls(name=name, kind=kind, body=body, owner=owner, version=version)


class KeywordRegistry:
    """Per-owner namespaces of user keywords.

    Reads are lock-free lookups in an immutable snapshot; writes serialise
    on a lock and publish a new snapshot.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._data: dict[str, dict[str, KeywordDef]] = {}

    def register(self, owner: str, obj: Mapping[str, Any]) -> KeywordDef:
        with self._lock:
            current = self._data.get(owner, {})
            name = obj.get("Name") if isinstance(obj, Mapping) else None
            prev = current.get(name) if isinstance(name, str) else None
            kw = KeywordDef.from_json(obj, owner=owner, version=prev.version + 1 if prev else 1)
            if prev is not None:
                warnings.warn(
                    f"keyword {kw.name!r} of owner {owner!r} replaced (version {kw.version})",
                    PolicyWarning,
                    stacklevel=2,
                )
                log.warning("keyword %s/%s replaced with version %d", owner, kw.name, kw.version)
            data = dict(self._data)
            data[owner] = {**current, kw.name: kw}
            self._data = data
            return kw

    def restore(self, kw: KeywordDef) -> None:
        with self._lock:
            data = dict(self._data)
            data[kw.owner] = {**data.get(kw.owner, {}), kw.name: kw}
            self._data = data

    def get(self, owner: str, name: str) -> KeywordDef | None:
        return self._data.get(owner, {}).get(name)

    def list(self, owner: str) -> list[KeywordDef]:
        return sorted(self._data.get(owner, {}).values(), key=lambda k: k.name)

    def owners(self) -> list[str]:
        return sorted(self._data)


# ---------------------------------------------------------------------------
# resolution


@dataclass(frozen=True)
class ResolvedPolicy:
    ast: PolicyAst
    owner: str
    where: tuple[tuple[str, Polygon, bool], ...] = ()
    when: tuple[tuple[str, RecurrenceRule | IntervalSet | DateRange, bool], ...] = ()
    time_resolution: str | None = None
    space_resolution: str | None = None
    who: tuple[str, ...] = field(default=())


def resolve_ast(ast: PolicyAst, registry: KeywordRegistry, owner: str) -> ResolvedPolicy:
    """Replace every keyword of ``ast`` by its definition in ``owner``'s namespace."""
    where = []
    for term in ast.where:
        kw = registry.get(owner, term.name)
        if kw is None:
            raise ResolveError(f"unknown keyword {term.name!r} in Where", "Where", term.name)
        if kw.kind != "Where":
            raise ResolveError(f"{term.name!r} is a When keyword used in Where", "Where", term.name)
        where.append((term.name, kw.body, term.negated))
    when = []
    for term in ast.when:
        if term.literal is not None:
            when.append((str(term.literal), term.literal, term.negated))
            continue
        kw = registry.get(owner, term.name)
        if kw is None:
            raise ResolveError(f"unknown keyword {term.name!r} in When", "When", term.name)
        if kw.kind != "When":
            raise ResolveError(f"{term.name!r} is a Where keyword used in When", "When", term.name)
        when.append((term.name, kw.body, term.negated))
    time_res = space_res = None
    for h in ast.how:
        if h in TIME_RESOLUTIONS:
            time_res = h
        elif h in SPACE_RESOLUTIONS:
            space_res = h
        else:
            raise ResolveError(f"unknown resolution keyword {h!r} in How", "How", h)
    for w in ast.who:
        if w not in SHARING_KEYWORDS:
            raise ResolveError(f"unknown sharing keyword {w!r} in Who", "Who", w)
    return ResolvedPolicy(
        ast=ast,
        owner=owner,
        where=tuple(where),
        when=tuple(when),
        time_resolution=time_res,
        space_resolution=space_res,
        who=ast.who,
    )
