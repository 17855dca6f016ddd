"""Policy compilation, conflict-aware merging and record filtering.

A resolved policy becomes one :class:`ConstraintSet` per (stream, user) pair:
allow and deny polygon lists plus a canonical set of allowed time.  Several
policies for the same pair are merged under least privilege: deny terms
apply everywhere, whatever the allow terms say.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from typing import Any, Sequence

import numpy as np

from .geometry import BoundingBox, Polygon, points_in_polygon
from .policy_lang import (
    TIME_RESOLUTIONS,
    DateRange,
    PolicyError,
    PolicyWarning,
    ResolvedPolicy,
)
from .store import DataRecord, ResolutionSpec, StreamMeta
from .temporal import (
    DEFAULT_EXPANSION_CAP,
    IntervalSet,
    RecurrenceRule,
    TimeWindow,
    resolve_timezone,
    expand_recurrence,
    intersect,
    subtract,
    union,
)

log = logging.getLogger(__name__)

__all__ = [
    "SharingSpec",
    "ConstraintSet",
    "EffectiveQuery",
    "PolicyConflict",
    "compile_policy",
    "merge_policies",
    "effective_constraints",
    "filter_record",
    "filter_batch",
    "SPACE_COARSENESS",
]

# finest first; the construct table names the units without ordering them
SPACE_COARSENESS = ("ZipCodes", "City", "County", "Country")


class PolicyConflict(PolicyError):
    """Overlapping policies whose resolutions cannot be ordered."""


@dataclass(frozen=True)
class SharingSpec:
    """Advisory data-sharing terms.  Never changes which records are returned."""

    mode: str | None = None  # "AllowDataSharing" | "DenyDataSharing" | None
    policy_update_effect: bool = False

    @classmethod
    def from_keywords(cls, who: Sequence[str]) -> "SharingSpec":
        mode = None
        if "DenyDataSharing" in who:
            mode = "DenyDataSharing"
        elif "AllowDataSharing" in who:
            mode = "AllowDataSharing"
        return cls(mode, "PolicyUpdateEffect" in who)

    @staticmethod
    def combine(specs: Sequence["SharingSpec"]) -> "SharingSpec":
        modes = {s.mode for s in specs}
        if "DenyDataSharing" in modes:
            mode = "DenyDataSharing"
        elif "AllowDataSharing" in modes:
            mode = "AllowDataSharing"
        else:
            mode = None
        return SharingSpec(mode, any(s.policy_update_effect for s in specs))

    def to_json(self) -> dict[str, Any]:
        return {"Sharing": self.mode, "PolicyUpdateEffect": self.policy_update_effect}


@dataclass(frozen=True)
class ConstraintSet:
    stream_id: str
    user_id: str
    allow: tuple[tuple[str, Polygon], ...] = ()
    deny: tuple[tuple[str, Polygon], ...] = ()
    allowed_time: IntervalSet = field(default_factory=IntervalSet)
    denied_time: IntervalSet = field(default_factory=IntervalSet)
    # True when no positive Where term exists: every location is allowed
    space_unrestricted: bool = False
    time_resolution: str | None = None
    space_resolution: str | None = None
    sharing: SharingSpec = field(default_factory=SharingSpec)
    source_policy_ids: tuple[str, ...] = ()
    time_keywords: tuple[str, ...] = ()

    @property
    def resolution_specs(self) -> tuple[ResolutionSpec, ...]:
        out = []
        if self.time_resolution:
            out.append(ResolutionSpec.time(self.time_resolution))
        if self.space_resolution:
            out.append(ResolutionSpec.space(self.space_resolution))
        return tuple(out)

    def to_json(self) -> dict[str, Any]:
        """Space/Time constraint document (``Space.Allow``, ``Space.Deny``, ``Time``)."""
        keyword = "+".join(self.time_keywords) if self.time_keywords else "*"
        return {
            "DsID": self.stream_id,
            "userId": self.user_id,
            "Space": {
                "Allow": [{"Keyword": n, "Polygon": p.to_json()} for n, p in self.allow],
                "Deny": [{"Keyword": n, "Polygon": p.to_json()} for n, p in self.deny],
                "Unrestricted": self.space_unrestricted,
            },
            "Time": [{"Keyword": keyword, "Allow": self.allowed_time.to_json(), "Deny": self.denied_time.to_json()}],
            "Resolution": {"Time": self.time_resolution, "Space": self.space_resolution},
            "Who": self.sharing.to_json(),
            "Policies": list(self.source_policy_ids),
        }


# ---------------------------------------------------------------------------
# compilation


def _date_range_windows(dr: DateRange, tz_name: str) -> IntervalSet:
    tz = resolve_timezone(tz_name)
    lo = int(datetime.combine(dr.start, time(0), tzinfo=tz).timestamp())
    hi = int(datetime.combine(dr.end + timedelta(days=1), time(0), tzinfo=tz).timestamp())
    return IntervalSet([TimeWindow(lo, hi)])


def _when_body_windows(body, span: TimeWindow | None, tz_name: str, cap: int) -> IntervalSet:
    if isinstance(body, IntervalSet):
        return body
    if isinstance(body, DateRange):
        return _date_range_windows(body, tz_name)
    if isinstance(body, RecurrenceRule):
        if span is None:
            return IntervalSet()
        return expand_recurrence(body, span, cap)
    raise TypeError(f"unexpected When body {body!r}")


def compile_policy(
    policy: ResolvedPolicy,
    stream_meta: StreamMeta,
    user_id: str | None = None,
    *,
    policy_id: str | None = None,
    timezone: str = "UTC",
    cap: int = DEFAULT_EXPANSION_CAP,
) -> ConstraintSet:
    """Compile ``policy`` for one stream and one user into a constraint set.

    Recurring time rules are expanded over the stream's stored time span.  A
    policy without When grants that whole span; one without a positive Where
    term grants all space except the denied regions.
    """
    if stream_meta.stream_id not in policy.ast.what:
        raise PolicyError(f"policy does not cover stream {stream_meta.stream_id!r}")
    if user_id is None:
        if len(policy.ast.whom) != 1:
            raise PolicyError("user_id is required for a policy naming several users")
        user_id = policy.ast.whom[0]
    elif user_id not in policy.ast.whom:
        raise PolicyError(f"policy does not apply to user {user_id!r}")

    allow = tuple((n, p) for n, p, neg in policy.where if not neg)
    deny = tuple((n, p) for n, p, neg in policy.where if neg)
    if deny and not allow:
        warnings.warn(
            "Where has only NOT terms; everything outside the excluded regions is allowed",
            PolicyWarning,
            stacklevel=2,
        )

    span = stream_meta.span
    positive = [(n, b) for n, b, neg in policy.when if not neg]
    negative = [(n, b) for n, b, neg in policy.when if neg]
    if positive:
        granted = IntervalSet()
        for _, body in positive:
            granted = union(granted, _when_body_windows(body, span, timezone, cap))
    else:
        granted = IntervalSet([span]) if span is not None else IntervalSet()
    denied = IntervalSet()
    for _, body in negative:
        denied = union(denied, _when_body_windows(body, span, timezone, cap))
    allowed = subtract(granted, denied)
    if not allowed and span is not None:
        warnings.warn(
            f"policy grants no time on stream {stream_meta.stream_id!r}; access will be empty",
            PolicyWarning,
            stacklevel=2,
        )

    return ConstraintSet(
        stream_id=stream_meta.stream_id,
        user_id=user_id,
        allow=allow,
        deny=deny,
        allowed_time=allowed,
        denied_time=denied,
        space_unrestricted=not allow,
        time_resolution=policy.time_resolution,
        space_resolution=policy.space_resolution,
        sharing=SharingSpec.from_keywords(policy.who),
        source_policy_ids=(policy_id,) if policy_id is not None else (),
        time_keywords=tuple(n for n, _ in positive),
    )


# ---------------------------------------------------------------------------
# merging


def _space_footprint(cs: ConstraintSet) -> list[BoundingBox] | None:
    """Bounding boxes of every region a set mentions; None means everywhere."""
    if cs.space_unrestricted:
        return None
    return [p.bbox for _, p in cs.allow + cs.deny]


def _overlap(a: ConstraintSet, b: ConstraintSet) -> bool:
    """Conservative test for the both-space-and-time overlap case."""
    ta = union(a.allowed_time, a.denied_time)
    tb = union(b.allowed_time, b.denied_time)
    if not intersect(ta, tb):
        return False
    fa, fb = _space_footprint(a), _space_footprint(b)
    if fa is None or fb is None:
        return True
    return any(x.intersects(y) for x in fa for y in fb)


def _rank(value: str | None, order: Sequence[str]) -> int:
    return -1 if value is None else order.index(value)


def _finer_or_equal(a: ConstraintSet, b: ConstraintSet) -> bool:
    return _rank(a.time_resolution, TIME_RESOLUTIONS) <= _rank(b.time_resolution, TIME_RESOLUTIONS) and _rank(
        a.space_resolution, SPACE_COARSENESS
    ) <= _rank(b.space_resolution, SPACE_COARSENESS)


def _coarsest(values: Sequence[str | None], order: Sequence[str]) -> str | None:
    ranked = [v for v in values if v is not None]
    return max(ranked, key=order.index) if ranked else None


def _dedupe(items):
    out, seen = [], set()
    for name, poly in items:
        key = (name, poly)
        if key not in seen:
            seen.add(key)
            out.append((name, poly))
    return tuple(out)


def merge_policies(sets: Sequence[ConstraintSet]) -> ConstraintSet:
    """Union several constraint sets for one (stream, user) pair.

    Allow and deny lists are concatenated and allowed time is unioned.  When
    any two inputs overlap in both space and time, every time exclusion is
    additionally subtracted from the merged allowed time, so exclusions win
    over grants.  Deny polygons always apply to the whole merged set.

    Overlapping inputs whose resolutions cannot be ordered (e.g. an hourly
    time limit against a zip-code space limit) raise :class:`PolicyConflict`.
    Comparable resolutions merge to the coarsest one.
    """
    if not sets:
        raise ValueError("nothing to merge")
    stream_ids = {s.stream_id for s in sets}
    user_ids = {s.user_id for s in sets}
    if len(stream_ids) != 1 or len(user_ids) != 1:
        raise ValueError("merge_policies needs sets for a single (stream, user) pair")
    if len(sets) == 1:
        return sets[0]

    # canonical input order makes the result independent of argument order
    ordered = sorted(
        sets,
        key=lambda s: (
            s.source_policy_ids,
            tuple(n for n, _ in s.allow),
            tuple(n for n, _ in s.deny),
            tuple((w.start, w.end) for w in s.allowed_time),
            tuple((w.start, w.end) for w in s.denied_time),
            s.time_resolution or "",
            s.space_resolution or "",
        ),
    )
    overlapping = False
    for a, b in itertools.combinations(ordered, 2):
        if not _overlap(a, b):
            continue
        overlapping = True
        if not (_finer_or_equal(a, b) or _finer_or_equal(b, a)):
            raise PolicyConflict(
                "overlapping policies "
                f"{list(a.source_policy_ids) or '?'} and {list(b.source_policy_ids) or '?'} "
                f"use incomparable resolutions ({a.time_resolution or a.space_resolution} vs "
                f"{b.time_resolution or b.space_resolution}) on the same data"
            )

    allowed = IntervalSet()
    denied = IntervalSet()
    for s in ordered:
        allowed = union(allowed, s.allowed_time)
        denied = union(denied, s.denied_time)
    if overlapping:
        allowed = subtract(allowed, denied)

    unrestricted = any(s.space_unrestricted for s in ordered)
    allow = () if unrestricted else _dedupe(x for s in ordered for x in s.allow)
    time_kw: list[str] = []
    for s in ordered:
        time_kw.extend(k for k in s.time_keywords if k not in time_kw)
    return ConstraintSet(
        stream_id=ordered[0].stream_id,
        user_id=ordered[0].user_id,
        allow=allow,
        deny=_dedupe(x for s in ordered for x in s.deny),
        allowed_time=allowed,
        denied_time=denied,
        space_unrestricted=unrestricted,
        time_resolution=_coarsest([s.time_resolution for s in ordered], TIME_RESOLUTIONS),
        space_resolution=_coarsest([s.space_resolution for s in ordered], SPACE_COARSENESS),
        sharing=SharingSpec.combine([s.sharing for s in ordered]),
        source_policy_ids=tuple(sorted({p for s in ordered for p in s.source_policy_ids})),
        time_keywords=tuple(time_kw),
    )


# ---------------------------------------------------------------------------
# effective constraints and filtering


@dataclass(frozen=True)
class EffectiveQuery:
    """A query box and range combined with the constraints that govern it."""

    stream_id: str
    box: BoundingBox
    time_range: TimeWindow
    effective_time: IntervalSet
    allow: tuple[Polygon, ...] = ()
    deny: tuple[Polygon, ...] = ()
    space_unrestricted: bool = True
    resolution: tuple[ResolutionSpec, ...] = ()
    sharing: SharingSpec | None = None
    bypass: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "DsID": self.stream_id,
            "SpaceBox": self.box.to_spacebox(),
            "TimeRange": [self.time_range.start, self.time_range.end],
            "Time": self.effective_time.to_json(),
            "Allow": len(self.allow),
            "Deny": len(self.deny),
            "Resolution": [r.key for r in self.resolution],
            "Bypass": self.bypass,
        }


def effective_constraints(
    box: BoundingBox,
    time_range: TimeWindow,
    merged: ConstraintSet | None,
    *,
    stream_id: str | None = None,
    owner: bool = False,
) -> EffectiveQuery:
    """Intersect a query with merged constraints.

    With ``owner=True`` the constraints are bypassed and the raw query comes
    back unchanged.
    """
    sid = stream_id if stream_id is not None else (merged.stream_id if merged else "")
    query_time = IntervalSet([time_range])
    if owner:
        return EffectiveQuery(sid, box, time_range, query_time, bypass=True)
    if merged is None:
        raise ValueError("non-owner queries need a merged constraint set")
    return EffectiveQuery(
        stream_id=sid,
        box=box,
        time_range=time_range,
        effective_time=intersect(query_time, merged.allowed_time),
        allow=tuple(p for _, p in merged.allow),
        deny=tuple(p for _, p in merged.deny),
        space_unrestricted=merged.space_unrestricted,
        resolution=merged.resolution_specs,
        sharing=merged.sharing,
    )


def _in_any(lats: np.ndarray, lngs: np.ndarray, polys: Sequence[Polygon], optimized: bool) -> np.ndarray:
    hit = np.zeros(lats.shape, dtype=bool)
    for poly in polys:
        todo = ~hit
        if optimized:
            b = poly.bbox
            todo &= (lats >= b.lat_min) & (lats <= b.lat_max) & (lngs >= b.lng_min) & (lngs <= b.lng_max)
        idx = np.nonzero(todo)[0]
        if idx.size:
            hit[idx[points_in_polygon(lats[idx], lngs[idx], poly, indexed=optimized)]] = True
    return hit


def filter_batch(lats, lngs, times, eff: EffectiveQuery, *, optimized: bool = False) -> np.ndarray:
    """Mask of records admitted by ``eff``.

    A record passes when it lies in the query box, its time is in the
    effective time, it lies in some allow polygon (or space is
    unrestricted), and no deny polygon contains it.  ``optimized`` skips
    exact tests for points outside a polygon's bounding box and uses the
    polygon's slab index; the mask is identical either way.
    """
    lats = np.asarray(lats, dtype=float)
    lngs = np.asarray(lngs, dtype=float)
    times = np.asarray(times, dtype=np.int64)
    b = eff.box
    ok = (lats >= b.lat_min) & (lats <= b.lat_max) & (lngs >= b.lng_min) & (lngs <= b.lng_max)
    ok &= eff.effective_time.contains_many(times)
    if eff.bypass:
        return ok
    if not eff.space_unrestricted:
        idx = np.nonzero(ok)[0]
        ok[idx] = _in_any(lats[idx], lngs[idx], eff.allow, optimized)
    if eff.deny:
        idx = np.nonzero(ok)[0]
        ok[idx] = ~_in_any(lats[idx], lngs[idx], eff.deny, optimized)
    return ok


def filter_record(rec: DataRecord, eff: EffectiveQuery) -> bool:
    return bool(filter_batch([rec.lat], [rec.lng], [rec.timestamp], eff)[0])
