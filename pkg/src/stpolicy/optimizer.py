"""Query fast path: in-memory constraint cache, satisfiability pre-check and
containment-based grouping of redundant regions."""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Callable, Mapping

from .geometry import BoundingBox, box_intersects_polygon, box_within_polygon, polygon_within_polygon
from .policy_engine import ConstraintSet
from .temporal import IntervalSet, TimeWindow, intersect

__all__ = ["satisfiable", "group_constraints", "ConstraintCache", "OptimizerStats", "audit_cache"]

Key = tuple[str, str]


def satisfiable(box: BoundingBox, time_range: TimeWindow, merged: ConstraintSet) -> bool:
    """False only if the query provably matches no record under ``merged``.

    Rejects when the query time misses all allowed time, when the box
    touches none of the allow polygons, or when the box lies entirely inside
    a single deny polygon.  Bounding boxes are compared before any exact
    polygon test.
    """
    if not intersect(IntervalSet([time_range]), merged.allowed_time):
        return False
    if not merged.space_unrestricted:
        if not any(
            box.intersects(poly.bbox) and box_intersects_polygon(box, poly) for _, poly in merged.allow
        ):
            return False
    for _, poly in merged.deny:
        if poly.bbox.contains_box(box) and box_within_polygon(box, poly):
            return False
    return True


def _drop_contained(items: tuple) -> tuple:
    """Remove each polygon that lies inside another kept one.

    Larger regions are considered first so a chain of nested polygons
    collapses onto the outermost; ties keep the earliest entry.
    """
    order = sorted(range(len(items)), key=lambda i: (-items[i][1].area, i))
    kept: list[int] = []
    for i in order:
        poly = items[i][1]
        if any(
            items[k][1].bbox.contains_box(poly.bbox) and polygon_within_polygon(poly, items[k][1]) for k in kept
        ):
            continue
        kept.append(i)
    return tuple(items[i] for i in sorted(kept))


def group_constraints(merged: ConstraintSet) -> ConstraintSet:
    """Drop allow (deny) polygons contained in another allow (deny) polygon.

    Unions are unchanged by removing a member that lies inside another
    member, so the result admits exactly the same records.
    """
    allow = _drop_contained(merged.allow)
    deny = _drop_contained(merged.deny)
    if len(allow) == len(merged.allow) and len(deny) == len(merged.deny):
        return merged
    return replace(merged, allow=allow, deny=deny)


@dataclass
class OptimizerStats:
    queries: int = 0
    rejected: int = 0
    grouped_away: int = 0

    def to_json(self) -> dict[str, int]:
        return {"queries": self.queries, "rejected": self.rejected, "grouped_away": self.grouped_away}


class ConstraintCache:
    """(stream, user) -> merged, grouped constraint snapshot.

    Readers take :meth:`snapshot` once and use it for a whole query.  Writers
    build a replacement mapping and publish it with a single assignment.
    """

    def __init__(self):
        self._snapshot: Mapping[Key, ConstraintSet] = {}
        self._write = threading.Lock()
        self.stats = OptimizerStats()

    def snapshot(self) -> Mapping[Key, ConstraintSet]:
        return self._snapshot

    def get(self, stream_id: str, user_id: str) -> ConstraintSet | None:
        return self._snapshot.get((stream_id, user_id))

    def __len__(self) -> int:
        return len(self._snapshot)

    def update(self, changes: Mapping[Key, ConstraintSet | None]) -> None:
        """Atomically apply ``changes``; a ``None`` value removes the key."""
        with self._write:
            snap = dict(self._snapshot)
            for key, cs in changes.items():
                if cs is None:
                    snap.pop(key, None)
                else:
                    snap[key] = cs
            self._snapshot = snap

    def replace_all(self, snapshot: Mapping[Key, ConstraintSet]) -> None:
        with self._write:
            self._snapshot = dict(snapshot)


def audit_cache(cache: ConstraintCache, rebuild: Callable[[], Mapping[Key, ConstraintSet]]) -> list[str]:
    """Compare cached snapshots with a fresh recompilation; returns divergences."""
    expected = rebuild()
    cached = cache.snapshot()
    report = []
    for key in sorted(set(expected) | set(cached)):
        want, have = expected.get(key), cached.get(key)
        if want is None:
            report.append(f"{key}: cached but no policy applies")
        elif have is None:
            report.append(f"{key}: missing from cache")
        elif want != have:
            report.append(f"{key}: cached constraints differ from recompilation")
    return report
