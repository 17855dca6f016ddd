"""Planar lat/lng geometry used by record filtering, query pre-filtering and
constraint grouping.

Coordinates are treated as Cartesian (x = longitude, y = latitude).  Every
region is a closed set: points on a polygon's boundary count as inside.
Polygons carry their exterior ring only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "GeoPoint",
    "BoundingBox",
    "Polygon",
    "point_in_polygon",
    "points_in_polygon",
    "box_intersects_polygon",
    "box_within_polygon",
    "polygon_within_polygon",
    "polygon_bbox",
    "polygon_from_json",
    "ring_area",
]

# upper bound on broadcast (points x edges) block size
_BLOCK = 1 << 20


class GeometryError(ValueError):
    """Invalid coordinates, boxes or polygon rings."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lng: float

    def __post_init__(self):
        lat, lng = float(self.lat), float(self.lng)
        if not (math.isfinite(lat) and math.isfinite(lng)):
            raise GeometryError(f"non-finite coordinate ({self.lat}, {self.lng})")
        if not -90.0 <= lat <= 90.0:
            raise GeometryError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lng <= 180.0:
            raise GeometryError(f"longitude {lng} outside [-180, 180]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lng", lng)


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lng_min: float
    lng_max: float

    def __post_init__(self):
        vals = [float(v) for v in (self.lat_min, self.lat_max, self.lng_min, self.lng_max)]
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError("bounding box has non-finite bounds")
        lat_min, lat_max, lng_min, lng_max = vals
        if lat_min > lat_max:
            raise GeometryError(f"lat_min {lat_min} > lat_max {lat_max}")
        if lng_min > lng_max:
            raise GeometryError(
                f"lng_min {lng_min} > lng_max {lng_max}; boxes crossing the antimeridian are not supported"
            )
        GeoPoint(lat_min, lng_min)
        GeoPoint(lat_max, lng_max)
        for name, v in zip(("lat_min", "lat_max", "lng_min", "lng_max"), vals):
            object.__setattr__(self, name, v)

    @classmethod
    def from_spacebox(cls, box: Sequence[float]) -> "BoundingBox":
        """Build from the ``[lat_min, lat_max, lng_min, lng_max]`` query form."""
        if len(box) != 4:
            raise GeometryError("SpaceBox must have exactly 4 numbers")
        return cls(*box)

    def to_spacebox(self) -> list[float]:
        return [self.lat_min, self.lat_max, self.lng_min, self.lng_max]

    def contains_point(self, lat: float, lng: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lng_min <= lng <= self.lng_max

    def intersects(self, other: "BoundingBox") -> bool:
        return not (
            other.lat_min > self.lat_max
            or other.lat_max < self.lat_min
            or other.lng_min > self.lng_max
            or other.lng_max < self.lng_min
        )

    def contains_box(self, other: "BoundingBox") -> bool:
        return (
            self.lat_min <= other.lat_min
            and other.lat_max <= self.lat_max
            and self.lng_min <= other.lng_min
            and other.lng_max <= self.lng_max
        )

    @property
    def area(self) -> float:
        return (self.lat_max - self.lat_min) * (self.lng_max - self.lng_min)

    def corners(self) -> tuple[np.ndarray, np.ndarray]:
        """Closed ring of the four corners as (lats, lngs)."""
        lats = np.array([self.lat_min, self.lat_min, self.lat_max, self.lat_max, self.lat_min])
        lngs = np.array([self.lng_min, self.lng_max, self.lng_max, self.lng_min, self.lng_min])
        return lats, lngs


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple closed ring of lat/lng vertices.

    Construction validates the ring: at least four vertices counting the
    repeated closing one, no repeated consecutive vertices, and no
    self-intersection.  An unclosed ring is closed automatically.
    """

    lats: np.ndarray
    lngs: np.ndarray
    bbox: BoundingBox = field(init=False, repr=False)

    def __init__(self, vertices: Iterable[GeoPoint | tuple[float, float]], *, validate: bool = True):
        pts = [v if isinstance(v, GeoPoint) else GeoPoint(*v) for v in vertices]
        if pts and pts[0] != pts[-1]:
            pts.append(pts[0])
        if len(pts) < 4:
            raise GeometryError(f"polygon needs at least 4 vertices including closure, got {len(pts)}")
        lats = np.array([p.lat for p in pts], dtype=float)
        lngs = np.array([p.lng for p in pts], dtype=float)
        same = (lats[1:] == lats[:-1]) & (lngs[1:] == lngs[:-1])
        if same.any():
            i = int(np.argmax(same))
            raise GeometryError(f"consecutive duplicate vertex at index {i + 1}")
        if validate:
            _check_simple(lats, lngs)
        lats.setflags(write=False)
        lngs.setflags(write=False)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lngs", lngs)
        object.__setattr__(
            self,
            "bbox",
            BoundingBox(float(lats.min()), float(lats.max()), float(lngs.min()), float(lngs.max())),
        )

    @classmethod
    def from_box(cls, box: BoundingBox) -> "Polygon":
        lats, lngs = box.corners()
        return cls(zip(lats, lngs))

    @property
    def vertices(self) -> tuple[GeoPoint, ...]:
        return tuple(GeoPoint(a, b) for a, b in zip(self.lats, self.lngs))

    def __len__(self) -> int:
        return len(self.lats)

    def __repr__(self):
        return f"Polygon(n={len(self.lats)}, bbox={self.bbox.to_spacebox()})"

    def __eq__(self, other):
        if not isinstance(other, Polygon):
            return NotImplemented
        return np.array_equal(self.lats, other.lats) and np.array_equal(self.lngs, other.lngs)

    def __hash__(self):
        return hash((self.lats.tobytes(), self.lngs.tobytes()))

    def to_json(self) -> list[dict[str, float]]:
        """Vertex list in the ``{"lat": .., "lng": ..}`` object form."""
        return [{"lat": float(a), "lng": float(b)} for a, b in zip(self.lats, self.lngs)]

    def to_geojson(self) -> dict[str, Any]:
        ring = [[float(b), float(a)] for a, b in zip(self.lats, self.lngs)]
        return {"type": "Polygon", "coordinates": [ring]}

    @property
    def area(self) -> float:
        return ring_area(self.lats, self.lngs)


def ring_area(lats: np.ndarray, lngs: np.ndarray) -> float:
    """Unsigned shoelace area of a closed ring, in squared degrees."""
    x, y = np.asarray(lngs, float), np.asarray(lats, float)
    return 0.5 * abs(float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])))


def polygon_bbox(poly: Polygon) -> BoundingBox:
    return poly.bbox


# ---------------------------------------------------------------------------
# point in polygon


class _EdgeTable:
    """Per-edge constants of a ring, row-aligned so subsets can be gathered."""

    __slots__ = ("x0", "y0", "y1", "slope", "dx", "dy", "xlo", "xhi", "ylo", "yhi")

    def __init__(self, poly: Polygon):
        y0, y1 = poly.lats[:-1], poly.lats[1:]
        x0, x1 = poly.lngs[:-1], poly.lngs[1:]
        self.x0, self.y0, self.y1 = x0, y0, y1
        self.dx, self.dy = x1 - x0, y1 - y0
        with np.errstate(divide="ignore", invalid="ignore"):
            self.slope = np.where(self.dy != 0, self.dx / self.dy, 0.0)
        self.xlo, self.xhi = np.minimum(x0, x1), np.maximum(x0, x1)
        self.ylo, self.yhi = np.minimum(y0, y1), np.maximum(y0, y1)

    def padded(self, rows: np.ndarray) -> "_EdgeTable":
        """Gather ``rows`` (-1 = padding).  Padding edges sit at +inf latitude,
        so they never cross a ray nor contain a point."""
        out = _EdgeTable.__new__(_EdgeTable)
        pad = rows < 0
        for name in self.__slots__:
            col = getattr(self, name)[np.where(pad, 0, rows)]
            col[pad] = np.inf if name in ("y0", "y1", "ylo", "yhi") else 0.0
            setattr(out, name, col)
        return out


def _pip_kernel(qy: np.ndarray, qx: np.ndarray, e: _EdgeTable) -> np.ndarray:
    """Even-odd parity plus on-edge test; ``qy``/``qx`` are column vectors
    broadcast against edge arrays of shape (1, m) or (points, m)."""
    with np.errstate(invalid="ignore"):
        ry = qy - e.y0
        crosses = ((e.y0 > qy) != (e.y1 > qy)) & (qx < e.x0 + ry * e.slope)
        inside = (np.count_nonzero(crosses, axis=1) & 1).astype(bool)
        on_edge = (
            (e.dx * ry - e.dy * (qx - e.x0) == 0)
            & (e.xlo <= qx)
            & (qx <= e.xhi)
            & (e.ylo <= qy)
            & (qy <= e.yhi)
        ).any(axis=1)
    return inside | on_edge


class _SlabIndex:
    """Edges bucketed into horizontal slabs over the polygon's latitude range.

    An edge is listed in every slab its latitude interval touches, and a
    point only meets edges whose interval contains its latitude, so testing
    a point against its slab's edges gives exactly the full-ring answer.
    """

    def __init__(self, poly: Polygon):
        edges = _EdgeTable(poly)
        n = len(edges.x0)
        self.k = max(1, min(4096, n // 4))
        self.lo = poly.bbox.lat_min
        self.h = max(poly.bbox.lat_max - self.lo, 1e-12) / self.k
        first, last = self.slab(edges.ylo), self.slab(edges.yhi)
        counts = np.bincount(
            np.concatenate([np.arange(a, b + 1) for a, b in zip(first, last)]), minlength=self.k
        )
        width = int(counts.max())
        rows = np.full((self.k, width), -1, dtype=np.int64)
        fill = np.zeros(self.k, dtype=np.int64)
        for i, (a, b) in enumerate(zip(first, last)):
            for j in range(a, b + 1):
                rows[j, fill[j]] = i
                fill[j] += 1
        self.table = edges.padded(rows)

    def slab(self, y) -> np.ndarray:
        # monotone in y, which the bucketing argument relies on
        return np.clip(np.floor((np.asarray(y, dtype=float) - self.lo) / self.h), 0, self.k - 1).astype(np.int64)


def _slab_index(poly: Polygon) -> _SlabIndex:
    idx = poly.__dict__.get("_slabs")
    if idx is None:
        idx = _SlabIndex(poly)
        object.__setattr__(poly, "_slabs", idx)
    return idx


def points_in_polygon(lats, lngs, poly: Polygon, *, indexed: bool = False) -> np.ndarray:
    """Vectorised closed point-in-polygon test.

    Even-odd ray casting along +longitude; points lying on an edge are
    reported inside.  The plain path costs ``len(points) * len(poly)``.
    ``indexed=True`` tests each point only against the edges of its
    latitude slab (built once per polygon and kept); results are identical.
    """
    py = np.atleast_1d(np.asarray(lats, dtype=float))
    px = np.atleast_1d(np.asarray(lngs, dtype=float))
    out = np.zeros(py.shape[0], dtype=bool)
    if py.size == 0:
        return out
    if indexed:
        idx = _slab_index(poly)
        t = idx.table
        width = t.x0.shape[1]
        step = max(1, _BLOCK // width)
        for s in range(0, py.shape[0], step):
            rows = idx.slab(py[s : s + step])
            sub = _EdgeTable.__new__(_EdgeTable)
            for name in _EdgeTable.__slots__:
                setattr(sub, name, getattr(t, name)[rows])
            out[s : s + step] = _pip_kernel(py[s : s + step, None], px[s : s + step, None], sub)
        return out
    edges = _EdgeTable(poly)
    step = max(1, _BLOCK // len(edges.x0))
    for s in range(0, py.shape[0], step):
        out[s : s + step] = _pip_kernel(py[s : s + step, None], px[s : s + step, None], edges)
    return out


def point_in_polygon(p: GeoPoint, poly: Polygon) -> bool:
    return bool(points_in_polygon([p.lat], [p.lng], poly)[0])


# ---------------------------------------------------------------------------
# segment kernels


def _segments_touch_box(y0, x0, y1, x1, box: BoundingBox) -> np.ndarray:
    """Liang-Barsky clip: does each segment meet the closed box?"""
    dx, dy = x1 - x0, y1 - y0
    t0 = np.zeros(x0.shape)
    t1 = np.ones(x0.shape)
    ok = np.ones(x0.shape, dtype=bool)
    for p, q in (
        (-dx, x0 - box.lng_min),
        (dx, box.lng_max - x0),
        (-dy, y0 - box.lat_min),
        (dy, box.lat_max - y0),
    ):
        zero = p == 0
        ok &= ~(zero & (q < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(zero, 0.0, q / np.where(zero, 1.0, p))
        neg = (p < 0) & ~zero
        pos = (p > 0) & ~zero
        t0 = np.where(neg, np.maximum(t0, r), t0)
        t1 = np.where(pos, np.minimum(t1, r), t1)
    return ok & (t0 <= t1)


def _orient(ax, ay, bx, by, cx, cy):
    return np.sign((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


def _on_segment(ax, ay, bx, by, cx, cy):
    # c collinear with ab assumed
    return (
        (np.minimum(ax, bx) <= cx)
        & (cx <= np.maximum(ax, bx))
        & (np.minimum(ay, by) <= cy)
        & (cy <= np.maximum(ay, by))
    )


def _segments_intersect(ax, ay, bx, by, cx, cy, dx, dy) -> np.ndarray:
    """Closed segment intersection, broadcasting over all arguments."""
    o1 = _orient(ax, ay, bx, by, cx, cy)
    o2 = _orient(ax, ay, bx, by, dx, dy)
    o3 = _orient(cx, cy, dx, dy, ax, ay)
    o4 = _orient(cx, cy, dx, dy, bx, by)
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit |= (o1 == 0) & _on_segment(ax, ay, bx, by, cx, cy)
    hit |= (o2 == 0) & _on_segment(ax, ay, bx, by, dx, dy)
    hit |= (o3 == 0) & _on_segment(cx, cy, dx, dy, ax, ay)
    hit |= (o4 == 0) & _on_segment(cx, cy, dx, dy, bx, by)
    return hit


def _check_simple(lats: np.ndarray, lngs: np.ndarray) -> None:
    """Raise unless the closed ring is simple.  O(n^2), registration only."""
    x0, y0 = lngs[:-1], lats[:-1]
    x1, y1 = lngs[1:], lats[1:]
    n = len(x0)
    # adjacent edges may only share their common vertex: no fold-back
    nx0, ny0 = np.roll(x0, -1), np.roll(y0, -1)
    nx1, ny1 = np.roll(x1, -1), np.roll(y1, -1)
    ax, ay = x1 - x0, y1 - y0
    bx, by = nx1 - nx0, ny1 - ny0
    fold = (ax * by - ay * bx == 0) & (ax * bx + ay * by < 0)
    if fold.any():
        i = int(np.argmax(fold))
        raise GeometryError(f"ring folds back on itself at vertex {(i + 1) % n}")
    if n == 3:
        return
    idx = np.arange(n)
    step = max(1, _BLOCK // n)
    for s in range(0, n, step):
        i = idx[s : s + step, None]
        j = idx[None, :]
        candidate = (j >= i + 2) & ~((i == 0) & (j == n - 1))
        if not candidate.any():
            continue
        hit = _segments_intersect(
            x0[s : s + step, None], y0[s : s + step, None],
            x1[s : s + step, None], y1[s : s + step, None],
            x0[None, :], y0[None, :], x1[None, :], y1[None, :],
        ) & candidate
        if hit.any():
            a, b = np.argwhere(hit)[0]
            raise GeometryError(f"ring self-intersects: edge {s + a} crosses edge {b}")


# ---------------------------------------------------------------------------
# box / polygon relations


def box_intersects_polygon(box: BoundingBox, poly: Polygon) -> bool:
    """True iff the closed box and the closed polygon share a point."""
    if not box.intersects(poly.bbox):
        return False
    if _segments_touch_box(poly.lats[:-1], poly.lngs[:-1], poly.lats[1:], poly.lngs[1:], box).any():
        return True
    # no boundary contact: either the box sits inside the polygon or apart
    return bool(points_in_polygon([box.lat_min], [box.lng_min], poly)[0])


def _ring_within(lats: np.ndarray, lngs: np.ndarray, outer: Polygon) -> bool:
    """Is the region bounded by a closed ring contained in closed ``outer``?

    A simple region lies inside a simple polygon iff its boundary does.  Each
    ring edge is split at every point where it meets the outer boundary; the
    pieces in between cannot cross that boundary, so testing one midpoint per
    piece (plus the vertices) decides containment exactly.
    """
    if not points_in_polygon(lats, lngs, outer).all():
        return False
    keep = (lats[1:] != lats[:-1]) | (lngs[1:] != lngs[:-1])
    ax, ay = lngs[:-1][keep], lats[:-1][keep]
    bx, by = lngs[1:][keep], lats[1:][keep]
    if ax.size == 0:
        return True
    cx, cy = outer.lngs[:-1], outer.lats[:-1]
    dx_, dy_ = outer.lngs[1:], outer.lats[1:]
    rx, ry = bx - ax, by - ay
    rr = rx * rx + ry * ry
    sx, sy = dx_ - cx, dy_ - cy
    edge_ids: list[np.ndarray] = []
    params: list[np.ndarray] = []
    step = max(1, _BLOCK // len(cx))
    for s in range(0, ax.size, step):
        sl = slice(s, s + step)
        qx = cx[None, :] - ax[sl, None]
        qy = cy[None, :] - ay[sl, None]
        rxs, rys = rx[sl, None], ry[sl, None]
        denom = rxs * sy[None, :] - rys * sx[None, :]
        q_cross_s = qx * sy[None, :] - qy * sx[None, :]
        q_cross_r = qx * rys - qy * rxs
        with np.errstate(divide="ignore", invalid="ignore"):
            t = q_cross_s / denom
            u = q_cross_r / denom
        cross_hit = (denom != 0) & (t > 0) & (t < 1) & (u >= 0) & (u <= 1)
        ii, jj = np.nonzero(cross_hit)
        edge_ids.append(ii + s)
        params.append(t[ii, jj])
        collinear = (denom == 0) & (q_cross_r == 0)
        if collinear.any():
            ii, jj = np.nonzero(collinear)
            rrs = rr[sl][ii]
            for ex, ey in ((cx, cy), (dx_, dy_)):
                tc = ((ex[jj] - ax[sl][ii]) * rx[sl][ii] + (ey[jj] - ay[sl][ii]) * ry[sl][ii]) / rrs
                m = (tc > 0) & (tc < 1)
                edge_ids.append(ii[m] + s)
                params.append(tc[m])
    n_edges = ax.size
    ids = np.concatenate(edge_ids + [np.arange(n_edges), np.arange(n_edges)])
    ts = np.concatenate(params + [np.zeros(n_edges), np.ones(n_edges)])
    order = np.lexsort((ts, ids))
    ids, ts = ids[order], ts[order]
    same = (ids[1:] == ids[:-1]) & (ts[1:] > ts[:-1])
    e = ids[:-1][same]
    tm = 0.5 * (ts[:-1][same] + ts[1:][same])
    mx = ax[e] + tm * rx[e]
    my = ay[e] + tm * ry[e]
    return bool(points_in_polygon(my, mx, outer).all())


def box_within_polygon(box: BoundingBox, poly: Polygon) -> bool:
    """True iff every point of the closed box lies in the closed polygon."""
    if not poly.bbox.contains_box(box):
        return False
    lats, lngs = box.corners()
    return _ring_within(lats, lngs, poly)


def polygon_within_polygon(inner: Polygon, outer: Polygon) -> bool:
    """True iff closed ``inner`` is a subset of closed ``outer``."""
    if not outer.bbox.contains_box(inner.bbox):
        return False
    return _ring_within(inner.lats, inner.lngs, outer)


# ---------------------------------------------------------------------------
# JSON input


def _ring_from_pairs(ring: Any) -> list[GeoPoint]:
    """Parse one ring: ``[{lat, lng}, ...]`` objects or GeoJSON ``[lng, lat]`` pairs."""
    if not isinstance(ring, list) or not ring:
        raise GeometryError("polygon ring must be a non-empty list")
    if all(isinstance(v, dict) for v in ring):
        try:
            return [GeoPoint(float(v["lat"]), float(v["lng"])) for v in ring]
        except KeyError as exc:
            raise GeometryError(f"vertex object missing {exc}") from None
    if all(isinstance(v, (list, tuple)) for v in ring):
        pts = []
        for v in ring:
            if len(v) < 2 or not all(isinstance(c, (int, float)) for c in v[:2]):
                raise GeometryError(f"bad coordinate pair {v!r}")
            pts.append(GeoPoint(float(v[1]), float(v[0])))
        return pts
    raise GeometryError("mixed vertex forms in polygon ring; use all {lat,lng} objects or all [lng,lat] pairs")


def polygon_from_json(obj: Any) -> Polygon:
    """Parse a polygon from any accepted JSON form.

    Accepted: a list of ``{"lat", "lng"}`` objects; a GeoJSON ring of
    ``[lng, lat]`` pairs; a GeoJSON ``coordinates`` list of rings; or a GeoJSON
    Polygon geometry / Feature.  More than one ring (holes) is rejected.
    """
    if isinstance(obj, dict):
        if obj.get("type") == "Feature":
            obj = obj.get("geometry")
            if not isinstance(obj, dict):
                raise GeometryError("feature has no geometry")
        if obj.get("type") != "Polygon":
            raise GeometryError(f"unsupported geometry type {obj.get('type')!r}; only Polygon is accepted")
        obj = obj.get("coordinates")
    if not isinstance(obj, list) or not obj:
        raise GeometryError("polygon must be a non-empty list")
    first = obj[0]
    if isinstance(first, list) and first and isinstance(first[0], (list, tuple, dict)):
        # list of rings
        if len(obj) > 1:
            raise GeometryError("polygons with holes are not supported: only the exterior ring is allowed; express exclusions with NOT")
        obj = first
    return Polygon(_ring_from_pairs(obj))
