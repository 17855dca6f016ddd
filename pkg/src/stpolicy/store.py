"""Embedded stream store.

Each stream keeps an append-only binary record log plus an in-memory
spatio-temporal index rebuilt from it.  Stream metadata, users, boundary sets
and anything else the service persists live in one JSON catalog file.
Resolution-limited views of a stream are materialised as hidden replica
streams that are kept in sync on ingest.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import logging
import math
import os
import tempfile
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .geometry import BoundingBox, GeoPoint, GeometryError, Polygon, points_in_polygon, polygon_from_json
from .temporal import TimeWindow

log = logging.getLogger(__name__)

__all__ = [
    "RECORD_DTYPE",
    "StoreError",
    "UnknownStream",
    "DuplicateStream",
    "UnknownOwner",
    "NotOwner",
    "MissingBoundarySet",
    "DataRecord",
    "StreamMeta",
    "ResolutionSpec",
    "BoundarySet",
    "IngestReport",
    "Store",
    "bucket_start",
    "coarsen_records",
    "parse_ndjson",
    "parse_csv",
    "records_to_array",
]

RECORD_DTYPE = np.dtype([("lat", "<f8"), ("lng", "<f8"), ("time", "<i8"), ("value", "<f8")])

TIME_BUCKETS = ("Second", "Minute", "Hour", "Day", "Week", "Month", "Year")
_FIXED_SECONDS = {"Second": 1, "Minute": 60, "Hour": 3600, "Day": 86400, "Week": 7 * 86400}
# 1970-01-05 00:00 UTC, the first Monday after the epoch
_WEEK_EPOCH = 4 * 86400

# records per grid cell the index aims for
_CELL_TARGET = 32
_MAX_GRID = 1024


class StoreError(Exception):
    pass


class UnknownStream(StoreError, KeyError):
    def __str__(self):
        return f"unknown stream {self.args[0]!r}"


class DuplicateStream(StoreError):
    pass


class UnknownOwner(StoreError):
    pass


class NotOwner(StoreError, PermissionError):
    pass


class MissingBoundarySet(StoreError):
    pass


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class DataRecord:
    lat: float
    lng: float
    timestamp: int
    value: float

    def __post_init__(self):
        GeoPoint(self.lat, self.lng)
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, (int, np.integer)):
            raise ValueError(f"timestamp must be integer seconds, got {self.timestamp!r}")
        if self.timestamp < 0:
            raise ValueError(f"timestamp {self.timestamp} is negative")
        if isinstance(self.value, bool) or not math.isfinite(float(self.value)):
            raise ValueError(f"value {self.value!r} is not a finite number")
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "lng", float(self.lng))
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "value", float(self.value))

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "DataRecord":
        """Accepts ``{"lat", "lng", "time", "value"}``; fractional seconds are truncated."""
        if not isinstance(obj, Mapping):
            raise ValueError("record must be an object")
        try:
            lat, lng, t, value = obj["lat"], obj["lng"], obj["time"], obj["value"]
        except KeyError as exc:
            raise ValueError(f"record missing field {exc}") from None
        for name, v in (("lat", lat), ("lng", lng), ("time", t), ("value", value)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError(f"field {name} must be numeric, got {v!r}")
        if not math.isfinite(t):
            raise ValueError(f"time {t!r} is not finite")
        return cls(lat, lng, int(math.floor(t)), value)

    def to_json(self) -> dict[str, Any]:
        return {"lat": self.lat, "lng": self.lng, "time": self.timestamp, "value": self.value}


def records_to_array(records: Iterable[DataRecord]) -> np.ndarray:
    recs = list(records)
    arr = np.empty(len(recs), dtype=RECORD_DTYPE)
    for i, r in enumerate(recs):
        arr[i] = (r.lat, r.lng, r.timestamp, r.value)
    return arr


def _array_to_records(arr: np.ndarray) -> list[DataRecord]:
    return [
        DataRecord(float(a), float(b), int(t), float(v))
        for a, b, t, v in zip(arr["lat"].tolist(), arr["lng"].tolist(), arr["time"].tolist(), arr["value"].tolist())
    ]


def _valid_mask(arr: np.ndarray) -> tuple[np.ndarray, list[str]]:
    lat, lng, t, v = arr["lat"], arr["lng"], arr["time"], arr["value"]
    checks = [
        (np.isfinite(lat) & (lat >= -90) & (lat <= 90), "latitude outside [-90, 90]"),
        (np.isfinite(lng) & (lng >= -180) & (lng <= 180), "longitude outside [-180, 180]"),
        (t >= 0, "timestamp is negative"),
        (np.isfinite(v), "value is not finite"),
    ]
    ok = np.ones(len(arr), dtype=bool)
    reasons = [""] * len(arr)
    for good, why in checks:
        for i in np.nonzero(ok & ~good)[0]:
            reasons[i] = why
        ok &= good
    return ok, reasons


def parse_ndjson(text: str) -> tuple[list[DataRecord], list[tuple[int, str]]]:
    """Parse newline-delimited JSON records; returns (records, [(line_index, reason)]).

    Blank lines are skipped but still counted, so indices are 0-based physical lines.
    """
    good, bad = [], []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            good.append(DataRecord.from_json(json.loads(line)))
        except (ValueError, GeometryError) as exc:
            bad.append((i, str(exc)))
    return good, bad


def parse_csv(text: str) -> tuple[list[DataRecord], list[tuple[int, str]]]:
    """Parse ``lat,lng,time,value`` rows; a header row is skipped if present."""
    good, bad = [], []
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if rows and [c.strip().lower() for c in rows[0]] == ["lat", "lng", "time", "value"]:
        rows = rows[1:]
    for i, row in enumerate(rows):
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 columns, got {len(row)}")
            lat, lng, t, v = (float(c) for c in row)
            good.append(DataRecord.from_json({"lat": lat, "lng": lng, "time": t, "value": v}))
        except (ValueError, GeometryError) as exc:
            bad.append((i, str(exc)))
    return good, bad


# ---------------------------------------------------------------------------
# resolution


@dataclass(frozen=True)
class ResolutionSpec:
    """Either a time bucket (``dimension == "time"``) or a boundary-set name."""

    dimension: str
    unit: str

    def __post_init__(self):
        if self.dimension == "time":
            if self.unit not in TIME_BUCKETS:
                raise ValueError(f"unknown time bucket {self.unit!r}")
        elif self.dimension != "space" or not self.unit:
            raise ValueError(f"bad resolution spec {self.dimension!r}/{self.unit!r}")

    @classmethod
    def time(cls, unit: str) -> "ResolutionSpec":
        return cls("time", unit)

    @classmethod
    def space(cls, boundary_set: str) -> "ResolutionSpec":
        return cls("space", boundary_set)

    @property
    def key(self) -> str:
        return f"{self.dimension}:{self.unit}"

    @classmethod
    def from_key(cls, key: str) -> "ResolutionSpec":
        dim, unit = key.split(":", 1)
        return cls(dim, unit)


def bucket_start(ts, unit: str) -> np.ndarray:
    """Floor UNIX timestamps to the start of their UTC bucket.

    Weeks start Monday 00:00 UTC; months and years are calendar aligned.
    """
    ts = np.asarray(ts, dtype=np.int64)
    if unit in ("Second", "Minute", "Hour", "Day"):
        b = _FIXED_SECONDS[unit]
        return ts // b * b
    if unit == "Week":
        b = _FIXED_SECONDS["Week"]
        return (ts - _WEEK_EPOCH) // b * b + _WEEK_EPOCH
    if unit in ("Month", "Year"):
        code = "M" if unit == "Month" else "Y"
        return ts.astype("datetime64[s]").astype(f"datetime64[{code}]").astype("datetime64[s]").astype(np.int64)
    raise ValueError(f"unknown time bucket {unit!r}")


def _representative_point(poly: Polygon) -> GeoPoint:
    """A point guaranteed inside ``poly``: its centroid when that works,
    otherwise the midpoint of the first interior span on the middle scanline."""
    x, y = poly.lngs, poly.lats
    cross = x[:-1] * y[1:] - x[1:] * y[:-1]
    a = cross.sum() / 2
    if a != 0:
        cx = float(((x[:-1] + x[1:]) * cross).sum() / (6 * a))
        cy = float(((y[:-1] + y[1:]) * cross).sum() / (6 * a))
        if points_in_polygon([cy], [cx], poly)[0]:
            return GeoPoint(cy, cx)
    ys = np.unique(y)
    mids = (ys[:-1] + ys[1:]) / 2
    for yl in mids[np.argsort(np.abs(mids - (ys[0] + ys[-1]) / 2))]:
        y0, y1 = y[:-1], y[1:]
        hit = (y0 > yl) != (y1 > yl)
        xs = np.sort(x[:-1][hit] + (yl - y0[hit]) * (x[1:][hit] - x[:-1][hit]) / (y1[hit] - y0[hit]))
        if len(xs) >= 2 and xs[1] > xs[0]:
            return GeoPoint(float(yl), float((xs[0] + xs[1]) / 2))
    raise GeometryError("cannot find an interior point")


@dataclass(frozen=True)
class BoundarySet:
    """Named regions used for spatial coarsening, each with a representative point."""

    name: str
    regions: tuple[tuple[str, Polygon, GeoPoint], ...]

    def __post_init__(self):
        for rid, poly, rep in self.regions:
            if not points_in_polygon([rep.lat], [rep.lng], poly)[0]:
                raise GeometryError(f"representative point of region {rid!r} is outside it")

    @classmethod
    def from_geojson(cls, name: str, fc: Mapping[str, Any]) -> "BoundarySet":
        if not isinstance(fc, Mapping) or fc.get("type") != "FeatureCollection":
            raise GeometryError("boundary set must be a GeoJSON FeatureCollection")
        regions = []
        seen = set()
        for feat in fc.get("features", []):
            props = feat.get("properties") or {}
            rid = props.get("id", feat.get("id"))
            if rid is None:
                raise GeometryError("every boundary feature needs an 'id' property")
            rid = str(rid)
            if rid in seen:
                raise GeometryError(f"duplicate boundary region id {rid!r}")
            seen.add(rid)
            poly = polygon_from_json(feat)
            rep = props.get("representative")
            point = GeoPoint(rep[1], rep[0]) if rep else _representative_point(poly)
            regions.append((rid, poly, point))
        if not regions:
            raise GeometryError("boundary set has no features")
        return cls(name, tuple(regions))

    def to_geojson(self) -> dict[str, Any]:
        return {
            "type": "FeatureCollection",
            "name": self.name,
            "features": [
                {
                    "type": "Feature",
                    "properties": {"id": rid, "representative": [rep.lng, rep.lat]},
                    "geometry": poly.to_geojson(),
                }
                for rid, poly, rep in self.regions
            ],
        }

    def assign(self, lats, lngs) -> np.ndarray:
        """Index of the first region containing each point, -1 when none does."""
        lats = np.asarray(lats, dtype=float)
        lngs = np.asarray(lngs, dtype=float)
        out = np.full(lats.shape, -1, dtype=np.int64)
        for i, (_, poly, _) in enumerate(self.regions):
            todo = out < 0
            if not todo.any():
                break
            b = poly.bbox
            cand = todo & (lats >= b.lat_min) & (lats <= b.lat_max) & (lngs >= b.lng_min) & (lngs <= b.lng_max)
            idx = np.nonzero(cand)[0]
            if idx.size:
                inside = points_in_polygon(lats[idx], lngs[idx], poly, indexed=True)
                out[idx[inside]] = i
        return out


def coarsen_records(
    arr: np.ndarray, spec: ResolutionSpec, boundaries: BoundarySet | None = None
) -> tuple[np.ndarray, int]:
    """Return (coarsened copy, number of dropped records)."""
    out = arr.copy()
    if spec.dimension == "time":
        out["time"] = bucket_start(out["time"], spec.unit)
        return out, 0
    if boundaries is None:
        raise MissingBoundarySet(f"space resolution {spec.unit!r} needs a boundary set")
    region = boundaries.assign(out["lat"], out["lng"])
    keep = region >= 0
    reps_lat = np.array([r[2].lat for r in boundaries.regions])
    reps_lng = np.array([r[2].lng for r in boundaries.regions])
    out = out[keep]
    out["lat"] = reps_lat[region[keep]]
    out["lng"] = reps_lng[region[keep]]
    return out, int((~keep).sum())


# ---------------------------------------------------------------------------
# metadata


@dataclass(frozen=True)
class StreamMeta:
    stream_id: str
    owner: str
    description: str = ""
    count: int = 0
    t_min: int | None = None
    t_max: int | None = None
    envelope: BoundingBox | None = None
    replicas: Mapping[str, str] = field(default_factory=dict)
    hidden: bool = False
    source: str | None = None
    resolution: ResolutionSpec | None = None
    dropped: int = 0

    @property
    def span(self) -> TimeWindow | None:
        """Half-open window covering every stored timestamp."""
        if self.t_min is None:
            return None
        return TimeWindow(self.t_min, self.t_max + 1)

    def extended(self, arr: np.ndarray, dropped: int = 0) -> "StreamMeta":
        if len(arr) == 0:
            return replace(self, dropped=self.dropped + dropped)
        t_lo, t_hi = int(arr["time"].min()), int(arr["time"].max())
        env = BoundingBox(
            float(arr["lat"].min()), float(arr["lat"].max()), float(arr["lng"].min()), float(arr["lng"].max())
        )
        if self.envelope is not None:
            e = self.envelope
            env = BoundingBox(
                min(e.lat_min, env.lat_min), max(e.lat_max, env.lat_max),
                min(e.lng_min, env.lng_min), max(e.lng_max, env.lng_max),
            )
            t_lo, t_hi = min(self.t_min, t_lo), max(self.t_max, t_hi)
        return replace(
            self, count=self.count + len(arr), t_min=t_lo, t_max=t_hi, envelope=env, dropped=self.dropped + dropped
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "DsID": self.stream_id,
            "owner": self.owner,
            "description": self.description,
            "count": self.count,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "envelope": self.envelope.to_spacebox() if self.envelope else None,
            "replicas": dict(self.replicas),
            "hidden": self.hidden,
            "source": self.source,
            "resolution": self.resolution.key if self.resolution else None,
            "dropped": self.dropped,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "StreamMeta":
        return cls(
            stream_id=obj["DsID"],
            owner=obj["owner"],
            description=obj.get("description", ""),
            count=obj.get("count", 0),
            t_min=obj.get("t_min"),
            t_max=obj.get("t_max"),
            envelope=BoundingBox.from_spacebox(obj["envelope"]) if obj.get("envelope") else None,
            replicas=dict(obj.get("replicas", {})),
            hidden=obj.get("hidden", False),
            source=obj.get("source"),
            resolution=ResolutionSpec.from_key(obj["resolution"]) if obj.get("resolution") else None,
            dropped=obj.get("dropped", 0),
        )


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "errors": [{"index": i, "reason": r} for i, r in self.errors],
        }


# ---------------------------------------------------------------------------
# index


class _Snapshot:
    """Immutable grid index over one point-in-time copy of a stream.

    Records are sorted by (grid cell, timestamp) and addressed through a
    combined int64 key ``cell << 32 | time_offset``, so one vectorised
    ``searchsorted`` pair yields the candidate run of every covered cell.
    """

    def __init__(self, data: np.ndarray):
        self.n = len(data)
        if self.n == 0:
            self.data = data
            return
        lat, lng, t = data["lat"], data["lng"], data["time"]
        self.lat0, self.lng0 = float(lat.min()), float(lng.min())
        self.t0, self.t1 = int(t.min()), int(t.max())
        g = int(min(_MAX_GRID, max(1, math.sqrt(self.n / _CELL_TARGET))))
        self.grid = g
        self.cell_lat = max(float(lat.max()) - self.lat0, 1e-9) / g
        self.cell_lng = max(float(lng.max()) - self.lng0, 1e-9) / g
        self.tshift = max(0, (self.t1 - self.t0).bit_length() - 32)
        rows = self._rows(lat)
        cols = self._cols(lng)
        cell = rows * g + cols
        toff = (t - self.t0) >> self.tshift
        keys = (cell << 32) | toff
        order = np.argsort(keys, kind="stable")
        self.keys = keys[order]
        self.seq = order
        self.data = data[order]

    def _rows(self, lat):
        return np.clip(np.floor((np.asarray(lat) - self.lat0) / self.cell_lat), 0, self.grid - 1).astype(np.int64)

    def _cols(self, lng):
        return np.clip(np.floor((np.asarray(lng) - self.lng0) / self.cell_lng), 0, self.grid - 1).astype(np.int64)

    def query(self, box: BoundingBox, window: TimeWindow) -> tuple[np.ndarray, int]:
        """Return (matching records in insertion order, candidates examined)."""
        empty = self.data[:0]
        if self.n == 0:
            return empty, 0
        lo_t = max(window.start, self.t0)
        hi_t = min(window.end - 1, self.t1)
        if lo_t > hi_t:
            return empty, 0
        r0, r1 = self._rows([box.lat_min, box.lat_max])
        c0, c1 = self._cols([box.lng_min, box.lng_max])
        rows = np.arange(r0, r1 + 1, dtype=np.int64)
        cols = np.arange(c0, c1 + 1, dtype=np.int64)
        cells = (rows[:, None] * self.grid + cols[None, :]).ravel() << 32
        lo_key = cells + ((lo_t - self.t0) >> self.tshift)
        hi_key = cells + (((hi_t - self.t0) >> self.tshift) + 1)
        lo = np.searchsorted(self.keys, lo_key, side="left")
        hi = np.searchsorted(self.keys, hi_key, side="left")
        lengths = hi - lo
        total = int(lengths.sum())
        if total == 0:
            return empty, 0
        starts = np.repeat(lo - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
        idx = starts + np.arange(total)
        cand = self.data[idx]
        m = (
            (cand["lat"] >= box.lat_min) & (cand["lat"] <= box.lat_max)
            & (cand["lng"] >= box.lng_min) & (cand["lng"] <= box.lng_max)
            & (cand["time"] >= window.start) & (cand["time"] < window.end)
        )
        hit = idx[m]
        hit = hit[np.argsort(self.seq[hit], kind="stable")]
        return self.data[hit], total


class _Stream:
    def __init__(self, meta: StreamMeta, chunks: list[np.ndarray] | None = None):
        self.meta = meta
        self.chunks: list[np.ndarray] = chunks or []
        self.snapshot: _Snapshot | None = None
        self.lock = threading.RLock()

    def view(self) -> _Snapshot:
        snap = self.snapshot
        if snap is not None and snap.n == self.meta.count:
            return snap
        with self.lock:
            snap = self.snapshot
            if snap is None or snap.n != self.meta.count:
                data = np.concatenate(self.chunks) if self.chunks else np.empty(0, RECORD_DTYPE)
                if len(self.chunks) > 1:
                    self.chunks = [data]
                snap = _Snapshot(data)
                self.snapshot = snap
            return snap

    def all_records(self) -> np.ndarray:
        chunks = list(self.chunks)
        return np.concatenate(chunks) if chunks else np.empty(0, RECORD_DTYPE)


def _file_id(stream_id: str) -> str:
    return base64.urlsafe_b64encode(stream_id.encode()).decode().rstrip("=") or "_"


class Store:
    """Stream store; ``data_dir=None`` keeps everything in memory."""

    def __init__(self, data_dir: str | os.PathLike | None = None, *, fsync: bool = True):
        self.data_dir = os.fspath(data_dir) if data_dir is not None else None
        self.fsync = fsync
        self._lock = threading.RLock()
        self._streams: dict[str, _Stream] = {}
        self._users: set[str] = set()
        self._boundaries: dict[str, BoundarySet] = {}
        self._sections: dict[str, Any] = {}
        self.counters = {"range_queries": 0, "candidates": 0}
        if self.data_dir is not None:
            os.makedirs(os.path.join(self.data_dir, "streams"), exist_ok=True)
            self._load()

    # -- catalog ---------------------------------------------------------

    @property
    def _catalog_path(self) -> str:
        return os.path.join(self.data_dir, "catalog.json")

    def _log_path(self, stream_id: str) -> str:
        return os.path.join(self.data_dir, "streams", _file_id(stream_id) + ".rec")

    def _load(self) -> None:
        if not os.path.exists(self._catalog_path):
            return
        with open(self._catalog_path, encoding="utf-8") as f:
            cat = json.load(f)
        self._users = set(cat.get("users", []))
        self._sections = dict(cat.get("sections", {}))
        for name, fc in cat.get("boundaries", {}).items():
            self._boundaries[name] = BoundarySet.from_geojson(name, fc)
        for obj in cat.get("streams", []):
            meta = StreamMeta.from_json(obj)
            path = self._log_path(meta.stream_id)
            data = np.fromfile(path, dtype=RECORD_DTYPE) if os.path.exists(path) else np.empty(0, RECORD_DTYPE)
            if len(data) > meta.count:
                # torn batch: the catalog is written only after the log append
                log.warning("stream %s: discarding %d uncommitted records", meta.stream_id, len(data) - meta.count)
                data = data[: meta.count]
                with open(path, "r+b") as f:
                    f.truncate(meta.count * RECORD_DTYPE.itemsize)
            elif len(data) < meta.count:
                raise StoreError(f"stream {meta.stream_id!r}: log shorter than catalog count")
            self._streams[meta.stream_id] = _Stream(meta, [data] if len(data) else [])

    def _save(self) -> None:
        if self.data_dir is None:
            return
        cat = {
            "users": sorted(self._users),
            "streams": [s.meta.to_json() for s in self._streams.values()],
            "boundaries": {n: b.to_geojson() for n, b in self._boundaries.items()},
            "sections": self._sections,
        }
        fd, tmp = tempfile.mkstemp(dir=self.data_dir, prefix=".catalog-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(cat, f)
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        os.replace(tmp, self._catalog_path)

    def get_section(self, name: str, default: Any = None) -> Any:
        return self._sections.get(name, default)

    def put_section(self, name: str, value: Any) -> None:
        """Persist a JSON-serialisable blob in the catalog under ``name``."""
        with self._lock:
            self._sections[name] = value
            self._save()

    # -- users & boundaries ---------------------------------------------

    def add_user(self, user_id: str) -> None:
        with self._lock:
            if user_id not in self._users:
                self._users.add(user_id)
                self._save()

    def has_user(self, user_id: str) -> bool:
        return user_id in self._users

    @property
    def users(self) -> frozenset[str]:
        return frozenset(self._users)

    def register_boundary_set(self, boundaries: BoundarySet) -> None:
        with self._lock:
            self._boundaries[boundaries.name] = boundaries
            self._save()

    def boundary_set(self, name: str) -> BoundarySet | None:
        return self._boundaries.get(name)

    # -- streams ---------------------------------------------------------

    def _stream(self, stream_id: str) -> _Stream:
        try:
            return self._streams[stream_id]
        except KeyError:
            raise UnknownStream(stream_id) from None

    def create_stream(self, owner: str, stream_id: str, description: str = "") -> StreamMeta:
        if not isinstance(stream_id, str) or not stream_id:
            raise StoreError("stream id must be a non-empty string")
        with self._lock:
            if owner not in self._users:
                raise UnknownOwner(f"unknown owner {owner!r}")
            if stream_id in self._streams:
                raise DuplicateStream(f"stream {stream_id!r} already exists")
            meta = StreamMeta(stream_id=stream_id, owner=owner, description=description)
            self._streams[stream_id] = _Stream(meta)
            self._save()
            return meta

    def meta(self, stream_id: str) -> StreamMeta:
        return self._stream(stream_id).meta

    def has_stream(self, stream_id: str) -> bool:
        return stream_id in self._streams

    def streams(self, include_hidden: bool = False) -> list[StreamMeta]:
        return [s.meta for s in self._streams.values() if include_hidden or not s.meta.hidden]

    def ingest(self, stream_id: str, records: Iterable[DataRecord | Mapping] | np.ndarray, caller: str) -> IngestReport:
        """Validate and append a batch on behalf of ``caller`` (must own the stream).

        Invalid records are reported individually and the rest of the batch
        is still accepted.  Replica streams are updated before returning.
        """
        stream = self._stream(stream_id)
        if stream.meta.hidden:
            raise UnknownStream(stream_id)
        if caller != stream.meta.owner:
            raise NotOwner(f"{caller!r} does not own stream {stream_id!r}")
        report = IngestReport()
        if isinstance(records, np.ndarray):
            arr = np.asarray(records, dtype=RECORD_DTYPE)
            ok, reasons = _valid_mask(arr)
            report.errors = [(int(i), reasons[i]) for i in np.nonzero(~ok)[0]]
            arr = arr[ok]
        else:
            good = []
            for i, r in enumerate(records):
                try:
                    good.append(r if isinstance(r, DataRecord) else DataRecord.from_json(r))
                except (ValueError, GeometryError) as exc:
                    report.errors.append((i, str(exc)))
            arr = records_to_array(good)
        report.rejected = len(report.errors)
        report.accepted = len(arr)
        self._append(stream, arr)
        return report

    def _append(self, stream: _Stream, arr: np.ndarray, dropped: int = 0) -> None:
        with stream.lock:
            if len(arr):
                if self.data_dir is not None:
                    with open(self._log_path(stream.meta.stream_id), "ab") as f:
                        arr.tofile(f)
                        f.flush()
                        if self.fsync:
                            os.fsync(f.fileno())
                stream.chunks.append(arr.copy())
            stream.meta = stream.meta.extended(arr, dropped)
            with self._lock:
                self._save()
            for key, rid in stream.meta.replicas.items():
                replica = self._stream(rid)
                spec = ResolutionSpec.from_key(key)
                coarse, lost = coarsen_records(arr, spec, self._boundaries.get(spec.unit))
                self._append(replica, coarse, lost)

    def range_query_array(self, stream_id: str, box: BoundingBox, window: TimeWindow) -> np.ndarray:
        """Structured array of records inside ``box`` (inclusive) during ``window``."""
        stream = self._stream(stream_id)
        out, examined = stream.view().query(box, window)
        self.counters["range_queries"] += 1
        self.counters["candidates"] += examined
        return out

    def range_query(self, stream_id: str, box: BoundingBox, window: TimeWindow) -> list[DataRecord]:
        return _array_to_records(self.range_query_array(stream_id, box, window))

    def records(self, stream_id: str) -> np.ndarray:
        """Every stored record of a stream, in insertion order."""
        return self._stream(stream_id).all_records()

    # -- replicas --------------------------------------------------------

    def coarsen_stream(
        self, stream_id: str, spec: ResolutionSpec, boundaries: BoundarySet | None = None
    ) -> str:
        """Create (or return) the hidden replica of ``stream_id`` at ``spec``."""
        source = self._stream(stream_id)
        if spec.dimension == "space":
            boundaries = boundaries or self._boundaries.get(spec.unit)
            if boundaries is None:
                raise MissingBoundarySet(f"no boundary set named {spec.unit!r}")
            if boundaries.name not in self._boundaries:
                self.register_boundary_set(boundaries)
        with source.lock:
            existing = source.meta.replicas.get(spec.key)
            if existing is not None:
                return existing
            rid = f"{stream_id}~{spec.unit}"
            with self._lock:
                if rid in self._streams:
                    raise DuplicateStream(f"replica id {rid!r} already in use")
                meta = StreamMeta(
                    stream_id=rid, owner=source.meta.owner, hidden=True, source=stream_id, resolution=spec,
                    description=f"{spec.unit} resolution replica of {stream_id}",
                )
                replica = _Stream(meta)
                self._streams[rid] = replica
            coarse, lost = coarsen_records(source.all_records(), spec, boundaries)
            self._append(replica, coarse, lost)
            source.meta = replace(source.meta, replicas={**source.meta.replicas, spec.key: rid})
            with self._lock:
                self._save()
            if lost:
                log.info("replica %s dropped %d records outside every %s region", rid, lost, spec.unit)
            return rid

    def ensure_replica(self, stream_id: str, specs: Sequence[ResolutionSpec]) -> str:
        """Apply ``specs`` in order, creating intermediate replicas as needed."""
        sid = stream_id
        for spec in specs:
            sid = self.coarsen_stream(sid, spec)
        return sid

    def find_replica(self, stream_id: str, specs: Sequence[ResolutionSpec]) -> str | None:
        sid = stream_id
        for spec in specs:
            sid = self._stream(sid).meta.replicas.get(spec.key)
            if sid is None:
                return None
        return sid
