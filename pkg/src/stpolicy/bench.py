"""Benchmark harness: synthetic stream, random query workload, and a
comparison of direct queries (mode ``d``) against policy-enforced queries
without (``a``) and with (``b``) the optimizer.

::

    bench generate --n 1000000 --seed 1 --out bench-data
    bench run --data bench-data --mode d,a,b --queries 1000 --report out.json
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from .geometry import BoundingBox, GeometryError, Polygon, polygon_from_json, ring_area
from .service import AccessControlService, QueryRequest
from .store import RECORD_DTYPE, Store
from .temporal import TimeWindow

log = logging.getLogger(__name__)

__all__ = [
    "KM_PER_DEG_LAT",
    "BenchConfig",
    "ModeReport",
    "BenchReport",
    "BenchSetup",
    "km_box",
    "generate_records",
    "generate",
    "load_dataset",
    "make_queries",
    "la_like_region",
    "load_region",
    "bundled_region",
    "subsample_region",
    "home_box",
    "setup",
    "run_mode",
    "run",
    "format_table",
    "main",
]

KM_PER_DEG_LAT = 111.32
OWNER, USER, STREAM = "o_a", "u_b", "d_h"
BENCH_POLICY = f"What({STREAM}).Where(LA, NOT HOME).Whom({USER})"
MODES = ("d", "a", "b")
_MODE_TITLES = {"d": "direct", "a": "policy", "b": "policy+optimizer"}


@dataclass
class BenchConfig:
    n: int = 1_000_000
    seed: int = 1
    area_km: float = 500.0
    span_days: int = 365
    center: tuple[float, float] = (34.05, -118.25)
    start: int = 1388534400  # 2014-01-01T00:00:00Z
    queries: int = 1000
    query_km: float = 50.0
    query_days: float = 14.0
    query_seed: int = 7
    subsample: int | None = None
    home_fraction: float = 0.01

    def __post_init__(self):
        if self.n <= 0 or self.queries <= 0 or self.span_days <= 0:
            raise ValueError("record count, query count and span must be positive")
        if not 0 < self.query_km <= self.area_km:
            raise ValueError("query box must fit inside the generation area")
        if not 0 < self.query_days * 86400 <= self.span_days * 86400:
            raise ValueError("query range must fit inside the time span")

    @property
    def area(self) -> BoundingBox:
        return km_box(self.center, self.area_km)

    @property
    def span(self) -> TimeWindow:
        return TimeWindow(self.start, self.start + self.span_days * 86400)


def km_box(center: tuple[float, float], side_km: float) -> BoundingBox:
    """Square of ``side_km`` kilometres around ``center`` (lat, lng)."""
    lat, lng = center
    dlat = side_km / 2 / KM_PER_DEG_LAT
    dlng = side_km / 2 / (KM_PER_DEG_LAT * math.cos(math.radians(lat)))
    return BoundingBox(lat - dlat, lat + dlat, lng - dlng, lng + dlng)


# ---------------------------------------------------------------------------
# data


def generate_records(cfg: BenchConfig) -> np.ndarray:
    """Uniform records over the generation area and time span; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    a, span = cfg.area, cfg.span
    out = np.empty(cfg.n, RECORD_DTYPE)
    out["lat"] = rng.uniform(a.lat_min, a.lat_max, cfg.n)
    out["lng"] = rng.uniform(a.lng_min, a.lng_max, cfg.n)
    out["time"] = rng.integers(span.start, span.end, cfg.n)
    out["value"] = rng.random(cfg.n)
    return out


def generate(cfg: BenchConfig, out_dir: str) -> Store:
    """Write a store in ``out_dir`` holding one generated stream."""
    store = Store(out_dir, fsync=False)
    if store.has_stream(STREAM):
        raise FileExistsError(f"{out_dir} already holds a benchmark stream")
    store.add_user(OWNER)
    store.create_stream(OWNER, STREAM, "synthetic benchmark stream")
    store.ingest(STREAM, generate_records(cfg), OWNER)
    store.put_section("bench", asdict(cfg))
    return store


def load_dataset(data_dir: str) -> tuple[BenchConfig, np.ndarray]:
    store = Store(data_dir)
    cfg = store.get_section("bench")
    if cfg is None or not store.has_stream(STREAM):
        raise FileNotFoundError(f"{data_dir} holds no generated benchmark dataset")
    cfg["center"] = tuple(cfg["center"])
    return BenchConfig(**cfg), store.records(STREAM)


def make_queries(cfg: BenchConfig) -> list[QueryRequest]:
    """Random query boxes inside the generation area and ranges inside the span."""
    rng = np.random.default_rng(cfg.query_seed)
    a, span = cfg.area, cfg.span
    probe = km_box(cfg.center, cfg.query_km)
    half_lat = (probe.lat_max - probe.lat_min) / 2
    half_lng = (probe.lng_max - probe.lng_min) / 2
    dur = int(cfg.query_days * 86400)
    lats = rng.uniform(a.lat_min + half_lat, a.lat_max - half_lat, cfg.queries)
    lngs = rng.uniform(a.lng_min + half_lng, a.lng_max - half_lng, cfg.queries)
    starts = rng.integers(span.start, span.end - dur, cfg.queries, endpoint=True)
    return [
        QueryRequest(
            USER,
            (STREAM,),
            BoundingBox(float(la - half_lat), float(la + half_lat), float(ln - half_lng), float(ln + half_lng)),
            TimeWindow(int(t), int(t) + dur),
        )
        for la, ln, t in zip(lats, lngs, starts)
    ]


# ---------------------------------------------------------------------------
# regions


def la_like_region(
    n_vertices: int = 1749,
    area_km2: float = 5000.0,
    center: tuple[float, float] = (34.05, -118.25),
    seed: int = 1749,
) -> Polygon:
    """Deterministic concave, star-shaped ring of ``n_vertices`` around ``center``.

    Radii follow a few low-frequency harmonics plus smoothed noise; angles
    increase strictly, so the ring is simple.  The ring is scaled to
    ``area_km2`` in the local kilometre projection.
    """
    rng = np.random.default_rng(seed)
    k = np.arange(n_vertices)
    theta = 2 * np.pi * (k + rng.uniform(-0.3, 0.3, n_vertices)) / n_vertices
    noise = np.convolve(np.tile(rng.normal(0, 1, n_vertices), 3), np.ones(15) / 15, mode="same")[
        n_vertices : 2 * n_vertices
    ]
    r = 1 + 0.28 * np.sin(3 * theta + 0.7) + 0.12 * np.sin(7 * theta + 2.1) + 0.05 * np.sin(19 * theta) + 0.04 * noise
    x, y = r * np.cos(theta), r * np.sin(theta)
    unit_area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    scale = math.sqrt(area_km2 / unit_area)
    lat0, lng0 = center
    lats = lat0 + y * scale / KM_PER_DEG_LAT
    lngs = lng0 + x * scale / (KM_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return Polygon(list(zip(np.round(lats, 6), np.round(lngs, 6))))


def load_region(path: str) -> Polygon:
    """Polygon from a GeoJSON file (geometry, Feature, or first feature of a collection)."""
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    if isinstance(obj, dict) and obj.get("type") == "FeatureCollection":
        feats = obj.get("features") or []
        if not feats:
            raise GeometryError(f"{path}: empty FeatureCollection")
        obj = feats[0]
    return polygon_from_json(obj)


def bundled_region() -> Polygon:
    text = resources.files("stpolicy").joinpath("data/la_region.geojson").read_text(encoding="utf-8")
    obj = json.loads(text)
    return polygon_from_json(obj["features"][0] if obj.get("type") == "FeatureCollection" else obj)


def subsample_region(poly: Polygon, target: int, *, seed: int = 0, max_tries: int = 32) -> Polygon:
    """Keep ``target`` vertices of ``poly`` chosen at random, in ring order.

    Each candidate ring is re-validated; a self-intersecting draw is retried
    with the next seed, up to ``max_tries`` attempts.
    """
    n = len(poly) - 1  # distinct vertices; the ring repeats the first one
    if not 3 <= target <= n:
        raise ValueError(f"target must lie in [3, {n}], got {target}")
    if target == n:
        return poly
    lats, lngs = poly.lats[:-1], poly.lngs[:-1]
    last: Exception | None = None
    for attempt in range(max_tries):
        rng = np.random.default_rng(seed + attempt)
        keep = np.sort(rng.choice(n, size=target, replace=False))
        try:
            return Polygon(list(zip(lats[keep], lngs[keep])))
        except GeometryError as exc:
            last = exc
    raise GeometryError(f"no simple {target}-vertex subsample in {max_tries} tries: {last}")


def home_box(region: Polygon, fraction: float = 0.01) -> BoundingBox:
    """Box with ``fraction`` of the region envelope's area, centred on the region centroid."""
    x, y = region.lngs, region.lats
    cross = x[:-1] * y[1:] - x[1:] * y[:-1]
    a = cross.sum() / 2
    cx = float(((x[:-1] + x[1:]) * cross).sum() / (6 * a))
    cy = float(((y[:-1] + y[1:]) * cross).sum() / (6 * a))
    env = region.bbox
    f = math.sqrt(fraction) / 2
    dlat, dlng = (env.lat_max - env.lat_min) * f, (env.lng_max - env.lng_min) * f
    return BoundingBox(cy - dlat, cy + dlat, cx - dlng, cx + dlng)


# ---------------------------------------------------------------------------
# runs


@dataclass
class ModeReport:
    mode: str
    points: list[int] = field(default_factory=list)
    latency_ms: list[float] = field(default_factory=list)
    rejected: list[bool] = field(default_factory=list)

    @property
    def mean_points(self) -> float:
        return statistics.fmean(self.points) if self.points else 0.0

    @property
    def mean_latency_ms(self) -> float:
        return statistics.fmean(self.latency_ms) if self.latency_ms else 0.0

    @property
    def rejections(self) -> int:
        return sum(self.rejected)

    def summary(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "queries": len(self.points),
            "mean_points": self.mean_points,
            "mean_latency_ms": self.mean_latency_ms,
            "rejections": self.rejections,
        }


@dataclass
class BenchReport:
    config: BenchConfig
    region_vertices: int
    modes: dict[str, ModeReport]

    def to_json(self, per_query: bool = False) -> dict[str, Any]:
        out = {
            "config": asdict(self.config),
            "region_vertices": self.region_vertices,
            "modes": {m: r.summary() for m, r in self.modes.items()},
        }
        if per_query:
            for m, r in self.modes.items():
                out["modes"][m].update(points=r.points, latency_ms=r.latency_ms, rejected=r.rejected)
        return out


@dataclass
class BenchSetup:
    store: Store
    services: dict[str, AccessControlService]
    region: Polygon
    home: BoundingBox


def setup(records: np.ndarray, region: Polygon, home: BoundingBox) -> BenchSetup:
    """In-memory store with the generated stream and the benchmark policy installed."""
    store = Store()
    opt = AccessControlService(store, optimize=True)
    for user in (OWNER, USER):
        opt.add_user(user)
    opt.create_stream(OWNER, STREAM, "synthetic benchmark stream")
    opt.ingest(OWNER, STREAM, records)
    opt.define_keyword(OWNER, {"Name": "LA", "Type": "Where", "Polygon": region.to_json()})
    opt.define_keyword(OWNER, {"Name": "HOME", "Type": "Where", "Polygon": Polygon.from_box(home).to_json()})
    opt.create_policy(OWNER, BENCH_POLICY)
    plain = AccessControlService(store, optimize=False)
    return BenchSetup(store, {"d": opt, "a": plain, "b": opt}, region, home)


def run_mode(bench: BenchSetup, mode: str, queries: Sequence[QueryRequest]) -> ModeReport:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    svc = bench.services[mode]
    caller = OWNER if mode == "d" else USER
    report = ModeReport(mode)
    for q in queries:
        if mode == "d":
            q = QueryRequest(OWNER, q.stream_ids, q.box, q.time_range)
        t0 = time.perf_counter()
        res = svc.handle_query(caller, q).results[0]
        report.latency_ms.append((time.perf_counter() - t0) * 1e3)
        report.points.append(res.count)
        report.rejected.append(res.status == "rejected-by-policy")
    return report


def run(
    cfg: BenchConfig,
    records: np.ndarray,
    region: Polygon | None = None,
    modes: Sequence[str] = MODES,
    bench: BenchSetup | None = None,
) -> BenchReport:
    region = region if region is not None else bundled_region()
    if cfg.subsample:
        region = subsample_region(region, cfg.subsample, seed=cfg.seed)
    if bench is None:
        bench = setup(records, region, home_box(region, cfg.home_fraction))
    queries = make_queries(cfg)
    # build the index and warm caches outside the timed loop
    for mode in modes:
        run_mode(bench, mode, queries[:3])
    return BenchReport(cfg, len(region) - 1, {m: run_mode(bench, m, queries) for m in modes})


def format_table(report: BenchReport) -> str:
    cfg = report.config
    lines = [
        f"records={cfg.n:,}  area={cfg.area_km:g} km  span={cfg.span_days} d  "
        f"queries={cfg.queries}  box={cfg.query_km:g} km  range={cfg.query_days:g} d  "
        f"region vertices={report.region_vertices}",
        f"{'Query':<8}{'mode':<18}{'No. of points':>15}{'Time (ms)':>12}{'Rejected':>10}",
    ]
    for m, r in report.modes.items():
        lines.append(
            f"{'Query_' + m:<8}{_MODE_TITLES[m]:<18}{r.mean_points:>15.1f}{r.mean_latency_ms:>12.3f}{r.rejections:>10}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CLI


def _generate_cmd(args: argparse.Namespace) -> int:
    cfg = BenchConfig(n=args.n, seed=args.seed, area_km=args.area_km, span_days=args.span_days)
    t0 = time.perf_counter()
    generate(cfg, args.out)
    print(f"generated {cfg.n:,} records into {args.out} in {time.perf_counter() - t0:.1f}s")
    return 0


def _run_cmd(args: argparse.Namespace) -> int:
    cfg, records = load_dataset(args.data)
    cfg.queries, cfg.query_km, cfg.query_days = args.queries, args.query_km, args.query_days
    cfg.query_seed, cfg.subsample, cfg.home_fraction = args.query_seed, args.subsample, args.home_fraction
    cfg.__post_init__()
    region = load_region(args.region) if args.region else bundled_region()
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        print(f"unknown mode(s): {', '.join(bad)}", file=sys.stderr)
        return 2
    report = run(cfg, records, region, modes)
    print(format_table(report))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report.to_json(per_query=True), f, indent=1)
    return 0


def _region_cmd(args: argparse.Namespace) -> int:
    poly = la_like_region(args.vertices, args.area_km2)
    fc = {
        "type": "FeatureCollection",
        "features": [{"type": "Feature", "properties": {"name": "LA"}, "geometry": poly.to_geojson()}],
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(fc, f)
    km2 = abs(ring_area(poly.lats, poly.lngs)) * KM_PER_DEG_LAT**2 * math.cos(math.radians(34.05))
    print(f"wrote {len(poly) - 1}-vertex region of ~{km2:,.0f} km^2 to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="policy-enforcement benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic stream")
    g.add_argument("--n", type=int, default=1_000_000)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--area-km", type=float, default=500.0)
    g.add_argument("--span-days", type=int, default=365)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_generate_cmd)

    r = sub.add_parser("run", help="run the query workload")
    r.add_argument("--data", required=True, help="directory written by 'bench generate'")
    r.add_argument("--mode", default="d,a,b", help="comma-separated subset of d, a, b")
    r.add_argument("--queries", type=int, default=1000)
    r.add_argument("--query-km", type=float, default=50.0)
    r.add_argument("--query-days", type=float, default=14.0)
    r.add_argument("--query-seed", type=int, default=7)
    r.add_argument("--region", help="GeoJSON polygon used as the allowed region (default: bundled)")
    r.add_argument("--subsample", type=int, help="randomly keep this many region vertices")
    r.add_argument("--home-fraction", type=float, default=0.01)
    r.add_argument("--report", help="write a JSON report with per-query results")
    r.set_defaults(func=_run_cmd)

    reg = sub.add_parser("region", help="write the synthetic region as GeoJSON")
    reg.add_argument("--vertices", type=int, default=1749)
    reg.add_argument("--area-km2", type=float, default=5000.0)
    reg.add_argument("--out", required=True)
    reg.set_defaults(func=_region_cmd)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
