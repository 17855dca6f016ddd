import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpolicy.geometry import BoundingBox, GeometryError, Polygon, points_in_polygon
from stpolicy.store import (
    RECORD_DTYPE,
    TIME_BUCKETS,
    BoundarySet,
    DataRecord,
    DuplicateStream,
    MissingBoundarySet,
    NotOwner,
    ResolutionSpec,
    Store,
    UnknownOwner,
    UnknownStream,
    bucket_start,
    coarsen_records,
    parse_csv,
    parse_ndjson,
)
from stpolicy.temporal import TimeWindow

from oracles import bucket_floor, point_in_ring


def _store(tmp_path=None):
    s = Store(tmp_path, fsync=False)
    s.add_user("o_1")
    s.add_user("o_2")
    return s


def _records(rng, n, t_lo=0, t_hi=10**8):
    arr = np.empty(n, dtype=RECORD_DTYPE)
    arr["lat"] = rng.uniform(30, 31, n)
    arr["lng"] = rng.uniform(-100, -99, n)
    arr["time"] = rng.integers(t_lo, t_hi, n)
    arr["value"] = rng.normal(size=n)
    return arr


def _scan(arr, box, window):
    m = (arr["lat"] >= box.lat_min) & (arr["lat"] <= box.lat_max)
    m &= (arr["lng"] >= box.lng_min) & (arr["lng"] <= box.lng_max)
    m &= (arr["time"] >= window.start) & (arr["time"] < window.end)
    return arr[m]


def test_create_stream_and_errors():
    s = _store()
    meta = s.create_stream("o_1", "d_h", "health")
    assert meta.owner == "o_1" and meta.count == 0 and meta.span is None
    with pytest.raises(DuplicateStream):
        s.create_stream("o_1", "d_h")
    with pytest.raises(UnknownOwner):
        s.create_stream("nobody", "x")
    with pytest.raises(UnknownStream):
        s.meta("nope")


def test_ingest_three_updates_meta():
    s = _store()
    s.create_stream("o_1", "d")
    recs = [DataRecord(30.1, -99.5, t, 1.0) for t in (50, 10, 30)]
    s.ingest("d", recs, "o_1")
    m = s.meta("d")
    assert m.count == 3 and (m.t_min, m.t_max) == (10, 50)
    assert m.envelope.to_spacebox() == [30.1, 30.1, -99.5, -99.5]


def test_ingest_reports_bad_records_and_continues():
    s = _store()
    s.create_stream("o_1", "d")
    batch = [{"lat": 30.0, "lng": -99.0, "time": i, "value": 1.0} for i in range(1000)]
    batch[17]["lat"] = 91
    rep = s.ingest("d", batch, "o_1")
    assert (rep.accepted, rep.rejected) == (999, 1)
    assert rep.errors[0][0] == 17 and "91" in rep.errors[0][1]
    arr = _records(np.random.default_rng(0), 10)
    arr["value"][3] = np.nan
    arr["time"][5] = -4
    rep = s.ingest("d", arr, "o_1")
    assert rep.accepted == 8 and [i for i, _ in rep.errors] == [3, 5]


def test_ingest_requires_owner():
    s = _store()
    s.create_stream("o_1", "d")
    with pytest.raises(NotOwner):
        s.ingest("d", [], "o_2")


def test_range_query_empty_and_full():
    s = _store()
    s.create_stream("o_1", "d")
    assert s.range_query("d", BoundingBox(0, 1, 0, 1), TimeWindow(0, 10)) == []
    arr = _records(np.random.default_rng(1), 500)
    s.ingest("d", arr, "o_1")
    full = s.range_query_array("d", BoundingBox(-90, 90, -180, 180), TimeWindow(0, 10**9))
    assert np.array_equal(full, arr)


def test_range_query_matches_linear_scan():
    rng = np.random.default_rng(2)
    arr = _records(rng, 100_000)
    s = _store()
    s.create_stream("o_1", "d")
    s.ingest("d", arr[:60_000], "o_1")
    s.ingest("d", arr[60_000:], "o_1")
    for _ in range(100):
        c = rng.uniform([30, -100], [31, -99])
        h, w = rng.uniform(0.001, 0.3, 2)
        box = BoundingBox(c[0] - h, c[0] + h, c[1] - w, c[1] + w)
        lo = int(rng.integers(0, 10**8))
        win = TimeWindow(lo, lo + int(rng.integers(1, 5 * 10**7)))
        assert np.array_equal(s.range_query_array("d", box, win), _scan(arr, box, win))


def test_range_query_inclusive_box_half_open_time():
    s = _store()
    s.create_stream("o_1", "d")
    s.ingest("d", [DataRecord(1.0, 2.0, 100, 0), DataRecord(1.0, 2.0, 200, 0)], "o_1")
    got = s.range_query("d", BoundingBox(1.0, 1.0, 2.0, 2.0), TimeWindow(100, 200))
    assert [r.timestamp for r in got] == [100]


def test_small_box_cost_is_sublinear():
    rng = np.random.default_rng(3)
    n = 200_000
    s = _store()
    s.create_stream("o_1", "d")
    s.ingest("d", _records(rng, n), "o_1")
    s.counters["candidates"] = 0
    q = 50
    for _ in range(q):
        c = rng.uniform([30.05, -99.95], [30.95, -99.05])
        # 0.1 x 0.1 degrees: 1% of the envelope
        s.range_query_array("d", BoundingBox(c[0] - 0.05, c[0] + 0.05, c[1] - 0.05, c[1] + 0.05), TimeWindow(0, 10**8))
    assert s.counters["candidates"] / q < 0.03 * n


# ---------------------------------------------------------------------------
# coarsening


def test_hour_bucket_example():
    assert bucket_start([1000, 1500, 3700], "Hour").tolist() == [0, 0, 3600]


def test_day_bucket_same_day():
    day = 1388966400
    assert set(bucket_start(day + np.arange(0, 86400, 997), "Day").tolist()) == {day}


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 4 * 10**9), st.sampled_from(TIME_BUCKETS))
def test_bucket_alignment_matches_calendar_oracle(ts, unit):
    got = int(bucket_start([ts], unit)[0])
    assert got == bucket_floor(ts, unit)
    assert got <= ts
    # idempotent
    assert int(bucket_start([got], unit)[0]) == got


def test_time_replica_kept_in_sync():
    rng = np.random.default_rng(4)
    s = _store()
    s.create_stream("o_1", "d")
    first = _records(rng, 300)
    s.ingest("d", first, "o_1")
    rid = s.coarsen_stream("d", ResolutionSpec.time("Hour"))
    assert s.meta(rid).hidden and s.find_replica("d", [ResolutionSpec.time("Hour")]) == rid
    assert s.coarsen_stream("d", ResolutionSpec.time("Hour")) == rid
    second = _records(rng, 200)
    s.ingest("d", second, "o_1")
    rep = s.records(rid)
    both = np.concatenate([first, second])
    assert len(rep) == len(both)
    assert rep["time"].tolist() == [bucket_floor(int(t), "Hour") for t in both["time"]]
    assert np.array_equal(rep["lat"], both["lat"])
    with pytest.raises(UnknownStream):
        s.ingest(rid, second, "o_1")
    assert rid not in [m.stream_id for m in s.streams()]


def test_coarsen_idempotent():
    rng = np.random.default_rng(5)
    arr = _records(rng, 1000)
    for unit in ("Minute", "Week", "Month"):
        once, _ = coarsen_records(arr, ResolutionSpec.time(unit))
        twice, _ = coarsen_records(once, ResolutionSpec.time(unit))
        assert np.array_equal(once, twice)


def _three_regions():
    fc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {"id": "west"},
             "geometry": {"type": "Polygon", "coordinates": [[[-100, 30], [-99.6, 30], [-99.6, 31], [-100, 31], [-100, 30]]]}},
            {"type": "Feature", "properties": {"id": "east"},
             "geometry": {"type": "Polygon", "coordinates": [[[-99.6, 30], [-99.2, 30.5], [-99.6, 31], [-99.6, 30]]]}},
            {"type": "Feature", "properties": {"id": "ell"},
             "geometry": {"type": "Polygon", "coordinates": [[[-99.2, 30], [-99.0, 30], [-99.0, 30.2], [-99.1, 30.2],
                                                              [-99.1, 30.1], [-99.2, 30.1], [-99.2, 30]]]}},
        ],
    }
    return BoundarySet.from_geojson("Zones", fc), fc


def test_space_coarsening_matches_assignment_oracle():
    rng = np.random.default_rng(6)
    arr = _records(rng, 10_000)
    bs, fc = _three_regions()
    for _, poly, rep in bs.regions:
        assert points_in_polygon([rep.lat], [rep.lng], poly)[0]
    out, dropped = coarsen_records(arr, ResolutionSpec.space("Zones"), bs)
    rings = [[(lat, lng) for lng, lat in f["geometry"]["coordinates"][0]] for f in fc["features"]]
    want_region = []
    for lat, lng in zip(arr["lat"], arr["lng"]):
        want_region.append(next((i for i, r in enumerate(rings) if point_in_ring(lat, lng, r)), -1))
    want_region = np.array(want_region)
    assert dropped == int((want_region < 0).sum()) and len(out) + dropped == len(arr)
    reps = {(rep.lat, rep.lng): i for i, (_, _, rep) in enumerate(bs.regions)}
    got_region = np.array([reps[(a, b)] for a, b in zip(out["lat"], out["lng"])])
    assert np.array_equal(np.bincount(got_region, minlength=3), np.bincount(want_region[want_region >= 0], minlength=3))
    assert np.array_equal(out["time"], arr["time"][want_region >= 0])


def test_space_replica_needs_boundaries():
    s = _store()
    s.create_stream("o_1", "d")
    with pytest.raises(MissingBoundarySet):
        s.coarsen_stream("d", ResolutionSpec.space("Zones"))
    bs, _ = _three_regions()
    s.register_boundary_set(bs)
    s.ingest("d", _records(np.random.default_rng(7), 100), "o_1")
    rid = s.ensure_replica("d", [ResolutionSpec.time("Day"), ResolutionSpec.space("Zones")])
    meta = s.meta(rid)
    assert meta.count + meta.dropped == 100


def test_boundary_set_validation():
    with pytest.raises(GeometryError, match="id"):
        BoundarySet.from_geojson("x", {"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {}, "geometry": Polygon.from_box(BoundingBox(0, 1, 0, 1)).to_geojson()}]})
    with pytest.raises(GeometryError, match="FeatureCollection"):
        BoundarySet.from_geojson("x", {"type": "Feature"})
    bs, _ = _three_regions()
    assert BoundarySet.from_geojson("Zones", bs.to_geojson()) == bs


# ---------------------------------------------------------------------------
# persistence and formats


def test_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    s = _store(tmp_path)
    s.create_stream("o_1", "d/with slash")
    arr = _records(rng, 1000)
    s.ingest("d/with slash", arr, "o_1")
    rid = s.coarsen_stream("d/with slash", ResolutionSpec.time("Hour"))
    s.put_section("policies", {"p1": "x"})
    again = Store(tmp_path)
    assert again.users == {"o_1", "o_2"}
    assert np.array_equal(again.records("d/with slash"), arr)
    assert again.meta("d/with slash").replicas == {"time:Hour": rid}
    assert len(again.records(rid)) == 1000
    assert again.get_section("policies") == {"p1": "x"}


def test_torn_batch_is_discarded(tmp_path):
    s = _store(tmp_path)
    s.create_stream("o_1", "d")
    arr = _records(np.random.default_rng(9), 50)
    s.ingest("d", arr, "o_1")
    # simulate a crash after the log append but before the catalog write
    log_file = next((tmp_path / "streams").iterdir())
    with open(log_file, "ab") as f:
        arr[:7].tofile(f)
    again = Store(tmp_path)
    assert again.meta("d").count == 50 and np.array_equal(again.records("d"), arr)
    assert os.path.getsize(log_file) == 50 * RECORD_DTYPE.itemsize


def test_parse_ndjson_and_csv():
    recs, errs = parse_ndjson('{"lat":1,"lng":2,"time":3,"value":4}\n\nnot json\n{"lat":1,"lng":2,"time":3.9,"value":4}\n')
    assert [r.timestamp for r in recs] == [3, 3] and [i for i, _ in errs] == [2]
    recs, errs = parse_csv("lat,lng,time,value\n1,2,3,4\n1,x,3,4\n5,6,7,8\n")
    assert [r.lat for r in recs] == [1.0, 5.0] and len(errs) == 1
    recs, errs = parse_csv("1,2,3,4\n")
    assert len(recs) == 1 and not errs
