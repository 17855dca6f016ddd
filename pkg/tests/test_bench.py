import json

import numpy as np
import pytest

from stpolicy import bench
from stpolicy.bench import (
    BenchConfig,
    bundled_region,
    format_table,
    generate,
    generate_records,
    home_box,
    km_box,
    la_like_region,
    load_dataset,
    make_queries,
    run,
    subsample_region,
)
from stpolicy.geometry import GeometryError, box_within_polygon, ring_area

SMALL = dict(n=20_000, queries=40, seed=3)


def test_generation_is_deterministic_and_in_bounds():
    cfg = BenchConfig(n=1000, seed=5)
    a, b = generate_records(cfg), generate_records(cfg)
    assert a.tobytes() == b.tobytes()
    box, span = cfg.area, cfg.span
    assert ((a["lat"] >= box.lat_min) & (a["lat"] <= box.lat_max)).all()
    assert ((a["lng"] >= box.lng_min) & (a["lng"] <= box.lng_max)).all()
    assert ((a["time"] >= span.start) & (a["time"] < span.end)).all()
    assert ((a["value"] >= 0) & (a["value"] < 1)).all()
    assert generate_records(BenchConfig(n=1000, seed=6)).tobytes() != a.tobytes()


def test_generated_density_is_uniform():
    cfg = BenchConfig(n=200_000, seed=9)
    a = generate_records(cfg)
    box = cfg.area
    counts, _, _ = np.histogram2d(a["lat"], a["lng"], bins=10,
                                  range=[[box.lat_min, box.lat_max], [box.lng_min, box.lng_max]])
    expected = cfg.n / 100
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # 99 degrees of freedom; 99.9th percentile is about 148
    assert chi2 < 148


def test_km_box_sizes():
    b = km_box((0.0, 0.0), 111.32)
    assert b.lat_max - b.lat_min == pytest.approx(1.0)
    b = km_box((60.0, 0.0), 111.32)
    assert b.lng_max - b.lng_min == pytest.approx(2.0)


def test_queries_inside_area_and_span():
    cfg = BenchConfig(n=10, queries=300)
    qs = make_queries(cfg)
    assert len(qs) == 300 and qs == make_queries(cfg)
    for q in qs:
        assert cfg.area.contains_box(q.box)
        assert cfg.span.start <= q.time_range.start and q.time_range.end <= cfg.span.end
        assert q.time_range.end - q.time_range.start == 14 * 86400


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(n=0)
    with pytest.raises(ValueError):
        BenchConfig(query_km=600)


def test_bundled_region_shape():
    region = bundled_region()
    assert len(region) - 1 == 1749
    assert region == la_like_region()
    km2 = abs(ring_area(region.lats, region.lngs)) * 111.32**2 * np.cos(np.radians(34.05))
    assert km2 == pytest.approx(5000, rel=0.01)
    assert box_within_polygon(home_box(region), region)


def test_subsample_region():
    region = bundled_region()
    assert subsample_region(region, 1749) is region
    sub = subsample_region(region, 583, seed=1)
    assert len(sub) - 1 == 583
    # every kept vertex is an original vertex, in ring order
    orig = {(a, b): i for i, (a, b) in enumerate(zip(region.lats[:-1], region.lngs[:-1]))}
    idx = [orig[(a, b)] for a, b in zip(sub.lats[:-1], sub.lngs[:-1])]
    assert idx == sorted(idx)
    assert abs(ring_area(sub.lats, sub.lngs)) == pytest.approx(abs(ring_area(region.lats, region.lngs)), rel=0.2)
    assert subsample_region(region, 583, seed=1) == sub
    with pytest.raises(ValueError):
        subsample_region(region, 2)


def test_subsample_gives_up_after_retry_cap(monkeypatch):
    region = bundled_region()
    attempts = []

    def reject(points):
        attempts.append(len(points))
        raise GeometryError("edges 1 and 5 cross")

    monkeypatch.setattr(bench, "Polygon", reject)
    with pytest.raises(GeometryError, match="no simple"):
        subsample_region(region, 500, max_tries=3)
    assert attempts == [500, 500, 500]


def test_run_small_report():
    cfg = BenchConfig(**SMALL)
    records = generate_records(cfg)
    report = run(cfg, records)
    d, a, b = report.modes["d"], report.modes["a"], report.modes["b"]
    assert d.rejections == 0 and a.rejections == 0
    assert a.points == b.points
    assert all(pa <= pd for pa, pd in zip(a.points, d.points))
    assert all(p == 0 for p, r in zip(a.points, b.rejected) if r)
    doc = report.to_json(per_query=True)
    assert doc["modes"]["b"]["rejections"] == b.rejections and len(doc["modes"]["a"]["points"]) == cfg.queries
    table = format_table(report)
    assert "Query_b" in table and "No. of points" in table
    again = run(cfg, records)
    assert again.modes["a"].points == a.points


def test_cli_generate_and_run(tmp_path, capsys):
    data = tmp_path / "data"
    assert bench.main(["generate", "--n", "5000", "--seed", "2", "--out", str(data)]) == 0
    cfg, records = load_dataset(str(data))
    assert cfg.n == 5000 and len(records) == 5000
    with pytest.raises(FileExistsError):
        generate(cfg, str(data))
    region_file = tmp_path / "r.geojson"
    assert bench.main(["region", "--vertices", "300", "--out", str(region_file)]) == 0
    out = tmp_path / "report.json"
    rc = bench.main(["run", "--data", str(data), "--mode", "a,b", "--queries", "20",
                     "--region", str(region_file), "--subsample", "100", "--report", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["region_vertices"] == 100 and set(doc["modes"]) == {"a", "b"}
    assert doc["modes"]["a"]["points"] == doc["modes"]["b"]["points"]
    assert "Query_a" in capsys.readouterr().out
    assert bench.main(["run", "--data", str(data), "--mode", "x"]) == 2
