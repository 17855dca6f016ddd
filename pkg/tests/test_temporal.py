import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpolicy.temporal import (
    ExpansionTooLarge,
    IntervalSet,
    RecurrenceRule,
    TemporalError,
    TimeWindow,
    expand_recurrence,
    intersect,
    parse_clock,
    subtract,
    union,
)

from oracles import calendar_windows, windows_members

windows = st.lists(
    st.tuples(st.integers(0, 200), st.integers(1, 40)).map(lambda p: (p[0], p[0] + p[1])), max_size=8
)


def test_window_validation():
    with pytest.raises(TemporalError):
        TimeWindow(5, 5)
    with pytest.raises(TemporalError):
        TimeWindow(1.5, 3)
    w = TimeWindow(0, 10)
    assert 0 in w and 9 in w and 10 not in w


def test_canonical_form_merges_touching():
    s = IntervalSet([(5, 8), (0, 3), (3, 4), (7, 12)])
    assert [(w.start, w.end) for w in s] == [(0, 4), (5, 12)]
    assert IntervalSet.from_json(s.to_json()) == s


def test_trivial_algebra():
    a = IntervalSet([(0, 10)])
    b = IntervalSet([(5, 15)])
    assert (a & b) == IntervalSet([(5, 10)])
    assert (a | b) == IntervalSet([(0, 15)])
    assert (a - b) == IntervalSet([(0, 5)])
    assert not (a & IntervalSet([(10, 20)]))


@settings(max_examples=300, deadline=None)
@given(windows, windows)
def test_algebra_matches_pointwise_oracle(wa, wb):
    a, b = IntervalSet(wa), IntervalSet(wb)
    pts = range(-1, 245)
    ma, mb = windows_members(wa, pts), windows_members(wb, pts)
    for op, f in ((intersect, lambda x, y: x and y), (union, lambda x, y: x or y), (subtract, lambda x, y: x and not y)):
        got = op(a, b)
        assert [t in got for t in pts] == [f(x, y) for x, y in zip(ma, mb)]
        # result stays canonical
        ws = list(got)
        assert all(w1.end < w2.start for w1, w2 in zip(ws, ws[1:]))
    assert a.contains_many(list(pts)).tolist() == ma


@settings(max_examples=100, deadline=None)
@given(windows, windows, windows)
def test_algebra_laws(wa, wb, wc):
    a, b, c = IntervalSet(wa), IntervalSet(wb), IntervalSet(wc)
    assert a & b == b & a and a | b == b | a
    assert (a | b) | c == a | (b | c)
    assert a & (b | c) == (a & b) | (a & c)
    assert (a - b) & b == IntervalSet()
    assert (a - b) | (a & b) == a


def test_parse_clock():
    assert parse_clock("9AM").hour == 9
    assert parse_clock("12AM").hour == 0 and parse_clock("12PM").hour == 12
    assert (parse_clock("5:30pm").hour, parse_clock("5:30pm").minute) == (17, 30)
    assert parse_clock("17:00").hour == 17
    for bad in ("13PM", "25:00", "9:75", "noon"):
        with pytest.raises(TemporalError):
            parse_clock(bad)


WORKING = RecurrenceRule.from_json({"RepeatedHour": "9AM-5PM", "ExcludeDay": ["saturday", "sunday"]})


def test_working_hours_week():
    # Monday 2014-01-06 00:00 UTC through the following Monday
    start = 1388966400
    got = expand_recurrence(WORKING, TimeWindow(start, start + 7 * 86400))
    assert len(got) == 5
    assert all(w.duration == 8 * 3600 for w in got)
    assert got.windows[0].start == start + 9 * 3600


@pytest.mark.parametrize("tz", ["UTC", "America/Los_Angeles"])
def test_expansion_matches_calendar_oracle(tz):
    rule = RecurrenceRule.from_json(
        {"RepeatedHour": "8:30AM-6PM", "ExcludeDay": ["sunday", "wednesday"], "Timezone": tz}
    )
    rng = np.random.default_rng(3)
    for _ in range(25):
        lo = int(rng.integers(1388534400, 1420070400))
        hi = lo + int(rng.integers(1, 60 * 86400))
        got = expand_recurrence(rule, TimeWindow(lo, hi))
        want = IntervalSet(calendar_windows((lo, hi), (8, 30), (18, 0), {"sunday", "wednesday"}, tz))
        assert got == want


def test_expansion_respects_dst_in_local_zone():
    rule = RecurrenceRule.from_json({"RepeatedHour": "9AM-5PM", "Timezone": "America/Los_Angeles"})
    # 2014-03-08 .. 2014-03-11 straddles the spring-forward change
    got = expand_recurrence(rule, TimeWindow(1394236800, 1394496000))
    starts_utc_hour = [(w.start % 86400) // 3600 for w in got]
    assert 17 in starts_utc_hour and 16 in starts_utc_hour


def test_expansion_cap():
    with pytest.raises(ExpansionTooLarge):
        expand_recurrence(WORKING, TimeWindow(0, 10**10), cap=86400 * 10)


def test_recurrence_json_round_trip():
    assert RecurrenceRule.from_json(WORKING.to_json()) == WORKING
    with pytest.raises(TemporalError):
        RecurrenceRule.from_json({"RepeatedHour": "5PM-9AM"})
    with pytest.raises(TemporalError):
        RecurrenceRule.from_json({"RepeatedHour": "9AM-5PM", "ExcludeDay": ["funday"]})
