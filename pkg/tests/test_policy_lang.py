import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpolicy.geometry import Polygon
from stpolicy.policy_lang import (
    RESERVED_KEYWORDS,
    DateRange,
    KeywordError,
    KeywordRegistry,
    PolicySyntaxError,
    PolicyWarning,
    ResolveError,
    Term,
    format_policy,
    parse_policy,
    resolve_ast,
)
from stpolicy.temporal import IntervalSet, RecurrenceRule

HOURLY = "What(d_h).Where(LA, NOT HOME).When(WorkingHours).How(Hour).Whom(u_b)"
NO_SHARING = HOURLY + ".Who(DenyDataSharing)"
TWO_DENIES = "What(d_h).Where(LA, NOT HOME, NOT UCLA).When(WorkingHours).How(Hour).Whom(u_b).Who(DenyDataSharing)"
SPACE_ONLY = "What(d).Where(LA, NOT HOME).Whom(u)"

HOME = {
    "Name": "HOME",
    "Type": "Where",
    "Polygon": [
        {"lat": 34.05, "lng": -118.25},
        {"lat": 34.05, "lng": -118.24},
        {"lat": 34.06, "lng": -118.24},
        {"lat": 34.06, "lng": -118.25},
        {"lat": 34.05, "lng": -118.25},
    ],
}
WORKING_HOURS = {"Name": "WorkingHours", "Type": "When", "RepeatedHour": "9AM-5PM", "ExcludeDay": ["saturday", "sunday"]}
LA = {"Name": "LA", "Type": "Where", "Polygon": [[-118.6, 33.7], [-117.9, 33.7], [-117.9, 34.3], [-118.6, 34.3], [-118.6, 33.7]]}


def test_no_sharing_ast():
    ast = parse_policy(NO_SHARING)
    assert ast.what == ("d_h",) and ast.whom == ("u_b",)
    assert ast.where == (Term("LA"), Term("HOME", True))
    assert ast.when == (Term("WorkingHours"),)
    assert ast.how == ("Hour",) and ast.who == ("DenyDataSharing",)


def test_space_only_ast_has_empty_optional_constructs():
    ast = parse_policy(SPACE_ONLY)
    assert ast.when == () and ast.how == () and ast.who == ()


def test_three_where_terms():
    ast = parse_policy(TWO_DENIES)
    assert len(ast.where) == 3 and sum(t.negated for t in ast.where) == 2


@pytest.mark.parametrize("text", [HOURLY, NO_SHARING, TWO_DENIES, SPACE_ONLY])
def test_examples_round_trip_exactly(text):
    ast = parse_policy(text)
    assert format_policy(ast) == text
    assert parse_policy(format_policy(ast)) == ast


def test_construct_order_and_case_insensitive():
    a = parse_policy("whom(u_b).WHERE(LA, NOT HOME).what(d_h)")
    assert a == parse_policy("What(d_h).Where(LA, NOT HOME).Whom(u_b)")
    # user keywords keep their case
    assert parse_policy("What(d).Where(la).Whom(u)").where == (Term("la"),)
    # reserved keywords are canonicalised
    assert parse_policy("What(d).How(hour, zipcode).Whom(u)").how == ("Hour", "ZipCodes")


def test_date_literal_clamps_with_warning():
    with pytest.warns(PolicyWarning, match="clamped"):
        ast = parse_policy('What(d).When("11/1/2016-11/31/2016").Whom(u)')
    lit = ast.when[0].literal
    assert lit == DateRange(lit.start.replace(day=1), lit.start.replace(day=30))
    assert format_policy(ast) == 'What(d).When("11/1/2016-11/30/2016").Whom(u)'


@pytest.mark.parametrize(
    "text,fragment,offset,construct",
    [
        ("Where(LA)", "missing What and Whom", 0, None),
        ("What(d).Whom(u).What(e)", "duplicate", 16, "What"),
        ("What(d).Whom()", "empty argument list", 13, "Whom"),
        ("What(d).Colour(red).Whom(u)", "unknown construct", 8, None),
        ("What(NOT d).Whom(u)", "NOT is only allowed", 5, "What"),
        ("What(d).How(NOT Hour).Whom(u)", "NOT is only allowed", 12, "How"),
        ('What(d).When("13/1/2016-1/2/2017").Whom(u)', "invalid date", 13, "When"),
        ('What(d).When("yesterday").Whom(u)', "malformed date range", 13, "When"),
        ('What(d).Where("1/1/2016-1/2/2016").Whom(u)', "quoted literals", 14, "Where"),
        ("What(d).Where(NOT NOT HOME).Whom(u)", "twice", 18, "Where"),
        ("What(d).Where(NOT).Whom(u)", "NOT must be followed", 14, "Where"),
        ("What(d).Who(AllowDataSharing, DenyDataSharing).Whom(u)", "mutually exclusive", 8, "Who"),
        ("What(d).How(Hour, Day).Whom(u)", "at most one time", 8, "How"),
        ("What(d).Who(Maybe).Whom(u)", "unknown sharing", 12, "Who"),
        ("What(d) Whom(u)", "expected '.'", 8, None),
        ("", "empty", None, None),
    ],
)
def test_syntax_errors_carry_offset_and_construct(text, fragment, offset, construct):
    with pytest.raises(PolicySyntaxError, match=fragment) as ei:
        parse_policy(text)
    assert ei.value.offset == offset
    assert ei.value.construct == construct


def test_offset_is_in_bytes():
    with pytest.raises(PolicySyntaxError) as ei:
        # U+3000 is whitespace that takes three bytes
        parse_policy("What(d).\u3000Whom(u).Whom(v)")
    assert ei.value.offset == len("What(d).\u3000Whom(u).".encode())


# ---------------------------------------------------------------------------
# keyword registry


def test_keyword_definitions():
    reg = KeywordRegistry()
    home = reg.register("alice", HOME)
    assert home.kind == "Where" and isinstance(home.body, Polygon) and len(home.body) == 5
    wh = reg.register("alice", WORKING_HOURS)
    assert isinstance(wh.body, RecurrenceRule)
    assert wh.body.excluded_weekdays == {"saturday", "sunday"}
    assert reg.get("alice", "HOME") is home and reg.get("bob", "HOME") is None
    assert reg.get("alice", "home") is None


def test_explicit_window_keyword():
    kw = KeywordRegistry().register("a", {"Name": "Trip", "Type": "When", "Windows": [{"start": 0, "end": 10}]})
    assert kw.body == IntervalSet([(0, 10)])


@pytest.mark.parametrize("name", ["Hour", "hour", "NOT", "DenyDataSharing", "ZipCodes", "zipcode"])
def test_reserved_names_rejected(name):
    with pytest.raises(KeywordError, match="reserved"):
        KeywordRegistry().register("a", {**HOME, "Name": name})


@pytest.mark.parametrize(
    "bad,fragment",
    [
        ({**HOME, "Polygon": [[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]}, "invalid polygon"),
        ({**HOME, "Polygon": {"type": "Polygon", "coordinates": [[[0, 0], [4, 0], [4, 4], [0, 0]], [[1, 1], [2, 1], [2, 2], [1, 1]]]}}, "exterior ring"),
        ({**HOME, "Polygon": [[0, 0], [1, 1], [0, 0]]}, "invalid polygon"),
        ({**HOME, "Type": "When"}, "carries a Polygon"),
        ({**WORKING_HOURS, "Type": "Where"}, "time fields"),
        ({**WORKING_HOURS, "RepeatedHour": "5PM-9AM"}, "invalid time rule"),
        ({"Name": "X", "Type": "When"}, "exactly one"),
        ({"Name": "has space", "Type": "Where"}, "identifier"),
        ({**HOME, "Type": "Somewhere"}, "Type"),
    ],
)
def test_invalid_keyword_definitions(bad, fragment):
    with pytest.raises(KeywordError, match=fragment):
        KeywordRegistry().register("a", bad)


def test_reregistration_is_versioned_with_warning():
    reg = KeywordRegistry()
    reg.register("a", HOME)
    with pytest.warns(PolicyWarning, match="version 2"):
        kw = reg.register("a", {**HOME, "Polygon": LA["Polygon"]})
    assert kw.version == 2 and reg.get("a", "HOME") is kw


def test_keyword_json_round_trip():
    reg = KeywordRegistry()
    for obj in (HOME, WORKING_HOURS, LA):
        kw = reg.register("a", obj)
        again = KeywordRegistry().register("a", kw.to_json())
        assert again.to_json() == kw.to_json()


# ---------------------------------------------------------------------------
# resolution


def _registry():
    reg = KeywordRegistry()
    for obj in (HOME, WORKING_HOURS, LA):
        reg.register("alice", obj)
    return reg


def test_resolve_hourly():
    r = resolve_ast(parse_policy(HOURLY), _registry(), "alice")
    assert [(n, neg) for n, _, neg in r.where] == [("LA", False), ("HOME", True)]
    assert isinstance(r.when[0][1], RecurrenceRule)
    assert r.time_resolution == "Hour" and r.space_resolution is None


def test_resolve_unknown_keyword_names_construct():
    with pytest.raises(ResolveError) as ei:
        resolve_ast(parse_policy(TWO_DENIES), _registry(), "alice")
    assert ei.value.construct == "Where" and ei.value.name == "UCLA"


def test_resolve_uses_owner_namespace():
    with pytest.raises(ResolveError):
        resolve_ast(parse_policy(HOURLY), _registry(), "mallory")


def test_resolve_kind_mismatch_and_unknown_resolution():
    reg = _registry()
    with pytest.raises(ResolveError, match="When keyword used in Where"):
        resolve_ast(parse_policy("What(d).Where(WorkingHours).Whom(u)"), reg, "alice")
    with pytest.raises(ResolveError, match="Where keyword used in When"):
        resolve_ast(parse_policy("What(d).When(LA).Whom(u)"), reg, "alice")
    with pytest.raises(ResolveError, match="Fortnight"):
        resolve_ast(parse_policy("What(d).How(Fortnight).Whom(u)"), reg, "alice")


# ---------------------------------------------------------------------------
# properties

idents = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True).filter(
    lambda s: s.lower() not in RESERVED_KEYWORDS
)
terms = st.tuples(st.booleans(), idents).map(lambda p: f"NOT {p[1]}" if p[0] else p[1])
constructs = st.sampled_from(["What", "Where", "When", "How", "Whom", "Who"])


@settings(max_examples=300, deadline=None)
@given(
    st.lists(idents, min_size=1, max_size=3),
    st.lists(terms, max_size=3),
    st.lists(terms, max_size=3),
    st.lists(idents, min_size=1, max_size=3),
    st.lists(st.sampled_from(["Hour", "Day", "City", "ZipCodes"]), max_size=2, unique=True),
    st.permutations(range(5)),
)
def test_round_trip_property(what, where, when, whom, how, order):
    parts = [f"What({', '.join(what)})", f"Whom({', '.join(whom)})"]
    if where:
        parts.append(f"Where({', '.join(where)})")
    if when:
        parts.append(f"When({', '.join(when)})")
    time_like = sum(h in ("Hour", "Day") for h in how)
    if how and time_like <= 1 and len(how) - time_like <= 1:
        parts.append(f"How({', '.join(how)})")
    parts = [parts[i] for i in order if i < len(parts)] + parts[len(order):]
    ast = parse_policy(".".join(parts))
    assert parse_policy(format_policy(ast)) == ast


@settings(max_examples=500, deadline=None)
@given(st.lists(st.tuples(constructs, st.lists(terms, max_size=3)), max_size=6))
def test_construct_soup_never_violates_invariants(soup):
    text = ".".join(f"{c}({', '.join(args)})" for c, args in soup)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PolicyWarning)
        try:
            ast = parse_policy(text)
        except PolicySyntaxError:
            return
    assert ast.what and ast.whom
    assert not any(t.startswith("NOT ") for t in ast.what + ast.whom + ast.how + ast.who)
    names = [c.lower() for c, _ in soup]
    assert len(names) == len(set(names))
    assert all(args for _, args in soup)


def test_update_effect_without_sharing_warns():
    with pytest.warns(PolicyWarning, match="AllowDataSharing"):
        parse_policy("What(d).Whom(u).Who(PolicyUpdateEffect)")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_policy("What(d).Whom(u).Who(AllowDataSharing, PolicyUpdateEffect)")
