"""Access-control service: ties the policy language, engine, optimizer and
store together behind a transport-independent API.

Every request names its caller.  Owners query their own streams directly;
anyone else is served through the merged constraints of the policies that
name them, or gets ``no-access``.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .geometry import BoundingBox, GeometryError
from .optimizer import ConstraintCache, audit_cache, group_constraints, satisfiable
from .policy_engine import (
    ConstraintSet,
    PolicyConflict,
    compile_policy,
    effective_constraints,
    filter_batch,
    merge_policies,
)
from .policy_lang import (
    KeywordDef,
    KeywordError,
    KeywordRegistry,
    PolicyAst,
    PolicyError,
    PolicyWarning,
    format_policy,
    parse_policy,
    resolve_ast,
)
from .store import (
    RECORD_DTYPE,
    DataRecord,
    DuplicateStream,
    IngestReport,
    MissingBoundarySet,
    NotOwner,
    Store,
    StoreError,
    UnknownStream,
)
from .temporal import DEFAULT_EXPANSION_CAP, TemporalError, TimeWindow

log = logging.getLogger(__name__)

__all__ = [
    "ServiceError",
    "BadRequest",
    "Forbidden",
    "NotFound",
    "Conflict",
    "QueryRequest",
    "StreamResult",
    "QueryResponse",
    "PolicyRecord",
    "AccessControlService",
]

Pair = tuple[str, str]


class ServiceError(Exception):
    status = 400

    def __init__(self, message: str, **detail: Any):
        super().__init__(message)
        self.detail = detail

    def to_json(self) -> dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), **self.detail}


class BadRequest(ServiceError):
    status = 400


class Forbidden(ServiceError):
    status = 403


class NotFound(ServiceError):
    status = 404


class Conflict(ServiceError):
    status = 409


def _policy_error(exc: PolicyError) -> ServiceError:
    detail = {k: getattr(exc, k) for k in ("offset", "construct", "name") if getattr(exc, k, None) is not None}
    if isinstance(exc, PolicyConflict):
        return Conflict(str(exc), **detail)
    return BadRequest(str(exc), **detail)


# ---------------------------------------------------------------------------
# request / response


@dataclass(frozen=True)
class QueryRequest:
    user_id: str
    stream_ids: tuple[str, ...]
    box: BoundingBox
    time_range: TimeWindow

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "QueryRequest":
        if not isinstance(obj, Mapping):
            raise BadRequest("query must be a JSON object")
        missing = [k for k in ("userId", "DsID", "SpaceBox", "TimeRange") if k not in obj]
        if missing:
            raise BadRequest(f"query is missing {', '.join(missing)}")
        user, ids = obj["userId"], obj["DsID"]
        if not isinstance(user, str) or not user:
            raise BadRequest("userId must be a non-empty string")
        if isinstance(ids, str):
            ids = [ids]
        if not isinstance(ids, list) or not ids or not all(isinstance(d, str) for d in ids):
            raise BadRequest("DsID must be a non-empty list of stream ids")
        try:
            box = BoundingBox.from_spacebox(obj["SpaceBox"])
        except (GeometryError, TypeError, ValueError) as exc:
            raise BadRequest(f"bad SpaceBox: {exc}") from None
        tr = obj["TimeRange"]
        if not isinstance(tr, list) or len(tr) != 2:
            raise BadRequest("TimeRange must be [start, end]")
        try:
            window = TimeWindow(*tr)
        except TemporalError as exc:
            raise BadRequest(f"bad TimeRange: {exc}") from None
        return cls(user, tuple(dict.fromkeys(ids)), box, window)

    def to_json(self) -> dict[str, Any]:
        return {
            "userId": self.user_id,
            "DsID": list(self.stream_ids),
            "SpaceBox": self.box.to_spacebox(),
            "TimeRange": [self.time_range.start, self.time_range.end],
        }


@dataclass
class StreamResult:
    stream_id: str
    status: str  # ok | rejected-by-policy | no-access | unknown-stream
    records: np.ndarray = field(default_factory=lambda: np.empty(0, RECORD_DTYPE))
    sharing: dict[str, Any] | None = None
    resolution: dict[str, str | None] | None = None
    timing_us: dict[str, float] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.records)

    def to_json(self, include_records: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {"DsID": self.stream_id, "status": self.status, "count": self.count}
        if include_records:
            out["records"] = [
                {"lat": float(r["lat"]), "lng": float(r["lng"]), "time": int(r["time"]), "value": float(r["value"])}
                for r in self.records
            ]
        if self.sharing is not None:
            out["sharing"] = self.sharing
        if self.resolution is not None:
            out["resolution"] = self.resolution
        out["timing_us"] = {k: round(v, 1) for k, v in self.timing_us.items()}
        return out


@dataclass
class QueryResponse:
    user_id: str
    results: list[StreamResult]

    def result(self, stream_id: str) -> StreamResult:
        for r in self.results:
            if r.stream_id == stream_id:
                return r
        raise KeyError(stream_id)

    def to_json(self, include_records: bool = True) -> dict[str, Any]:
        return {"userId": self.user_id, "results": [r.to_json(include_records) for r in self.results]}


@dataclass(frozen=True)
class PolicyRecord:
    policy_id: str
    owner: str
    text: str
    ast: PolicyAst

    @property
    def pairs(self) -> set[Pair]:
        return set(itertools.product(self.ast.what, self.ast.whom))

    def to_json(self) -> dict[str, Any]:
        return {"id": self.policy_id, "owner": self.owner, "text": self.text, "normalized": format_policy(self.ast)}


# ---------------------------------------------------------------------------
# service


class AccessControlService:
    """Policy administration and policy-enforcing queries over a :class:`Store`.

    With ``optimize=True`` merged constraints are kept in an in-memory cache,
    queries go through the satisfiability pre-check, and nested regions are
    grouped.  With ``optimize=False`` constraints are recompiled from the
    stored policies for every query and every candidate is filtered
    exactly.  Both modes return the same records.
    """

    def __init__(
        self,
        store: Store,
        *,
        optimize: bool = True,
        timezone: str = "UTC",
        expansion_cap: int = DEFAULT_EXPANSION_CAP,
    ):
        self.store = store
        self.optimize = optimize
        self.timezone = timezone
        self.expansion_cap = expansion_cap
        self.registry = KeywordRegistry()
        self.cache = ConstraintCache()
        self._policies: dict[str, PolicyRecord] = {}
        self._seq = 0
        self._mutate = threading.RLock()
        self._reload()

    # -- persistence -----------------------------------------------------

    def _reload(self) -> None:
        for item in self.store.get_section("keywords", []):
            kw = KeywordDef.from_json(item["definition"], owner=item["owner"], version=item.get("version", 1))
            self.registry.restore(kw)
        self._seq = self.store.get_section("policy_seq", 0)
        for item in self.store.get_section("policies", []):
            self._policies[item["id"]] = PolicyRecord(item["id"], item["owner"], item["text"], parse_policy(item["text"]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PolicyWarning)
            self.cache.replace_all(self._build_all())

    def _persist_policies(self) -> None:
        self.store.put_section("policy_seq", self._seq)
        self.store.put_section(
            "policies", [{"id": p.policy_id, "owner": p.owner, "text": p.text} for p in self._policies.values()]
        )

    def _persist_keywords(self) -> None:
        items = []
        for owner in self.registry.owners():
            for kw in self.registry.list(owner):
                items.append({"owner": owner, "version": kw.version, "definition": kw.to_json()})
        self.store.put_section("keywords", items)

    # -- constraint compilation -----------------------------------------

    def _compile_pair(
        self, pair: Pair, policies: Mapping[str, PolicyRecord], *, grouped: bool
    ) -> ConstraintSet | None:
        stream_id, user_id = pair
        applicable = [p for p in policies.values() if pair in p.pairs]
        if not applicable or not self.store.has_stream(stream_id):
            return None
        meta = self.store.meta(stream_id)
        sets = []
        for p in sorted(applicable, key=lambda p: p.policy_id):
            resolved = resolve_ast(p.ast, self.registry, p.owner)
            sets.append(
                compile_policy(
                    resolved, meta, user_id, policy_id=p.policy_id, timezone=self.timezone, cap=self.expansion_cap
                )
            )
        merged = merge_policies(sets)
        if grouped:
            before = len(merged.allow) + len(merged.deny)
            merged = group_constraints(merged)
            self.cache.stats.grouped_away += before - len(merged.allow) - len(merged.deny)
        return merged

    def _build(self, pairs: Iterable[Pair], policies: Mapping[str, PolicyRecord]) -> dict[Pair, ConstraintSet | None]:
        return {pair: self._compile_pair(pair, policies, grouped=self.optimize) for pair in pairs}

    def _all_pairs(self, policies: Mapping[str, PolicyRecord] | None = None) -> set[Pair]:
        policies = self._policies if policies is None else policies
        return set().union(*(p.pairs for p in policies.values())) if policies else set()

    def _build_all(self) -> dict[Pair, ConstraintSet]:
        return {k: v for k, v in self._build(self._all_pairs(), self._policies).items() if v is not None}

    def _ensure_replicas(self, built: Mapping[Pair, ConstraintSet | None]) -> None:
        for (stream_id, _), cs in built.items():
            if cs is not None and cs.resolution_specs:
                try:
                    self.store.ensure_replica(stream_id, cs.resolution_specs)
                except MissingBoundarySet as exc:
                    raise BadRequest(f"{exc}; register a boundary set of that name first") from None

    def _apply(self, pairs: set[Pair], policies: dict[str, PolicyRecord]) -> None:
        """Compile ``pairs`` under ``policies`` and publish atomically.

        Raises before touching any state if compilation or merging fails.
        """
        try:
            built = self._build(pairs, policies)
        except PolicyError as exc:
            raise _policy_error(exc) from None
        self._ensure_replicas(built)
        self._policies = policies
        self.cache.update(built)

    # -- users, streams, keywords ---------------------------------------

    def _require_user(self, user_id: str) -> None:
        if not self.store.has_user(user_id):
            raise Forbidden(f"unknown user {user_id!r}")

    def add_user(self, user_id: str) -> None:
        if not isinstance(user_id, str) or not user_id:
            raise BadRequest("user id must be a non-empty string")
        self.store.add_user(user_id)

    def create_stream(self, caller: str, stream_id: str, description: str = ""):
        self._require_user(caller)
        if "~" in stream_id:
            raise BadRequest("stream ids may not contain '~'")
        try:
            return self.store.create_stream(caller, stream_id, description)
        except DuplicateStream as exc:
            raise Conflict(str(exc)) from None
        except StoreError as exc:
            raise BadRequest(str(exc)) from None

    def ingest(self, caller: str, stream_id: str, records: Sequence[DataRecord | Mapping] | np.ndarray) -> IngestReport:
        self._require_user(caller)
        with self._mutate:
            try:
                report = self.store.ingest(stream_id, records, caller)
            except UnknownStream:
                raise NotFound(f"unknown stream {stream_id!r}") from None
            except NotOwner as exc:
                raise Forbidden(str(exc)) from None
            # the stream span feeds time expansion, so its constraints move with it
            pairs = {pair for pair in self._all_pairs() if pair[0] == stream_id}
            if pairs and report.accepted:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", PolicyWarning)
                    self._apply(pairs, self._policies)
            return report

    def define_keyword(self, caller: str, definition: Mapping[str, Any]) -> KeywordDef:
        self._require_user(caller)
        with self._mutate:
            name = definition.get("Name") if isinstance(definition, Mapping) else None
            prev = self.registry.get(caller, name) if isinstance(name, str) else None
            try:
                kw = self.registry.register(caller, definition)
            except KeywordError as exc:
                raise BadRequest(str(exc)) from None
            if prev is not None:
                affected = {pair for p in self._policies.values() if p.owner == caller for pair in p.pairs}
                try:
                    self._apply(affected, self._policies)
                except ServiceError:
                    self.registry.restore(prev)
                    raise
            self._persist_keywords()
            return kw

    def list_keywords(self, caller: str) -> list[KeywordDef]:
        self._require_user(caller)
        return self.registry.list(caller)

    # -- policies --------------------------------------------------------

    def _check_policy(self, caller: str, text: str) -> PolicyAst:
        if not isinstance(text, str):
            raise BadRequest("policy text must be a string")
        try:
            ast = parse_policy(text)
        except PolicyError as exc:
            raise _policy_error(exc) from None
        for sid in ast.what:
            if not self.store.has_stream(sid) or self.store.meta(sid).hidden:
                raise NotFound(f"unknown stream {sid!r} in What")
            if self.store.meta(sid).owner != caller:
                raise Forbidden(f"{caller!r} does not own stream {sid!r}")
        for uid in ast.whom:
            if not self.store.has_user(uid):
                raise BadRequest(f"unknown user {uid!r} in Whom")
        try:
            resolve_ast(ast, self.registry, caller)
        except PolicyError as exc:
            raise _policy_error(exc) from None
        return ast

    def _owned_policy(self, caller: str, policy_id: str) -> PolicyRecord:
        rec = self._policies.get(policy_id)
        if rec is None:
            raise NotFound(f"unknown policy {policy_id!r}")
        if rec.owner != caller:
            raise Forbidden(f"{caller!r} does not own policy {policy_id!r}")
        return rec

    def create_policy(self, caller: str, text: str) -> PolicyRecord:
        self._require_user(caller)
        with self._mutate:
            ast = self._check_policy(caller, text)
            pid = f"p{self._seq + 1}"
            rec = PolicyRecord(pid, caller, text, ast)
            self._apply(rec.pairs, {**self._policies, pid: rec})
            self._seq += 1
            self._persist_policies()
            log.info("policy %s created by %s: %s", pid, caller, format_policy(ast))
            return rec

    def update_policy(self, caller: str, policy_id: str, text: str) -> PolicyRecord:
        self._require_user(caller)
        with self._mutate:
            old = self._owned_policy(caller, policy_id)
            ast = self._check_policy(caller, text)
            rec = PolicyRecord(policy_id, caller, text, ast)
            self._apply(old.pairs | rec.pairs, {**self._policies, policy_id: rec})
            self._persist_policies()
            log.info("policy %s updated by %s", policy_id, caller)
            return rec

    def delete_policy(self, caller: str, policy_id: str) -> None:
        self._require_user(caller)
        with self._mutate:
            old = self._owned_policy(caller, policy_id)
            remaining = {k: v for k, v in self._policies.items() if k != policy_id}
            self._apply(old.pairs, remaining)
            self._persist_policies()
            log.info("policy %s deleted by %s", policy_id, caller)

    def policies(self, caller: str) -> list[PolicyRecord]:
        return [p for p in self._policies.values() if p.owner == caller]

    def policy_constraints(self, caller: str, policy_id: str) -> dict[str, Any]:
        """Compiled constraints of one policy for every (stream, user) it names."""
        rec = self._owned_policy(caller, policy_id)
        resolved = resolve_ast(rec.ast, self.registry, rec.owner)
        out = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PolicyWarning)
            for sid, uid in sorted(rec.pairs):
                cs = compile_policy(
                    resolved, self.store.meta(sid), uid, policy_id=policy_id,
                    timezone=self.timezone, cap=self.expansion_cap,
                )
                out.append(cs.to_json())
        return {"id": policy_id, "policy": format_policy(rec.ast), "constraints": out}

    # -- queries ---------------------------------------------------------

    def handle_query(self, caller: str, request: QueryRequest | Mapping[str, Any]) -> QueryResponse:
        if not isinstance(request, QueryRequest):
            request = QueryRequest.from_json(request)
        if request.user_id != caller:
            raise Forbidden("userId does not match the authenticated caller")
        self._require_user(caller)
        snapshot = self.cache.snapshot() if self.optimize else None
        results = [self._query_stream(caller, sid, request, snapshot) for sid in request.stream_ids]
        return QueryResponse(caller, results)

    def _query_stream(
        self, caller: str, sid: str, req: QueryRequest, snapshot: Mapping[Pair, ConstraintSet] | None
    ) -> StreamResult:
        store = self.store
        if not store.has_stream(sid) or store.meta(sid).hidden:
            return StreamResult(sid, "unknown-stream")
        timing = {"prefilter": 0.0, "index": 0.0, "filter": 0.0}
        t0 = time.perf_counter()
        if store.meta(sid).owner == caller:
            recs = store.range_query_array(sid, req.box, req.time_range)
            timing["index"] = (time.perf_counter() - t0) * 1e6
            return StreamResult(sid, "ok", recs, timing_us=timing)

        pair = (sid, caller)
        if snapshot is not None:
            merged = snapshot.get(pair)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", PolicyWarning)
                merged = self._compile_pair(pair, self._policies, grouped=False)
        if merged is None:
            return StreamResult(sid, "no-access")
        sharing = merged.sharing.to_json()
        resolution = {"Time": merged.time_resolution, "Space": merged.space_resolution}

        if snapshot is not None:
            self.cache.stats.queries += 1
            ok = satisfiable(req.box, req.time_range, merged)
            timing["prefilter"] = (time.perf_counter() - t0) * 1e6
            if not ok:
                self.cache.stats.rejected += 1
                return StreamResult(sid, "rejected-by-policy", sharing=sharing, resolution=resolution, timing_us=timing)
        else:
            timing["prefilter"] = (time.perf_counter() - t0) * 1e6

        eff = effective_constraints(req.box, req.time_range, merged, stream_id=sid)
        target = sid
        if merged.resolution_specs:
            target = store.find_replica(sid, merged.resolution_specs) or store.ensure_replica(
                sid, merged.resolution_specs
            )
        t1 = time.perf_counter()
        cand = store.range_query_array(target, req.box, req.time_range)
        t2 = time.perf_counter()
        mask = filter_batch(cand["lat"], cand["lng"], cand["time"], eff, optimized=snapshot is not None)
        t3 = time.perf_counter()
        timing["index"] = (t2 - t1) * 1e6
        timing["filter"] = (t3 - t2) * 1e6
        return StreamResult(sid, "ok", cand[mask], sharing=sharing, resolution=resolution, timing_us=timing)

    # -- introspection ---------------------------------------------------

    def stats(self) -> dict[str, Any]:
        return {
            "optimizer": {"enabled": self.optimize, **self.cache.stats.to_json(), "cached_pairs": len(self.cache)},
            "store": dict(self.store.counters),
            "policies": len(self._policies),
            "streams": len(self.store.streams()),
            "users": len(self.store.users),
        }

    def audit(self) -> list[str]:
        """Divergences between the constraint cache and a fresh recompilation."""
        if not self.optimize:
            return []
        stats_before = self.cache.stats.grouped_away
        with self._mutate, warnings.catch_warnings():
            warnings.simplefilter("ignore", PolicyWarning)
            report = audit_cache(self.cache, self._build_all)
        self.cache.stats.grouped_away = stats_before
        return report
