"""HTTP/JSON front end for :class:`~stpolicy.service.AccessControlService`.

Callers authenticate with a static bearer token looked up in a token file
(``{user_id: token}``, YAML or JSON).  Every user named in the token file is
registered with the store at start-up.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from typing import Any, Mapping

import yaml
from fastapi import Depends, FastAPI, Header, Request
from fastapi.responses import JSONResponse, Response

from .geometry import GeometryError
from .policy_lang import PolicyWarning
from .service import AccessControlService, BadRequest, ServiceError
from .store import BoundarySet, Store, parse_csv, parse_ndjson

__all__ = ["Config", "load_config", "load_tokens", "create_app"]

ENV_LISTEN = "STPOLICY_LISTEN"
ENV_DATA_DIR = "STPOLICY_DATA_DIR"
ENV_TOKEN_FILE = "STPOLICY_TOKEN_FILE"


@dataclass(frozen=True)
class Config:
    listen: str = "127.0.0.1:8080"
    data_dir: str | None = None
    token_file: str | None = None
    timezone: str = "UTC"
    optimize: bool = True

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


def _read_mapping(path: str) -> dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def load_config(path: str | None = None, env: Mapping[str, str] | None = None) -> Config:
    """Read a YAML/JSON config file, then apply environment overrides."""
    env = os.environ if env is None else env
    values = _read_mapping(path) if path else {}
    unknown = set(values) - set(Config.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, var in (("listen", ENV_LISTEN), ("data_dir", ENV_DATA_DIR), ("token_file", ENV_TOKEN_FILE)):
        if env.get(var):
            values[key] = env[var]
    return Config(**values)


def load_tokens(path: str) -> dict[str, str]:
    """Token file ``{user_id: token}`` inverted to ``{token: user_id}``."""
    users = _read_mapping(path)
    out: dict[str, str] = {}
    for user, token in users.items():
        if not isinstance(token, str) or not token:
            raise ValueError(f"token for {user!r} must be a non-empty string")
        if token in out:
            raise ValueError("tokens must be unique")
        out[token] = str(user)
    return out


class _Unauthorized(ServiceError):
    status = 401


def _error(exc: ServiceError) -> JSONResponse:
    return JSONResponse(exc.to_json(), status_code=exc.status)


async def _json_body(request: Request) -> Any:
    try:
        return json.loads(await request.body())
    except (ValueError, UnicodeDecodeError):
        raise BadRequest("request body is not valid JSON") from None


def create_app(service: AccessControlService, tokens: Mapping[str, str]) -> FastAPI:
    for user in sorted(set(tokens.values())):
        service.add_user(user)
    app = FastAPI(title="stpolicy", version="1.0")
    app.state.service = service

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return _error(exc)

    def caller(authorization: str | None = Header(default=None)) -> str:
        scheme, _, token = (authorization or "").partition(" ")
        user = tokens.get(token.strip()) if scheme.lower() == "bearer" else None
        if user is None:
            raise _Unauthorized("missing or invalid bearer token")
        return user

    @app.post("/streams", status_code=201)
    async def create_stream(request: Request, user: str = Depends(caller)):
        body = await _json_body(request)
        if not isinstance(body, dict) or not isinstance(body.get("DsID"), str):
            raise BadRequest("body must be {\"DsID\": str, \"description\"?: str}")
        meta = service.create_stream(user, body["DsID"], str(body.get("description", "")))
        return meta.to_json()

    @app.post("/streams/{stream_id}/records")
    async def ingest(stream_id: str, request: Request, user: str = Depends(caller)):
        ctype = request.headers.get("content-type", "application/json").split(";")[0].strip().lower()
        raw = (await request.body()).decode("utf-8", errors="replace")
        parse_errors: list[tuple[int, str]] = []
        if ctype in ("application/x-ndjson", "application/ndjson", "application/jsonl"):
            records, parse_errors = parse_ndjson(raw)
        elif ctype in ("text/csv", "application/csv"):
            records, parse_errors = parse_csv(raw)
        else:
            try:
                body = json.loads(raw)
            except ValueError:
                raise BadRequest("request body is not valid JSON") from None
            records = body.get("records") if isinstance(body, dict) else body
            if not isinstance(records, list):
                raise BadRequest("body must be a list of records or {\"records\": [...]}")
        report = service.ingest(user, stream_id, records)
        out = report.to_json()
        if parse_errors:
            out["rejected"] += len(parse_errors)
            out["errors"] = [{"index": i, "reason": r} for i, r in parse_errors] + out["errors"]
        return out

    @app.post("/boundaries", status_code=201)
    async def boundaries(request: Request, user: str = Depends(caller)):
        body = await _json_body(request)
        if not isinstance(body, dict) or not isinstance(body.get("name"), str):
            raise BadRequest("body must be {\"name\": str, \"geojson\": FeatureCollection}")
        try:
            bset = BoundarySet.from_geojson(body["name"], body.get("geojson"))
        except (GeometryError, TypeError, AttributeError) as exc:
            raise BadRequest(f"invalid boundary set: {exc}") from None
        service.store.register_boundary_set(bset)
        return {"name": bset.name, "regions": len(bset.regions)}

    @app.post("/keywords", status_code=201)
    async def define_keyword(request: Request, user: str = Depends(caller)):
        body = await _json_body(request)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PolicyWarning)
            kw = service.define_keyword(user, body)
        return {"keyword": kw.to_json(), "version": kw.version, "warnings": [str(w.message) for w in caught]}

    @app.get("/keywords")
    async def list_keywords(user: str = Depends(caller)):
        return [{**kw.to_json(), "version": kw.version} for kw in service.list_keywords(user)]

    async def _policy_text(request: Request) -> str:
        ctype = request.headers.get("content-type", "").split(";")[0].strip().lower()
        if ctype == "text/plain":
            return (await request.body()).decode("utf-8")
        body = await _json_body(request)
        if not isinstance(body, dict) or not isinstance(body.get("policy"), str):
            raise BadRequest("body must be {\"policy\": str} or text/plain")
        return body["policy"]

    def _with_warnings(fn, *args):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PolicyWarning)
            rec = fn(*args)
        return {**rec.to_json(), "warnings": [str(w.message) for w in caught]}

    @app.post("/policies", status_code=201)
    async def create_policy(request: Request, user: str = Depends(caller)):
        return _with_warnings(service.create_policy, user, await _policy_text(request))

    @app.get("/policies")
    async def list_policies(user: str = Depends(caller)):
        return [p.to_json() for p in service.policies(user)]

    @app.put("/policies/{policy_id}")
    async def update_policy(policy_id: str, request: Request, user: str = Depends(caller)):
        return _with_warnings(service.update_policy, user, policy_id, await _policy_text(request))

    @app.delete("/policies/{policy_id}", status_code=204)
    async def delete_policy(policy_id: str, user: str = Depends(caller)):
        service.delete_policy(user, policy_id)
        return Response(status_code=204)

    @app.get("/policies/{policy_id}/constraints")
    async def constraints(policy_id: str, user: str = Depends(caller)):
        return service.policy_constraints(user, policy_id)

    @app.post("/query")
    async def query(request: Request, user: str = Depends(caller)):
        body = await _json_body(request)
        return service.handle_query(user, body).to_json()

    @app.get("/stats")
    async def stats(user: str = Depends(caller)):
        return service.stats()

    return app


def app_from_config(config: Config) -> FastAPI:
    if not config.token_file:
        raise ValueError("a token file is required (config 'token_file' or STPOLICY_TOKEN_FILE)")
    store = Store(config.data_dir)
    service = AccessControlService(store, optimize=config.optimize, timezone=config.timezone)
    return create_app(service, load_tokens(config.token_file))
