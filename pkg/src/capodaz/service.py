"""HTTP surface: token endpoint, introspection, PEP-guarded resources, proxy mode.

The app core (`AuthzApp.handle`) is socket-free — it maps an HttpRequest to an
HttpResponse — so the same object serves live traffic behind the threading
server and direct in-process dispatch from the bench harness. No resource
handler is reachable except through the enforcement wrapper.
"""

from __future__ import annotations

import base64
import hashlib
import http.client
import json
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Mapping

from . import codec, policy, registrar as registrar_mod, tokens
from .config import ConfigInvalid, Role, ServiceConfig


class ServiceError(Exception):
    pass


class BindFailure(ServiceError):
    pass


class PolicyLoadFailure(ServiceError):
    pass


REASON_HEADER = "X-Capodaz-Reason"

CT_JSON = "application/json"
CT_CBOR = "application/cbor"
CT_COSE = "application/cose"

# Hop-by-hop headers never forwarded by the proxy, either direction.
_HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailers",
    "transfer-encoding",
    "upgrade",
    "host",
}

_METHOD_ACTIONS = {"GET": "read"}

_DENY_STATUS = {
    policy.DenyReason.TOKEN_INVALID: 401,
    policy.DenyReason.TOKEN_EXPIRED: 401,
    policy.DenyReason.TOKEN_REVOKED: 401,
    policy.DenyReason.POLICY_DENY: 403,
    policy.DenyReason.POLICY_NOT_APPLICABLE: 403,
    policy.DenyReason.POLICY_INDETERMINATE: 403,
    policy.DenyReason.OBLIGATION_FAILED: 403,
}


@dataclass
class HttpRequest:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    source: str = ""
    query: dict[str, str] = field(default_factory=dict)

    def header(self, name: str, default: str = "") -> str:
        return self.headers.get(name.lower(), default)


@dataclass
class HttpResponse:
    status: int
    body: bytes = b""
    headers: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ResourceDescriptor:
    resource_id: str
    path: str
    actions: tuple[str, ...]
    attributes: policy.AttributeBag


def load_issuer_key(path: str | Path) -> tokens.CoseKey:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return tokens.CoseKey.from_map(doc)


def save_issuer_key(key: tokens.CoseKey, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(key.to_map(binary=False), indent=2) + "\n", encoding="utf-8"
    )


def load_clients(path: str | Path) -> tokens.ClientDirectory:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    directory = tokens.ClientDirectory()
    for row in doc.get("clients", []):
        if "secret" in row:
            entry = tokens.ClientEntry.with_secret(
                row["client_id"],
                row["secret"],
                allowed_grant_types=tuple(
                    row.get(
                        "allowed_grant_types",
                        ("client_credentials", "password", "symmetric_key", "refresh_token"),
                    )
                ),
                allowed_audiences=tuple(row.get("allowed_audiences", ("*",))),
                default_scope=tuple(row.get("default_scope", ("read",))),
                token_ttl=row.get("token_ttl"),
                authorities=row.get("authorities"),
                is_admin=row.get("is_admin", False),
            )
        else:
            entry = tokens.ClientEntry(
                client_id=row["client_id"],
                secret_salt=codec.base64url_decode(row["secret_salt"]),
                secret_hash=codec.base64url_decode(row["secret_hash"]),
                allowed_grant_types=frozenset(row.get("allowed_grant_types", ())),
                allowed_audiences=frozenset(row.get("allowed_audiences", ("*",))),
                default_scope=tuple(row.get("default_scope", ("read",))),
                token_ttl=row.get("token_ttl"),
                authorities=row.get("authorities"),
                is_admin=row.get("is_admin", False),
            )
        directory.add(entry)
    return directory


def load_resources(path: str | Path) -> list[ResourceDescriptor]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    descriptors = []
    seen_paths: set[str] = set()
    for row in doc.get("resources", []):
        if row["path"] in seen_paths:
            raise ConfigInvalid(f"resources: duplicate path {row['path']!r}")
        seen_paths.add(row["path"])
        attrs = policy.AttributeBag.single_category(
            policy.Category.RESOURCE,
            {name: list(vals) for name, vals in row.get("attributes", {}).items()},
        )
        descriptors.append(
            ResourceDescriptor(
                resource_id=row["resource_id"],
                path=row["path"],
                actions=tuple(row.get("actions", ("read",))),
                attributes=attrs,
            )
        )
    return descriptors


def membership_validator(allowed: tuple[str, ...]) -> policy.ObligationValidator:
    """Obligation passes when the token's client is in the allowed set ('*' = all)."""

    def check(request: policy.AccessRequest, obligation: policy.Obligation, now: int) -> bool:
        if "*" in allowed:
            return True
        claims = request.token_claims
        return claims is not None and claims.client_id in allowed

    return check


class AuthzApp:
    """Socket-free request handling core shared by the live server and in-process callers."""

    def __init__(
        self,
        config: ServiceConfig,
        *,
        clock: Callable[[], float] = time.time,
        policy_set: policy.PolicySet | None = None,
        registrar: registrar_mod.Registrar | None = None,
        clients: tokens.ClientDirectory | None = None,
        resources: list[ResourceDescriptor] | None = None,
        issuer_key: tokens.CoseKey | None = None,
        validators: policy.ObligationValidators | None = None,
    ):
        config.validate()
        self.config = config
        self.clock = clock
        self.registrar = registrar if registrar is not None else registrar_mod.Registrar(
            log_path=config.registrar_log_path
        )
        self._proxy_lock = threading.Lock()
        self._proxy_active: dict[str, int] = {}

        if config.role is Role.PROXY_RESOURCE_SERVER:
            self.policy_set = None
            self.clients = tokens.ClientDirectory()
            self.resources = []
            self.issuer_key = None
            self.validators: policy.ObligationValidators = {}
            return

        if policy_set is not None:
            self.policy_set = policy_set
        elif config.policy_path:
            try:
                self.policy_set = policy.pap_load(Path(config.policy_path).read_bytes())
            except (OSError, policy.PolicyError) as exc:
                raise PolicyLoadFailure(f"cannot load policy {config.policy_path}: {exc}") from exc
        else:
            raise ConfigInvalid("policy_path: required for this role")

        if issuer_key is not None:
            self.issuer_key = issuer_key
        elif config.issuer_key_path:
            try:
                self.issuer_key = load_issuer_key(config.issuer_key_path)
            except (OSError, ValueError, tokens.TokenError) as exc:
                raise ConfigInvalid(f"issuer_key_path: {exc}") from exc
        else:
            raise ConfigInvalid("issuer_key_path: required for this role")

        if clients is not None:
            self.clients = clients
        elif config.clients_path:
            self.clients = load_clients(config.clients_path)
        else:
            self.clients = tokens.ClientDirectory()

        if resources is not None:
            self.resources = list(resources)
        elif config.resources_path:
            self.resources = load_resources(config.resources_path)
        else:
            self.resources = []

        self.validators = validators if validators is not None else {
            "CheckSubscription": membership_validator(config.subscription_clients),
            "CheckPayment": membership_validator(config.payment_clients),
            "CheckPlatform": membership_validator(config.platform_clients),
        }

    # -- dispatch --

    def handle(self, request: HttpRequest) -> HttpResponse:
        try:
            return self._route(request)
        except Exception as exc:  # never leak a traceback to the wire
            return _error(request, 500, "InternalError", str(exc))

    def _route(self, request: HttpRequest) -> HttpResponse:
        role = self.config.role
        if role is Role.PROXY_RESOURCE_SERVER:
            return self._proxy(request)
        if request.path == "/token":
            if role not in (Role.AUTHORIZATION_SERVER, Role.COMBINED):
                return _error(request, 404, "NotFound", "no such endpoint for this role")
            if request.method != "POST":
                return _error(request, 405, "MethodNotAllowed", "POST required")
            return self._token(request)
        if request.path == "/introspect":
            if role not in (Role.AUTHORIZATION_SERVER, Role.COMBINED):
                return _error(request, 404, "NotFound", "no such endpoint for this role")
            if request.method != "POST":
                return _error(request, 405, "MethodNotAllowed", "POST required")
            return self._introspect(request)
        if role in (Role.RESOURCE_SERVER, Role.COMBINED):
            descriptor = self._find_resource(request.path)
            if descriptor is not None:
                return self._resource(request, descriptor)
            if request.path.startswith("/resource/"):
                return _error(request, 404, "UnknownResource", request.path)
        return _error(request, 404, "NotFound", request.path)

    # -- token endpoint --

    def _token(self, request: HttpRequest) -> HttpResponse:
        now = int(self.clock())
        content_type = request.header("content-type").split(";")[0].strip().lower()
        try:
            if content_type == CT_COSE:
                return self._token_cose(request, now)
            body = _parse_body(request, content_type)
            basic = _basic_auth(request)
            if basic is not None:
                body.setdefault("client_id", basic[0])
                body.setdefault("client_secret", basic[1])
            grant = tokens.GrantRequest.from_body(body)
            if grant.grant_type is tokens.GrantType.REFRESH_TOKEN and not grant.aud:
                prior = tokens.verify_token(grant.refresh_material, self.issuer_key, now)
                grant.aud = prior.aud
            response = tokens.handle_grant(grant, self.issuer_key, self.clients, now)
        except (tokens.UnknownClient, tokens.BadCredentials) as exc:
            return _error(request, 401, type(exc).__name__, str(exc))
        except tokens.TokenError as exc:
            return _error(request, 400, type(exc).__name__, str(exc))
        except codec.CodecError as exc:
            return _error(request, 400, "MalformedBody", str(exc))

        self._register_issued(response, now)
        return _respond(request, 200, response.to_map(binary=_wants_cbor(request)))

    def _token_cose(self, request: HttpRequest, now: int) -> HttpResponse:
        """Refresh grant over COSE: MAC keyed by the prior token's cnf key (kid = jti)."""

        def key_for(jti: str) -> tokens.CoseKey:
            record = self.registrar.get(jti)
            if record is None or record.cnf_key is None:
                raise registrar_mod.NoPopKeyBound(f"no cnf key bound for {jti!r}")
            return record.cnf_key

        try:
            prior_jti, payload = tokens.cose_mac_unwrap(request.body, key_for)
        except registrar_mod.RegistrarError as exc:
            return _error(request, 401, "BadCredentials", str(exc))
        except tokens.TokenError as exc:
            return _error(request, 400, type(exc).__name__, str(exc))
        if self.registrar.lookup(prior_jti, now) is not registrar_mod.TokenStatus.ACTIVE:
            return _error(request, 401, "BadCredentials", f"prior token {prior_jti!r} not active")
        prior = self.registrar.get(prior_jti)

        try:
            body = codec.decode_cbor(payload)
            if not isinstance(body, dict):
                raise codec.CodecError("COSE payload is not a map")
            pop_key = None
            cnf = body.get("cnf")
            if isinstance(cnf, dict) and "COSE_Key" in cnf:
                pop_key = tokens.CoseKey.from_map(cnf["COSE_Key"])
            client_id = str(body.get("client_id", prior.client_id))
            entry = self.clients.get(client_id)
            if entry is None:
                return _error(request, 401, "UnknownClient", client_id)
            aud = str(body.get("aud", "")) or prior.aud
            if not entry.allows_audience(aud):
                return _error(request, 400, "InvalidAudience", aud)
            scope = body.get("scope")
            if isinstance(scope, str):
                scope = scope.split()
            response = tokens.issue_bound_token(
                entry,
                aud=aud,
                scope=tuple(scope) if scope else None,
                cnf=pop_key if pop_key is not None else tokens.new_symmetric_key(),
                issuer_key=self.issuer_key,
                now=now,
            )
        except tokens.TokenError as exc:
            return _error(request, 400, type(exc).__name__, str(exc))
        except codec.CodecError as exc:
            return _error(request, 400, "MalformedBody", str(exc))
        self._register_issued(response, now)
        return _respond(request, 200, response.to_map(binary=True), content_type=CT_CBOR)

    def _register_issued(self, response: tokens.TokenResponse, now: int) -> None:
        claims = tokens.verify_token(response.access_token, self.issuer_key, now)
        self.registrar.register(
            registrar_mod.TokenRecord(
                jti=claims.jti,
                aud=claims.aud,
                client_id=claims.client_id,
                issued_at=claims.iat if claims.iat is not None else now,
                exp=claims.exp,
                cnf_kid=response.cnf.kid if response.cnf is not None else None,
                cnf_key=response.cnf,
            )
        )

    # -- introspection --

    def _introspect(self, request: HttpRequest) -> HttpResponse:
        basic = _basic_auth(request)
        entry = self.clients.get(basic[0]) if basic else None
        if entry is None or not entry.is_admin or not entry.verify_secret(basic[1]):
            return _error(request, 401, "Unauthenticated", "admin credentials required")
        now = int(self.clock())
        try:
            body = _parse_body(request, request.header("content-type").split(";")[0].strip().lower())
        except codec.CodecError as exc:
            return _error(request, 400, "MalformedBody", str(exc))
        jti = body.get("jti")
        digest = None
        if not jti and body.get("token"):
            wire = _bearer_to_wire(str(body["token"]))
            try:
                claims = tokens.verify_token(wire, self.issuer_key, now)
            except tokens.Expired as exc:
                claims = exc.claims
            except tokens.TokenError:
                return _error(request, 404, "Unknown", "token does not verify")
            jti = claims.jti
            digest = hashlib.sha256(
                codec.render_claims_text(claims.to_map()).encode("utf-8")
            ).hexdigest()
        if not jti:
            return _error(request, 400, "MalformedBody", "jti or token required")
        status = self.registrar.lookup(str(jti), now)
        if status is registrar_mod.TokenStatus.UNKNOWN:
            return _error(request, 404, "Unknown", f"jti {jti!r} not registered")
        record = self.registrar.get(str(jti))
        doc: dict[str, Any] = {"status": status.value, "jti": jti, "exp": record.exp}
        if digest is not None:
            doc["claims_digest"] = digest
        return _respond(request, 200, doc)

    # -- guarded resources --

    def _find_resource(self, path: str) -> ResourceDescriptor | None:
        for descriptor in self.resources:
            if descriptor.path == path:
                return descriptor
        return None

    def _resource(self, request: HttpRequest, descriptor: ResourceDescriptor) -> HttpResponse:
        now = int(self.clock())
        if request.method in _METHOD_ACTIONS:
            action = _METHOD_ACTIONS[request.method]
        elif request.method == "POST":
            action = request.query.get("action", "write")
        else:
            return _error(request, 405, "MethodNotAllowed", request.method)
        if action not in descriptor.actions:
            return _error(request, 405, "UnknownAction", action)

        wire = _extract_bearer(request)
        raw = policy.ResourceRequest(
            token_wire=wire,
            resource_id=descriptor.resource_id,
            action=action,
            resource_attributes=descriptor.attributes,
            source=request.source,
        )
        result = policy.pep_enforce(
            raw,
            self.policy_set,
            self.registrar,
            self.validators,
            now,
            issuer_key=self.issuer_key,
        )
        if not result.allowed:
            status = _DENY_STATUS[result.reason]
            response = _error(request, status, result.reason.value, result.reason_text())
            response.headers[REASON_HEADER] = result.reason_text()
            return response
        return self._serve_resource(request, descriptor)

    def _serve_resource(self, request: HttpRequest, descriptor: ResourceDescriptor) -> HttpResponse:
        # Only reachable through the enforcement wrapper above.
        attrs = {
            name: values
            for (_, name), values in descriptor.attributes.entries.items()
        }
        doc = {
            "resource_id": descriptor.resource_id,
            "actions": list(descriptor.actions),
            "attributes": attrs,
        }
        return _respond(request, 200, doc)

    # -- proxy mode --

    def _proxy(self, request: HttpRequest) -> HttpResponse:
        cfg = self.config
        allowed = any(
            request.path == entry or (entry.endswith("/") and request.path.startswith(entry))
            for entry in cfg.proxy_allow_paths
        )
        if not allowed:
            response = _error(request, 403, "ProxyPathRejected", request.path)
            response.headers[REASON_HEADER] = "ProxyPathRejected"
            return response
        for name in cfg.proxy_required_headers:
            if not request.header(name):
                return _error(request, 400, "MissingHeader", name)
        if len(request.body) > cfg.proxy_max_body:
            return _error(request, 413, "BodyTooLarge", f"limit {cfg.proxy_max_body} bytes")

        source = request.source or "unknown"
        with self._proxy_lock:
            active = self._proxy_active.get(source, 0)
            if active >= cfg.proxy_source_cap:
                return _error(request, 429, "SourceCapExceeded", source)
            self._proxy_active[source] = active + 1
        try:
            return self._forward(request)
        finally:
            with self._proxy_lock:
                self._proxy_active[source] -= 1

    def _forward(self, request: HttpRequest) -> HttpResponse:
        host, _, port = self.config.upstream.rpartition(":")
        headers = {
            name: value
            for name, value in request.headers.items()
            if name not in _HOP_BY_HOP and not name.startswith("x-capodaz-")
        }
        path = request.path
        if request.query:
            path += "?" + urllib.parse.urlencode(request.query)
        conn = http.client.HTTPConnection(host, int(port), timeout=self.config.request_timeout)
        try:
            conn.request(request.method, path, body=request.body or None, headers=headers)
            upstream = conn.getresponse()
            body = upstream.read()
            resp_headers = {
                name: value
                for name, value in upstream.getheaders()
                if name.lower() not in _HOP_BY_HOP and name.lower() != "content-length"
            }
            return HttpResponse(upstream.status, body, resp_headers)
        except (OSError, http.client.HTTPException) as exc:
            return _error(request, 502, "UpstreamUnreachable", str(exc))
        finally:
            conn.close()


# -- request/response helpers --


def _wants_cbor(request: HttpRequest) -> bool:
    content_type = request.header("content-type", "")
    accept = request.header("accept", "")
    return "cbor" in content_type or "cose" in content_type or "cbor" in accept


def _parse_body(request: HttpRequest, content_type: str) -> dict[str, Any]:
    if not request.body:
        return {}
    if content_type == CT_CBOR:
        doc = codec.decode_cbor(request.body)
        if not isinstance(doc, dict):
            raise codec.CodecError("body is not a CBOR map")
        return doc
    try:
        doc = json.loads(request.body.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise codec.CodecError(f"body is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise codec.CodecError("body is not a JSON object")
    return doc


def _respond(
    request: HttpRequest,
    status: int,
    doc: Mapping[str, Any],
    *,
    content_type: str | None = None,
) -> HttpResponse:
    if content_type is None:
        content_type = CT_CBOR if _wants_cbor(request) else CT_JSON
    if content_type == CT_CBOR:
        body = codec.encode_cbor(dict(doc))
    else:
        body = json.dumps(_json_safe(doc), separators=(", ", ": ")).encode("utf-8")
    return HttpResponse(status, body, {"Content-Type": content_type})


def _json_safe(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return codec.base64url_encode(value)
    if isinstance(value, Mapping):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _error(request: HttpRequest, status: int, code: str, reason: str) -> HttpResponse:
    return _respond(request, status, {"code": code, "reason": reason})


def _basic_auth(request: HttpRequest) -> tuple[str, str] | None:
    header = request.header("authorization")
    if not header.lower().startswith("basic "):
        return None
    try:
        decoded = base64.b64decode(header[6:].strip()).decode("utf-8")
        user, _, secret = decoded.partition(":")
        return user, secret
    except (ValueError, UnicodeDecodeError):
        return None


def _extract_bearer(request: HttpRequest) -> bytes | None:
    header = request.header("authorization")
    if not header.lower().startswith("bearer "):
        return None
    return _bearer_to_wire(header[7:].strip())


def _bearer_to_wire(token_text: str) -> bytes:
    """JWTs travel verbatim; CWTs travel as unpadded base64url of the CBOR wire."""
    if "." in token_text:
        return token_text.encode("ascii", errors="replace")
    try:
        return codec.base64url_decode(token_text)
    except codec.Base64Error:
        return token_text.encode("ascii", errors="replace")


# -- live server --


class _RequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: AuthzApp = None  # set per server class

    def _dispatch(self) -> None:
        length = int(self.headers.get("Content-Length", "0") or "0")
        body = self.rfile.read(length) if length else b""
        parsed = urllib.parse.urlsplit(self.path)
        query = dict(urllib.parse.parse_qsl(parsed.query))
        headers = {name.lower(): value for name, value in self.headers.items()}
        forwarded = headers.get("x-forwarded-for", "")
        source = forwarded.split(",")[0].strip() if forwarded else self.client_address[0]
        request = HttpRequest(
            method=self.command,
            path=parsed.path,
            headers=headers,
            body=body,
            source=source,
            query=query,
        )
        response = self.app.handle(request)
        self.send_response(response.status)
        for name, value in response.headers.items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(response.body)))
        self.end_headers()
        self.wfile.write(response.body)

    do_GET = _dispatch
    do_POST = _dispatch
    do_PUT = _dispatch
    do_DELETE = _dispatch

    def log_message(self, format: str, *args: Any) -> None:  # quiet by default
        pass


@dataclass
class ServiceHandle:
    """A running service; close() drains in-flight requests before returning."""

    app: AuthzApp
    server: ThreadingHTTPServer
    thread: threading.Thread
    purger: registrar_mod.PeriodicPurger | None = None

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def base_url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}"

    def close(self) -> None:
        if self.purger is not None:
            self.purger.stop()
        self.server.shutdown()
        self.server.server_close()  # joins in-flight handler threads
        self.thread.join()

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


def serve(config: ServiceConfig, *, app: AuthzApp | None = None) -> ServiceHandle:
    """Start the service; endpoints are live when this returns."""
    if app is None:
        app = AuthzApp(config)
    host, _, port = config.listen_address.rpartition(":")

    handler = type("BoundHandler", (_RequestHandler,), {"app": app})
    try:
        server = ThreadingHTTPServer((host, int(port)), handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {config.listen_address}: {exc}") from exc
    server.daemon_threads = False
    server.timeout = config.request_timeout

    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()

    purger = None
    if config.purge_interval > 0 and config.role is not Role.PROXY_RESOURCE_SERVER:
        purger = registrar_mod.PeriodicPurger(app.registrar, config.purge_interval, app.clock)
        purger.start()
    return ServiceHandle(app=app, server=server, thread=thread, purger=purger)
