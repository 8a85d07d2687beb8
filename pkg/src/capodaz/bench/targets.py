"""Benchmark targets: deterministic stub models, the in-process service, real HTTP.

Stub and in-process targets run under the virtual-time engine; an `http://`
target selects the wall-clock engine (see engine.py).
"""

from __future__ import annotations

import time
import urllib.parse
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .. import service as service_mod
from .. import tokens
from .metrics import STATUS_HTTP_ERROR, STATUS_SUCCESS, STATUS_TIMEOUT
from .workload import BenchError, RequestTemplate


@dataclass(frozen=True)
class SimOutcome:
    latency: float  # seconds, as observed by the virtual user
    status_kind: str
    status_code: int = 0
    request_bytes: int = 0
    response_bytes: int = 0


class SimTarget(Protocol):
    def issue(self, now: float, timeout: float) -> SimOutcome: ...

    def reset(self) -> None: ...


@dataclass
class FixedLatencyStub:
    """Unlimited-capacity server with a constant service latency."""

    latency: float = 0.001
    request_bytes: int = 64
    response_bytes: int = 64
    status_code: int = 200

    def issue(self, now: float, timeout: float) -> SimOutcome:
        if self.latency > timeout:
            return SimOutcome(timeout, STATUS_TIMEOUT, 0, self.request_bytes, 0)
        kind = STATUS_SUCCESS if 200 <= self.status_code < 300 else STATUS_HTTP_ERROR
        return SimOutcome(
            self.latency, kind, self.status_code, self.request_bytes, self.response_bytes
        )

    def reset(self) -> None:
        pass


@dataclass
class CapacityStub:
    """Single-server queue with fixed capacity; admission is bounded by the timeout.

    A request whose projected completion would exceed the caller's timeout is
    rejected at arrival and surfaces as a Timeout sample without consuming
    capacity — the plateau mechanism under saturating offered load.
    """

    rate: float  # served requests per second
    request_bytes: int = 64
    response_bytes: int = 64
    _busy_until: float = field(default=0.0, repr=False)

    def issue(self, now: float, timeout: float) -> SimOutcome:
        service_time = 1.0 / self.rate
        start = max(now, self._busy_until)
        completion = start + service_time
        if completion - now > timeout:
            return SimOutcome(timeout, STATUS_TIMEOUT, 0, self.request_bytes, 0)
        self._busy_until = completion
        return SimOutcome(
            completion - now, STATUS_SUCCESS, 200, self.request_bytes, self.response_bytes
        )

    def reset(self) -> None:
        self._busy_until = 0.0


@dataclass
class CountingTarget:
    """Wrapper that counts issued requests; used to check sample conservation."""

    inner: SimTarget
    issued: int = 0

    def issue(self, now: float, timeout: float) -> SimOutcome:
        self.issued += 1
        return self.inner.issue(now, timeout)

    def reset(self) -> None:
        self.issued = 0
        self.inner.reset()


class InProcessTarget:
    """Drives an app handler directly, measuring its compute time per request.

    With a capacity model attached (the default for service-backed runs), a
    single-server queue paces completions at `model_rate`; the measured handler
    time still counts when it exceeds the modeled service time. Rejections
    follow the same timeout-bounded admission rule as CapacityStub.
    """

    def __init__(
        self,
        handle: Callable[[service_mod.HttpRequest], service_mod.HttpResponse],
        template: RequestTemplate,
        *,
        model_rate: float | None = 400.0,
        bearer: str | None = None,
    ):
        self.handle = handle
        self.model_rate = model_rate
        headers = {name.lower(): value for name, value in template.headers}
        if bearer is not None:
            headers["authorization"] = f"Bearer {bearer}"
        self._request = service_mod.HttpRequest(
            method=template.method,
            path=template.path,
            headers=headers,
            body=template.body,
            source="bench",
        )
        self._request_bytes = (
            len(template.method)
            + len(template.path)
            + sum(len(k) + len(v) for k, v in headers.items())
            + len(template.body)
        )
        self._busy_until = 0.0

    def issue(self, now: float, timeout: float) -> SimOutcome:
        if self.model_rate is not None:
            nominal = 1.0 / self.model_rate
            start = max(now, self._busy_until)
            if start + nominal - now > timeout:
                return SimOutcome(timeout, STATUS_TIMEOUT, 0, self._request_bytes, 0)
        t0 = time.perf_counter()
        response = self.handle(self._request)
        measured = time.perf_counter() - t0
        if self.model_rate is not None:
            service_time = max(measured, nominal)
            completion = max(now, self._busy_until) + service_time
            self._busy_until = completion
            latency = completion - now
        else:
            latency = measured
        if latency > timeout:
            return SimOutcome(timeout, STATUS_TIMEOUT, 0, self._request_bytes, 0)
        kind = STATUS_SUCCESS if 200 <= response.status < 300 else STATUS_HTTP_ERROR
        return SimOutcome(
            latency, kind, response.status, self._request_bytes, len(response.body)
        )

    def reset(self) -> None:
        self._busy_until = 0.0


@dataclass(frozen=True)
class HttpTargetSpec:
    """Marker for real-network targets, handled by the wall-clock engine."""

    url: str

    @property
    def parts(self) -> urllib.parse.SplitResult:
        return urllib.parse.urlsplit(self.url)


def make_target(target: str) -> SimTarget | HttpTargetSpec:
    """Resolve a target string.

    Schemes: `http(s)://...` (wall-clock engine), `stub:fixed?latency_ms=..`,
    `stub:capacity?rps=..`, `inproc:<config-path>?client_id=..&client_secret=..`.
    """
    if target.startswith("http://") or target.startswith("https://"):
        return HttpTargetSpec(target)
    scheme, _, rest = target.partition(":")
    if scheme == "stub":
        kind, _, query = rest.partition("?")
        params = dict(urllib.parse.parse_qsl(query))
        if kind == "fixed":
            return FixedLatencyStub(
                latency=float(params.get("latency_ms", "1")) / 1000.0,
                request_bytes=int(params.get("request_bytes", "64")),
                response_bytes=int(params.get("response_bytes", "64")),
                status_code=int(params.get("status", "200")),
            )
        if kind == "capacity":
            return CapacityStub(
                rate=float(params.get("rps", "100")),
                request_bytes=int(params.get("request_bytes", "64")),
                response_bytes=int(params.get("response_bytes", "64")),
            )
        raise BenchError(f"unknown stub kind {kind!r}")
    if scheme == "inproc":
        path, _, query = rest.partition("?")
        params = dict(urllib.parse.parse_qsl(query))
        return inprocess_target_from_config(path, params)
    raise BenchError(f"unknown target {target!r}")


def inprocess_target_from_config(config_path: str, params: dict[str, str]) -> InProcessTarget:
    """Build the combined service from a config file and point the bench at it.

    Obtains a bearer token through the app's own /token endpoint using the
    client credentials given in the target query string.
    """
    import json

    from ..config import load_config

    cfg = load_config(config_path)
    app = service_mod.AuthzApp(cfg)
    client_id = params.get("client_id", "")
    client_secret = params.get("client_secret", "")
    aud = params.get("aud", "bench")
    body = json.dumps(
        {
            "grant_type": "client_credentials",
            "client_id": client_id,
            "client_secret": client_secret,
            "aud": aud,
        }
    ).encode("utf-8")
    response = app.handle(
        service_mod.HttpRequest(
            method="POST",
            path="/token",
            headers={"content-type": service_mod.CT_JSON},
            body=body,
            source="bench",
        )
    )
    if response.status != 200:
        raise BenchError(f"in-process token grant failed: {response.body!r}")
    token_doc = json.loads(response.body)
    path = params.get("path") or (app.resources[0].path if app.resources else "/resource/none")
    model_rate = params.get("model_rps")
    return InProcessTarget(
        app.handle,
        RequestTemplate(method="GET", path=path),
        model_rate=float(model_rate) if model_rate else 400.0,
        bearer=token_doc["access_token"],
    )
