"""Workload execution: virtual-time simulation and wall-clock HTTP engines.

Closed-loop users (binomial, uniform) wait for each response before the next
request; open-loop users (poisson) issue on a clock-driven arrival schedule
regardless of completions. Every virtual user owns an independent RNG stream
derived from (seed, user index), so a seed pins the entire arrival schedule.
"""

from __future__ import annotations

import heapq
import http.client
import random
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from .metrics import (
    STATUS_CONN_ERROR,
    STATUS_HTTP_ERROR,
    STATUS_SUCCESS,
    STATUS_TIMEOUT,
    MetricsReport,
    Sample,
    aggregate,
)
from .targets import HttpTargetSpec, SimTarget, make_target
from .workload import BenchError, Pattern, RoundPlan, WorkloadSpec

_MASK64 = (1 << 64) - 1


class TargetResolutionFailure(BenchError):
    def __init__(self, message: str, completed=None):
        super().__init__(message)
        self.completed = completed or []


def user_rng(seed: int, user_index: int) -> random.Random:
    """Independent, reproducible RNG stream per virtual user (splitmix-style)."""
    z = (seed + (user_index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return random.Random(z ^ (z >> 31))


def next_arrival_delay(pattern: Pattern, rng: random.Random, spec: WorkloadSpec) -> float:
    """Delay before a user's next request under its arrival model.

    Binomial is back-to-back (the per-user rate cap paces it separately),
    uniform is exactly the think time, poisson draws Exp(1/lambda).
    """
    if pattern is Pattern.BINOMIAL:
        return 0.0
    if pattern is Pattern.UNIFORM:
        return spec.think_time
    return rng.expovariate(spec.lam)


# -- virtual-time engine -----------------------------------------------------


def run_simulated(spec: WorkloadSpec, target: SimTarget) -> list[Sample]:
    """Discrete-event run over a virtual clock; deterministic for a given seed."""
    spec.validate()
    samples: list[Sample] = []
    duration = spec.duration
    if duration <= 0:
        return samples

    closed = spec.pattern is not Pattern.POISSON
    rngs = [user_rng(spec.seed, u) for u in range(spec.users)]
    heap: list[tuple[float, int, int]] = []
    seq = 0
    if closed:
        for u in range(spec.users):
            heapq.heappush(heap, (0.0, seq, u))
            seq += 1
    else:
        for u in range(spec.users):
            first = rngs[u].expovariate(spec.lam)
            if first < duration:
                heapq.heappush(heap, (first, seq, u))
                seq += 1
    min_gap = 1.0 / spec.per_user_rate_cap

    while heap:
        t, _, u = heapq.heappop(heap)
        outcome = target.issue(t, spec.request_timeout)
        samples.append(
            Sample(
                send_time_ns=round(t * 1e9),
                latency_ns=round(outcome.latency * 1e9),
                status_kind=outcome.status_kind,
                status_code=outcome.status_code,
                request_bytes=outcome.request_bytes,
                response_bytes=outcome.response_bytes,
                user_index=u,
            )
        )
        if closed:
            completion = t + outcome.latency
            if spec.pattern is Pattern.UNIFORM:
                nxt = completion + spec.think_time
            else:
                nxt = max(completion, t + min_gap)
        else:
            nxt = t + rngs[u].expovariate(spec.lam)
        if nxt < duration:
            heapq.heappush(heap, (nxt, seq, u))
            seq += 1
    return samples


# -- wall-clock engine ---------------------------------------------------------


class WallClockEngine:
    """Thread-based engine for real HTTP targets. Desk-scale: closed-loop users
    get one thread each; open-loop arrivals dispatch into a worker pool."""

    def __init__(self, max_workers: int = 64):
        self.max_workers = max_workers

    def run(self, spec: WorkloadSpec, http_target: HttpTargetSpec) -> list[Sample]:
        spec.validate()
        parts = http_target.parts
        host = parts.hostname or "127.0.0.1"
        port = parts.port or (443 if parts.scheme == "https" else 80)
        try:
            socket.getaddrinfo(host, port)
        except OSError as exc:
            raise TargetResolutionFailure(f"cannot resolve {host}:{port}: {exc}") from exc
        if spec.duration <= 0:
            return []

        base_path = parts.path or ""
        samples: list[Sample] = []
        lock = threading.Lock()
        start_ns = time.monotonic_ns()
        deadline_ns = start_ns + int(spec.duration * 1e9)

        def do_request(user_index: int, conn_cache: dict) -> None:
            conn = conn_cache.get("conn")
            if conn is None:
                conn = http.client.HTTPConnection(host, port, timeout=spec.request_timeout)
                conn_cache["conn"] = conn
            headers = dict(spec.template.headers)
            path = base_path + spec.template.path
            issue_ns = time.monotonic_ns()
            kind, code, resp_len = STATUS_CONN_ERROR, 0, 0
            try:
                conn.request(spec.template.method, path or "/", body=spec.template.body or None, headers=headers)
                response = conn.getresponse()
                body = response.read()
                resp_len = len(body)
                code = response.status
                kind = STATUS_SUCCESS if 200 <= code < 300 else STATUS_HTTP_ERROR
            except socket.timeout:
                kind = STATUS_TIMEOUT
                _drop_conn(conn_cache)
            except (OSError, http.client.HTTPException):
                kind = STATUS_CONN_ERROR
                _drop_conn(conn_cache)
            latency_ns = time.monotonic_ns() - issue_ns
            if kind == STATUS_TIMEOUT or (
                kind == STATUS_SUCCESS and latency_ns > spec.request_timeout * 1e9
            ):
                kind = STATUS_TIMEOUT
            request_bytes = (
                len(spec.template.method)
                + len(path)
                + sum(len(k) + len(v) for k, v in headers.items())
                + len(spec.template.body)
            )
            with lock:
                samples.append(
                    Sample(
                        send_time_ns=issue_ns - start_ns,
                        latency_ns=latency_ns,
                        status_kind=kind,
                        status_code=code,
                        request_bytes=request_bytes,
                        response_bytes=resp_len,
                        user_index=user_index,
                    )
                )

        def closed_user(user_index: int) -> None:
            conn_cache: dict = {}
            min_gap = 1.0 / spec.per_user_rate_cap
            next_issue = start_ns
            while True:
                now = time.monotonic_ns()
                if now >= deadline_ns or next_issue >= deadline_ns:
                    break
                if next_issue > now:
                    time.sleep((next_issue - now) / 1e9)
                    if time.monotonic_ns() >= deadline_ns:
                        break
                issue = time.monotonic_ns()
                do_request(user_index, conn_cache)
                done = time.monotonic_ns()
                if spec.pattern is Pattern.UNIFORM:
                    next_issue = done + int(spec.think_time * 1e9)
                else:
                    next_issue = max(done, issue + int(min_gap * 1e9))
            _drop_conn(conn_cache)

        def open_user(user_index: int, pool: ThreadPoolExecutor) -> None:
            rng = user_rng(spec.seed, user_index)
            next_ns = start_ns + int(rng.expovariate(spec.lam) * 1e9)
            while next_ns < deadline_ns:
                wait = (next_ns - time.monotonic_ns()) / 1e9
                if wait > 0:
                    time.sleep(wait)
                pool.submit(do_request, user_index, {})
                next_ns += int(rng.expovariate(spec.lam) * 1e9)

        if spec.pattern is Pattern.POISSON:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                schedulers = [
                    threading.Thread(target=open_user, args=(u, pool), daemon=True)
                    for u in range(spec.users)
                ]
                for th in schedulers:
                    th.start()
                for th in schedulers:
                    th.join()
        else:
            workers = [
                threading.Thread(target=closed_user, args=(u,), daemon=True)
                for u in range(spec.users)
            ]
            for th in workers:
                th.start()
            for th in workers:
                th.join()

        samples.sort(key=lambda s: (s.send_time_ns, s.user_index))
        return samples


def _drop_conn(conn_cache: dict) -> None:
    conn = conn_cache.pop("conn", None)
    if conn is not None:
        try:
            conn.close()
        except OSError:
            pass


# -- entry points ---------------------------------------------------------------


def run_workload(
    spec: WorkloadSpec, target: SimTarget | HttpTargetSpec | None = None
) -> list[Sample]:
    """Run one workload; each issued request yields exactly one Sample."""
    if target is None:
        target = make_target(spec.target)
    if isinstance(target, HttpTargetSpec):
        return WallClockEngine().run(spec, target)
    target.reset()
    return run_simulated(spec, target)


def wall_duration_of(spec: WorkloadSpec, samples: list[Sample]) -> float:
    """Run duration including completion drain past the arrival window."""
    wall = spec.duration
    for s in samples:
        wall = max(wall, s.completion_ns / 1e9)
    return wall


def measure_samples(spec: WorkloadSpec, samples: list[Sample]) -> tuple[MetricsReport, float]:
    """Warm-up-trimmed aggregation; returns (report, wall duration)."""
    wall = wall_duration_of(spec, samples)
    cut = spec.warmup_fraction * spec.duration
    if cut > 0:
        cut_ns = int(cut * 1e9)
        samples = [s for s in samples if s.send_time_ns >= cut_ns]
    return aggregate(samples, wall - cut), wall


def run_rounds(
    plan: RoundPlan,
    *,
    target: SimTarget | HttpTargetSpec | None = None,
    sleep=time.sleep,
) -> list[tuple[WorkloadSpec, MetricsReport]]:
    """Execute every spec of the plan in order with a cool-down gap between runs.

    The cool-down only sleeps for wall-clock targets; virtual-time runs are
    isolated by construction. Aborts remaining specs only when the target
    cannot be resolved at all.
    """
    results: list[tuple[WorkloadSpec, MetricsReport]] = []
    all_specs = list(plan.specs())
    for i, spec in enumerate(all_specs):
        try:
            samples = run_workload(spec, target)
        except TargetResolutionFailure as exc:
            raise TargetResolutionFailure(str(exc), completed=results) from exc
        report, _ = measure_samples(spec, samples)
        results.append((spec, report))
        is_wall = isinstance(
            target if target is not None else make_target(spec.target), HttpTargetSpec
        )
        if is_wall and plan.cooldown > 0 and i + 1 < len(all_specs):
            sleep(plan.cooldown)
    return results


def selftest_response_law(
    stub_latency_ms: float,
    users: int,
    think_time: float = 1.0,
    *,
    duration: float = 60.0,
    seed: int = 1,
    tolerance: float = 0.10,
) -> bool:
    """Closed-loop sanity check: measured throughput vs N / (think + latency)."""
    spec = WorkloadSpec(
        pattern=Pattern.UNIFORM,
        users=users,
        duration=duration,
        target=f"stub:fixed?latency_ms={stub_latency_ms:g}",
        think_time=think_time,
        seed=seed,
        warmup_fraction=0.0,
    )
    samples = run_workload(spec)
    report, _ = measure_samples(spec, samples)
    predicted = users / (think_time + stub_latency_ms / 1000.0)
    return abs(report.throughput - predicted) <= tolerance * predicted
