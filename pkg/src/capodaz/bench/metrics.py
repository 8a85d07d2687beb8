"""Raw request observations and the aggregated metric suite.

Latency histograms use a 1-2.5-5 log ladder of bucket upper edges; the mode
bucket ("most appearances") and the time-to-success CDF share the same edges.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field

STATUS_SUCCESS = "success"
STATUS_HTTP_ERROR = "http_error"
STATUS_TIMEOUT = "timeout"
STATUS_CONN_ERROR = "conn_error"

# Bucket upper edges in seconds: {1, 2.5, 5} x 10^k for k in [-4, 2].
BUCKET_EDGES: tuple[float, ...] = tuple(
    m * (10.0 ** k) for k in range(-4, 3) for m in (1.0, 2.5, 5.0)
)


@dataclass(frozen=True)
class Sample:
    """One issued request: one sample, whatever its fate."""

    send_time_ns: int
    latency_ns: int
    status_kind: str
    status_code: int = 0
    request_bytes: int = 0
    response_bytes: int = 0
    user_index: int = 0

    @property
    def success(self) -> bool:
        return self.status_kind == STATUS_SUCCESS

    @property
    def completion_ns(self) -> int:
        return self.send_time_ns + self.latency_ns


def bucket_edge(latency_s: float) -> float:
    """Upper edge of the half-open bucket [previous edge, edge) holding the latency."""
    idx = bisect_right(BUCKET_EDGES, latency_s)
    if idx >= len(BUCKET_EDGES):
        idx = len(BUCKET_EDGES) - 1
    return BUCKET_EDGES[idx]


@dataclass
class MetricsReport:
    mean_latency: float = 0.0  # ms
    max_latency: float = 0.0  # ms
    latency_stddev: float = 0.0  # ms, population
    mode_bucket: float = 0.0  # seconds
    throughput: float = 0.0  # successful requests / second
    success_count: int = 0
    failure_count: int = 0
    success_fraction: float = 0.0
    load_kbps: float = 0.0  # (request+response bytes) / duration / 1000
    time_to_success_cdf: list[tuple[float, float]] = field(default_factory=list)

    FIELD_NAMES = (
        "mean_latency",
        "max_latency",
        "latency_stddev",
        "mode_bucket",
        "throughput",
        "success_count",
        "failure_count",
        "success_fraction",
        "load_kbps",
    )


def aggregate(samples: list[Sample], wall_duration: float) -> MetricsReport:
    """Fold samples into the metric suite; empty input yields a zeroed report."""
    total = len(samples)
    successes = [s for s in samples if s.success]
    n = len(successes)
    report = MetricsReport(
        success_count=n,
        failure_count=total - n,
        success_fraction=(n / total) if total else 0.0,
    )
    if wall_duration > 0:
        report.throughput = n / wall_duration
        byte_total = sum(s.request_bytes + s.response_bytes for s in samples)
        report.load_kbps = byte_total / wall_duration / 1000.0

    counts = [0] * len(BUCKET_EDGES)
    if n:
        latencies_ms = [s.latency_ns / 1e6 for s in successes]
        mean = sum(latencies_ms) / n
        report.mean_latency = mean
        report.max_latency = max(latencies_ms)
        report.latency_stddev = math.sqrt(
            sum((x - mean) ** 2 for x in latencies_ms) / n
        )
        for s in successes:
            idx = bisect_right(BUCKET_EDGES, s.latency_ns / 1e9)
            counts[min(idx, len(BUCKET_EDGES) - 1)] += 1
        report.mode_bucket = BUCKET_EDGES[counts.index(max(counts))]

    cumulative = 0
    cdf = []
    for edge, count in zip(BUCKET_EDGES, counts):
        cumulative += count
        cdf.append((edge, (cumulative / n) if n else 0.0))
    report.time_to_success_cdf = cdf
    return report
