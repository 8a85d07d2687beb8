"""Load-benchmark harness: workload generation, metric aggregation, report emission."""

from .engine import (
    TargetResolutionFailure,
    WallClockEngine,
    measure_samples,
    next_arrival_delay,
    run_rounds,
    run_simulated,
    run_workload,
    selftest_response_law,
    user_rng,
    wall_duration_of,
)
from .metrics import (
    BUCKET_EDGES,
    STATUS_CONN_ERROR,
    STATUS_HTTP_ERROR,
    STATUS_SUCCESS,
    STATUS_TIMEOUT,
    MetricsReport,
    Sample,
    aggregate,
    bucket_edge,
)
from .report import ReportFormat, export_report, read_samples, write_samples
from .targets import (
    CapacityStub,
    CountingTarget,
    FixedLatencyStub,
    HttpTargetSpec,
    InProcessTarget,
    make_target,
)
from .workload import (
    DEFAULT_LAMBDAS,
    DEFAULT_SEED,
    DEFAULT_USER_SETS,
    BenchError,
    Pattern,
    RequestTemplate,
    RoundPlan,
    WorkloadSpec,
    default_plan,
    parse_plan_file,
    with_target,
)

__all__ = [
    "BUCKET_EDGES",
    "BenchError",
    "CapacityStub",
    "CountingTarget",
    "DEFAULT_LAMBDAS",
    "DEFAULT_SEED",
    "DEFAULT_USER_SETS",
    "FixedLatencyStub",
    "HttpTargetSpec",
    "InProcessTarget",
    "MetricsReport",
    "Pattern",
    "ReportFormat",
    "RequestTemplate",
    "RoundPlan",
    "STATUS_CONN_ERROR",
    "STATUS_HTTP_ERROR",
    "STATUS_SUCCESS",
    "STATUS_TIMEOUT",
    "Sample",
    "TargetResolutionFailure",
    "WallClockEngine",
    "WorkloadSpec",
    "aggregate",
    "bucket_edge",
    "default_plan",
    "export_report",
    "make_target",
    "measure_samples",
    "next_arrival_delay",
    "parse_plan_file",
    "read_samples",
    "run_rounds",
    "run_simulated",
    "run_workload",
    "selftest_response_law",
    "user_rng",
    "wall_duration_of",
    "with_target",
    "write_samples",
]
