"""Report emission: CSV metric table, per-figure plot data, raw sample logs.

Plot-data files are whitespace-separated numeric columns with '#' comment
headers; identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from enum import Enum
from pathlib import Path

from .metrics import MetricsReport, Sample
from .workload import Pattern, RequestTemplate, WorkloadSpec


class ReportFormat(Enum):
    CSV = "csv"
    PLOT_DATA = "plot-data"


class IoFailure(Exception):
    pass


CSV_COLUMNS = ("pattern", "users", "lambda", "duration", "seed") + MetricsReport.FIELD_NAMES


def _num(value: float | int) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def export_report(
    results: list[tuple[WorkloadSpec, MetricsReport]],
    out_dir: str | Path,
    formats: set[ReportFormat] = frozenset({ReportFormat.CSV, ReportFormat.PLOT_DATA}),
) -> list[Path]:
    """Write report.csv and/or the plot-data series; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        if ReportFormat.CSV in formats:
            written.append(_write_csv(results, out / "report.csv"))
        if ReportFormat.PLOT_DATA in formats:
            written.extend(_write_plot_data(results, out))
        return written
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _write_csv(results, path: Path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for spec, report in results:
        row = [
            spec.pattern.value,
            str(spec.users),
            f"{spec.lam:g}" if spec.lam is not None else "",
            _num(spec.duration),
            str(spec.seed),
        ]
        row += [_num(getattr(report, name)) for name in MetricsReport.FIELD_NAMES]
        writer.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _write_plot_data(results, out: Path) -> list[Path]:
    written: list[Path] = []

    # Per-run CDF and latency histogram series.
    for spec, report in results:
        cdf_path = out / f"cdf_{spec.label}.dat"
        lines = [f"# time-to-success CDF: {spec.label}", "# edge_s cumulative_fraction"]
        lines += [f"{_num(edge)} {_num(frac)}" for edge, frac in report.time_to_success_cdf]
        cdf_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(cdf_path)

        hist_path = out / f"hist_{spec.label}.dat"
        lines = [f"# latency histogram: {spec.label}", "# bucket_edge_s fraction_of_successes"]
        prev = 0.0
        for edge, cum in report.time_to_success_cdf:
            lines.append(f"{_num(edge)} {_num(cum - prev)}")
            prev = cum
        hist_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(hist_path)

    # Throughput vs user population, one column per closed-loop round.
    by_users: dict[int, dict[str, float]] = {}
    for spec, report in results:
        if spec.pattern in (Pattern.BINOMIAL, Pattern.UNIFORM):
            by_users.setdefault(spec.users, {})[spec.pattern.value] = report.throughput
    if by_users:
        path = out / "throughput_vs_users.dat"
        lines = ["# throughput vs concurrent users", "# users binomial_rps uniform_rps"]
        for users in sorted(by_users):
            row = by_users[users]
            lines.append(
                f"{users} {_num(row.get('binomial', 0.0))} {_num(row.get('uniform', 0.0))}"
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)

    # Poisson throughput per lambda against the matching uniform population.
    poisson = [(spec, report) for spec, report in results if spec.pattern is Pattern.POISSON]
    if poisson:
        uniform_by_users = {
            spec.users: report.throughput
            for spec, report in results
            if spec.pattern is Pattern.UNIFORM
        }
        path = out / "throughput_vs_lambda.dat"
        lines = ["# poisson throughput per lambda vs uniform", "# lambda poisson_rps uniform_rps"]
        for spec, report in poisson:
            uniform_rps = uniform_by_users.get(spec.users, 0.0)
            lines.append(f"{_num(spec.lam)} {_num(report.throughput)} {_num(uniform_rps)}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written


def write_samples(spec: WorkloadSpec, samples: list[Sample], path: str | Path) -> Path:
    """Raw sample log: a spec header line, then one JSON object per sample."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"spec": _spec_doc(spec)}) + "\n")
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "send_time_ns": s.send_time_ns,
                        "latency_ns": s.latency_ns,
                        "status_kind": s.status_kind,
                        "status_code": s.status_code,
                        "request_bytes": s.request_bytes,
                        "response_bytes": s.response_bytes,
                        "user_index": s.user_index,
                    }
                )
                + "\n"
            )
    return path


def read_samples(path: str | Path) -> tuple[WorkloadSpec, list[Sample]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        spec = _spec_from_doc(header["spec"])
        samples = [Sample(**json.loads(line)) for line in fh if line.strip()]
    return spec, samples


def _spec_doc(spec: WorkloadSpec) -> dict:
    return {
        "pattern": spec.pattern.value,
        "users": spec.users,
        "duration": spec.duration,
        "target": spec.target,
        "think_time": spec.think_time,
        "lambda": spec.lam,
        "per_user_rate_cap": spec.per_user_rate_cap,
        "request_timeout": spec.request_timeout,
        "seed": spec.seed,
        "warmup_fraction": spec.warmup_fraction,
        "label": spec.label,
        "method": spec.template.method,
        "path": spec.template.path,
    }


def _spec_from_doc(doc: dict) -> WorkloadSpec:
    return WorkloadSpec(
        pattern=Pattern(doc["pattern"]),
        users=doc["users"],
        duration=doc["duration"],
        target=doc.get("target", "stub:fixed"),
        think_time=doc.get("think_time", 1.0),
        lam=doc.get("lambda"),
        per_user_rate_cap=doc.get("per_user_rate_cap", 1000.0),
        request_timeout=doc.get("request_timeout", 10.0),
        seed=doc.get("seed", 0),
        warmup_fraction=doc.get("warmup_fraction", 0.05),
        template=RequestTemplate(method=doc.get("method", "GET"), path=doc.get("path", "/")),
        label=doc.get("label", ""),
    )
