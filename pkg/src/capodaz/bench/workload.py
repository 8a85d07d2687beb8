"""Workload specifications and the three-round plan."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator


class BenchError(Exception):
    pass


class Pattern(Enum):
    BINOMIAL = "binomial"
    UNIFORM = "uniform"
    POISSON = "poisson"


DEFAULT_USER_SETS = (250, 500, 1000, 2000, 4000)
DEFAULT_LAMBDAS = (1.0, 0.2, 0.0022, 0.0011)
DEFAULT_SEED = 7


@dataclass(frozen=True)
class RequestTemplate:
    method: str = "GET"
    path: str = "/"
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""


@dataclass
class WorkloadSpec:
    pattern: Pattern
    users: int
    duration: float
    target: str = "stub:fixed?latency_ms=1"
    think_time: float = 1.0  # uniform pattern: delay between response and next request
    lam: float | None = None  # poisson pattern: events/second per user
    per_user_rate_cap: float = 1000.0  # binomial pattern: pacing ceiling per user
    request_timeout: float = 10.0
    seed: int = DEFAULT_SEED
    warmup_fraction: float = 0.05  # leading fraction of duration excluded from aggregation
    template: RequestTemplate = field(default_factory=RequestTemplate)
    label: str = ""

    def __post_init__(self) -> None:
        if not self.label:
            if self.pattern is Pattern.POISSON:
                self.label = f"poisson_l{self.lam:g}" if self.lam else "poisson"
            else:
                self.label = f"{self.pattern.value}_u{self.users}"

    def validate(self) -> None:
        if self.users < 1:
            raise BenchError("users must be at least 1")
        if self.duration < 0:
            raise BenchError("duration must be non-negative")
        if self.pattern is Pattern.POISSON and (self.lam is None or self.lam <= 0):
            raise BenchError("poisson pattern requires lambda > 0")
        if self.pattern is Pattern.BINOMIAL and self.per_user_rate_cap <= 0:
            raise BenchError("binomial pattern requires a positive per-user rate cap")
        if self.pattern is Pattern.UNIFORM and self.think_time < 0:
            raise BenchError("uniform pattern requires non-negative think time")
        if self.request_timeout <= 0:
            raise BenchError("request_timeout must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise BenchError("warmup_fraction must be in [0, 1)")


@dataclass
class RoundPlan:
    """Ordered rounds, each an ordered list of workload specs."""

    rounds: list[tuple[str, list[WorkloadSpec]]]
    cooldown: float = 5.0

    def specs(self) -> Iterator[WorkloadSpec]:
        for _, specs in self.rounds:
            yield from specs


def default_plan(
    target: str,
    *,
    duration: float = 60.0,
    seed: int = DEFAULT_SEED,
    template: RequestTemplate | None = None,
    request_timeout: float = 10.0,
    warmup_fraction: float = 0.05,
    cooldown: float = 5.0,
) -> RoundPlan:
    """The stock three-round plan: binomial and uniform sweeps over the user
    sets, then poisson at 1000 users across the lambda set (14 cells)."""
    template = template if template is not None else RequestTemplate()

    def spec(pattern: Pattern, users: int, lam: float | None = None) -> WorkloadSpec:
        return WorkloadSpec(
            pattern=pattern,
            users=users,
            duration=duration,
            target=target,
            lam=lam,
            request_timeout=request_timeout,
            seed=seed,
            warmup_fraction=warmup_fraction,
            template=template,
        )

    return RoundPlan(
        rounds=[
            ("binomial", [spec(Pattern.BINOMIAL, n) for n in DEFAULT_USER_SETS]),
            ("uniform", [spec(Pattern.UNIFORM, n) for n in DEFAULT_USER_SETS]),
            ("poisson", [spec(Pattern.POISSON, 1000, lam) for lam in DEFAULT_LAMBDAS]),
        ],
        cooldown=cooldown,
    )


def parse_plan_file(text: str) -> RoundPlan:
    """Plan file format: global `key = value` lines plus one `round` line per round.

        target = stub:fixed?latency_ms=25
        duration = 60
        seed = 7
        cooldown = 5
        round binomial users=250,500,1000,2000,4000
        round uniform users=250,500,1000,2000,4000 think=1
        round poisson users=1000 lambda=1,0.2,0.0022,0.0011
    """
    globals_: dict[str, str] = {}
    round_lines: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("round "):
            round_lines.append((lineno, line[len("round "):]))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BenchError(f"plan line {lineno}: expected `key = value` or `round ...`")
        globals_[key.strip()] = value.strip()
    if not round_lines:
        raise BenchError("plan file declares no rounds")

    target = globals_.get("target", "stub:fixed?latency_ms=1")
    duration = float(globals_.get("duration", "60"))
    seed = int(globals_.get("seed", str(DEFAULT_SEED)))
    timeout = float(globals_.get("timeout", "10"))
    warmup = float(globals_.get("warmup", "0.05"))
    cooldown = float(globals_.get("cooldown", "5"))

    rounds: list[tuple[str, list[WorkloadSpec]]] = []
    for lineno, body in round_lines:
        parts = body.split()
        try:
            pattern = Pattern(parts[0])
        except (ValueError, IndexError):
            raise BenchError(f"plan line {lineno}: unknown pattern {body.split()[:1]!r}") from None
        options: dict[str, str] = {}
        for part in parts[1:]:
            key, sep, value = part.partition("=")
            if not sep:
                raise BenchError(f"plan line {lineno}: expected key=value, got {part!r}")
            options[key] = value
        users_list = [int(u) for u in options.get("users", "1000").split(",")]
        specs: list[WorkloadSpec] = []
        if pattern is Pattern.POISSON:
            lambdas = [float(l) for l in options.get("lambda", "1").split(",")]
            for users in users_list:
                for lam in lambdas:
                    specs.append(
                        WorkloadSpec(
                            pattern=pattern,
                            users=users,
                            duration=duration,
                            target=target,
                            lam=lam,
                            request_timeout=timeout,
                            seed=seed,
                            warmup_fraction=warmup,
                        )
                    )
        else:
            think = float(options.get("think", "1"))
            cap = float(options.get("cap", "1000"))
            for users in users_list:
                specs.append(
                    WorkloadSpec(
                        pattern=pattern,
                        users=users,
                        duration=duration,
                        target=target,
                        think_time=think,
                        per_user_rate_cap=cap,
                        request_timeout=timeout,
                        seed=seed,
                        warmup_fraction=warmup,
                    )
                )
        for spec in specs:
            spec.validate()
        rounds.append((pattern.value, specs))
    return RoundPlan(rounds=rounds, cooldown=cooldown)


def with_target(plan: RoundPlan, target: str) -> RoundPlan:
    """Copy of the plan with every spec pointed at a different target."""
    return RoundPlan(
        rounds=[
            (name, [replace(s, template=s.template, target=target) for s in specs])
            for name, specs in plan.rounds
        ],
        cooldown=plan.cooldown,
    )
