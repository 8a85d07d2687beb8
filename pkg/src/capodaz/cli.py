"""Command-line entry point.

Exit codes: 0 success, 1 domain error (deny, invalid token, policy violation,
unreachable target), 2 usage error. Diagnostics go to stderr; data goes to
stdout or --out files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import bench, codec, policy, registrar as registrar_mod, service, tokens
from .bench.report import IoFailure
from .config import ConfigError, load_config, render_config

_DOMAIN_ERRORS = (
    tokens.TokenError,
    policy.PolicyError,
    registrar_mod.RegistrarError,
    bench.BenchError,
    IoFailure,
    ConfigError,
    service.ServiceError,
    OSError,
)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # `capodaz bench --pattern ...` is shorthand for `capodaz bench run ...`
    if argv[:1] == ["bench"] and (len(argv) == 1 or argv[1].startswith("-")):
        argv.insert(1, "run")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capodaz")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("serve", help="run the authorization/resource service")
    p.add_argument("--config", help="config file path")
    p.add_argument("--role", help="resource-server|proxy-resource-server|authorization-server|combined")
    p.add_argument("--listen", help="host:port (overrides listen_address)")
    p.add_argument("--print-config", action="store_true", help="print effective config and exit")
    p.add_argument("--run-seconds", type=float, default=0.0, help="stop after N seconds (0 = run until interrupted)")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="run load workloads")
    bench_sub = p.add_subparsers(dest="bench_mode")

    run_p = bench_sub.add_parser("run", help="run a single workload")
    run_p.add_argument("--pattern", required=True, choices=[m.value for m in bench.Pattern])
    run_p.add_argument("--users", type=int, required=True)
    run_p.add_argument("--duration", type=float, default=60.0)
    run_p.add_argument("--lambda", dest="lam", type=float, help="per-user events/second (poisson)")
    run_p.add_argument("--think", type=float, default=1.0, help="think time seconds (uniform)")
    run_p.add_argument("--cap", type=float, default=1000.0, help="per-user rate cap (binomial)")
    run_p.add_argument("--seed", type=int, default=bench.DEFAULT_SEED)
    run_p.add_argument("--target", required=True, help="http(s) URL, stub:..., or inproc:<config>")
    run_p.add_argument("--timeout", type=float, default=10.0)
    run_p.add_argument("--warmup", type=float, default=0.05)
    run_p.add_argument("--method", default="GET")
    run_p.add_argument("--path", default="/")
    run_p.add_argument("--bearer", help="bearer token header value for the request template")
    run_p.add_argument("--out", help="output directory for report/plot files")
    run_p.add_argument("--save-samples", action="store_true")
    run_p.set_defaults(func=_cmd_bench_run)

    rounds_p = bench_sub.add_parser("rounds", help="run a multi-round plan")
    rounds_p.add_argument("--plan", help="plan file (defaults to the stock 14-cell plan)")
    rounds_p.add_argument("--target", help="override the plan's target")
    rounds_p.add_argument("--duration", type=float, help="override duration for the stock plan")
    rounds_p.add_argument("--seed", type=int, default=bench.DEFAULT_SEED)
    rounds_p.add_argument("--out", required=True)
    rounds_p.set_defaults(func=_cmd_bench_rounds)

    p = sub.add_parser("token-issue", help="issue a capability token")
    p.add_argument("--key", required=True, help="issuer key JSON file")
    p.add_argument("--format", choices=["jwt", "cwt"], default="cwt")
    p.add_argument("--aud", required=True)
    p.add_argument("--scope", default="read", help="comma-separated scope list")
    p.add_argument("--client-id", required=True)
    p.add_argument("--jti", help="token id (default: random)")
    p.add_argument("--ttl", type=int, default=tokens.DEFAULT_TOKEN_TTL)
    p.add_argument("--user-name")
    p.add_argument("--authorities")
    p.add_argument("--now", type=int, help="issuance time (default: wall clock)")
    p.set_defaults(func=_cmd_token_issue)

    p = sub.add_parser("token-verify", help="verify a capability token")
    p.add_argument("--key", required=True)
    p.add_argument("--token", help="token text (JWT compact or base64url CWT)")
    p.add_argument("--token-file", help="read token text from file ('-' = stdin)")
    p.add_argument("--now", type=int, help="verification time (default: wall clock)")
    p.set_defaults(func=_cmd_token_verify)

    p = sub.add_parser("token-revoke", help="revoke a token in a registrar log")
    p.add_argument("--log", required=True, help="registrar operation-log file")
    p.add_argument("--jti", required=True)
    p.set_defaults(func=_cmd_token_revoke)

    p = sub.add_parser("policy-check", help="validate a policy document")
    p.add_argument("--file", required=True)
    p.set_defaults(func=_cmd_policy_check)

    p = sub.add_parser("report", help="re-aggregate saved samples into report files")
    p.add_argument("--samples", required=True, nargs="+", help="samples .jsonl files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def _cmd_serve(args: argparse.Namespace) -> int:
    overrides = {}
    if args.role:
        overrides["role"] = args.role
    if args.listen:
        overrides["listen_address"] = args.listen
    cfg = load_config(args.config, overrides)
    if args.print_config:
        sys.stdout.write(render_config(cfg))
        return 0
    handle = service.serve(cfg)
    print(f"listening on {handle.base_url} role={cfg.role.value}", file=sys.stderr)
    try:
        if args.run_seconds > 0:
            time.sleep(args.run_seconds)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()
    return 0


def _bench_template(args: argparse.Namespace) -> bench.RequestTemplate:
    headers: tuple[tuple[str, str], ...] = ()
    if args.bearer:
        headers = (("Authorization", f"Bearer {args.bearer}"),)
    return bench.RequestTemplate(method=args.method, path=args.path, headers=headers)


def _cmd_bench_run(args: argparse.Namespace) -> int:
    spec = bench.WorkloadSpec(
        pattern=bench.Pattern(args.pattern),
        users=args.users,
        duration=args.duration,
        target=args.target,
        think_time=args.think,
        lam=args.lam,
        per_user_rate_cap=args.cap,
        request_timeout=args.timeout,
        seed=args.seed,
        warmup_fraction=args.warmup,
        template=_bench_template(args),
    )
    spec.validate()
    samples = bench.run_workload(spec)
    report, wall = bench.measure_samples(spec, samples)
    if args.out:
        written = bench.export_report([(spec, report)], args.out)
        if args.save_samples:
            written.append(bench.write_samples(spec, samples, Path(args.out) / f"samples_{spec.label}.jsonl"))
        for path in written:
            print(path)
    else:
        print(json.dumps(_report_doc(spec, report, wall), indent=2))
    print(
        f"{spec.label}: {report.success_count} ok / {report.failure_count} failed, "
        f"{report.throughput:.2f} req/s, mean {report.mean_latency:.2f} ms",
        file=sys.stderr,
    )
    return 0


def _cmd_bench_rounds(args: argparse.Namespace) -> int:
    if args.plan:
        plan = bench.parse_plan_file(Path(args.plan).read_text(encoding="utf-8"))
    else:
        plan = bench.default_plan(
            args.target or "stub:fixed?latency_ms=1",
            duration=args.duration if args.duration is not None else 60.0,
            seed=args.seed,
        )
    if args.target:
        plan = bench.with_target(plan, args.target)
    results = bench.run_rounds(plan)
    for path in bench.export_report(results, args.out):
        print(path)
    return 0


def _report_doc(spec: bench.WorkloadSpec, report: bench.MetricsReport, wall: float) -> dict:
    doc = {"label": spec.label, "wall_duration": wall}
    for name in bench.MetricsReport.FIELD_NAMES:
        doc[name] = getattr(report, name)
    return doc


def _load_key(path: str) -> tokens.CoseKey:
    return service.load_issuer_key(path)


def _cmd_token_issue(args: argparse.Namespace) -> int:
    key = _load_key(args.key)
    now = args.now if args.now is not None else int(time.time())
    claims = tokens.ClaimSet(
        aud=args.aud,
        scope=[s for s in args.scope.split(",") if s],
        exp=now + args.ttl,
        jti=args.jti or tokens.new_jti(),
        client_id=args.client_id,
        user_name=args.user_name,
        iat=now,
        authorities=args.authorities,
    )
    if args.format == "jwt":
        token = tokens.issue_jwt(claims, key, now)
        print(token.wire.decode("ascii"))
    else:
        token = tokens.issue_cwt(claims, None, key, now)
        print(codec.base64url_encode(token.wire))
    print(f"jti={claims.jti} exp={claims.exp}", file=sys.stderr)
    return 0


def _read_token_text(args: argparse.Namespace) -> str:
    if args.token:
        return args.token.strip()
    if args.token_file == "-":
        return sys.stdin.read().strip()
    if args.token_file:
        return Path(args.token_file).read_text(encoding="utf-8").strip()
    raise tokens.MalformedToken("one of --token/--token-file is required")


def _cmd_token_verify(args: argparse.Namespace) -> int:
    key = _load_key(args.key)
    now = args.now if args.now is not None else int(time.time())
    text = _read_token_text(args)
    wire = text.encode("ascii") if "." in text else codec.base64url_decode(text)
    try:
        claims = tokens.verify_token(wire, key, now)
    except tokens.Expired:
        print("expired", file=sys.stderr)
        return 1
    except tokens.TokenError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    print(codec.render_claims_text(claims.to_map()))
    return 0


def _cmd_token_revoke(args: argparse.Namespace) -> int:
    reg = registrar_mod.Registrar.replay(args.log)
    reg.revoke(args.jti)
    print(f"revoked {args.jti}", file=sys.stderr)
    return 0


def _cmd_policy_check(args: argparse.Namespace) -> int:
    document = Path(args.file).read_bytes()
    policy_set = policy.pap_load(document)
    rules = sum(len(p.rules) for p in policy_set.policies)
    print(f"ok: {len(policy_set.policies)} policies, {rules} rules")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    results = []
    for sample_file in args.samples:
        spec, samples = bench.read_samples(sample_file)
        report, _ = bench.measure_samples(spec, samples)
        results.append((spec, report))
    for path in bench.export_report(results, args.out):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
