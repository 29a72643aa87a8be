"""Command line: profile, plan, simulate and run, plus demo/trace helpers.

Exit codes: 0 ok, 2 usage or input error, 3 network error, 4 internal
invariant violation.  ``HP_SEED`` overrides every seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import cost, netsim
from .engine import CombineError, EngineError, load_tensor, run_model, save_tensor
from .graph import ModelError, load_model, save_model
from .models import DEMO_SEC_PER_UNIT, DEMO_SERVER_SPEEDUP, demo_model
from .report import Report, csv_text
from .runtime.live import InferenceError, ProtocolError, RobotEndpoint, ServerEndpoint
from .runtime.sim import SimError, simulate_run
from .runtime.wire import WireError
from .scheduler import (
    DEConfig, PlanError, build_planbook, load_planbook, parse_buckets, plan_violations, save_planbook,
)

EXIT_OK, EXIT_INPUT, EXIT_NETWORK, EXIT_INVARIANT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _seed(value: int) -> int:
    env = os.environ.get("HP_SEED")
    return int(env) if env not in (None, "") else value


def _hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _de_config(args) -> DEConfig:
    return DEConfig(population=args.population, generations=args.generations,
                    crossover=args.cr, weight=args.f, seed=_seed(args.seed))


def _power(args) -> cost.PowerStates:
    power = cost.PowerStates.from_file(args.power) if getattr(args, "power", None) else cost.PowerStates()
    overrides = {k: getattr(args, f"p_{k}") for k in ("inference", "transmission", "standby", "nic_idle")
                 if getattr(args, f"p_{k}", None) is not None}
    if overrides:
        power = cost.PowerStates(**{**vars(power), **overrides})
    return power


def _full_profile(paths: list[str]) -> cost.CostProfile:
    return cost.merge_profiles([cost.load_profile(p) for p in paths])


# --------------------------------------------------------------------------
# Commands

def cmd_demo(args) -> int:
    graph = demo_model(seed=_seed(args.seed))
    save_model(graph, args.out)
    print(f"wrote {args.out} ({len(graph)} layers, checksum {graph.checksum[:12]})")
    return EXIT_OK


def cmd_trace(args) -> int:
    bps = args.bps * 1e6 if args.bps is not None else None
    trace = netsim.synth_trace(args.kind, args.duration, seed=_seed(args.seed), bps=bps)
    netsim.save_trace(trace, args.out)
    print(f"wrote {args.out}: {len(trace)} samples, mean {trace.mean() / 1e6:.2f} Mbps")
    return EXIT_OK


def cmd_profile(args) -> int:
    graph = load_model(args.model, group=args.group)
    if args.synthetic:
        robot = cost.synthetic_op_times(graph, per_unit=args.per_unit)
        server = cost.synthetic_op_times(graph, per_unit=args.per_unit, speedup=args.speedup)
    else:
        measured = cost.profile_model(graph, repetitions=args.reps, seed=_seed(args.seed))
        robot = server = measured
    if args.role == "both":
        prof = cost.make_profile(graph, robot, server, latency=args.latency, header_bytes=args.header_bytes)
        cost.save_profile(prof, args.out)
    else:
        times = robot if args.role == "robot" else server
        part = cost.PartialProfile({args.role: tuple(times)}, {
            "model_checksum": graph.checksum, "raw_input_bytes": graph.raw_input_spec.nbytes,
            "latency": args.latency, "header_bytes": args.header_bytes})
        cost.save_profile(part, args.out, graph)
    print(f"wrote {args.out} ({args.role}, {'synthetic' if args.synthetic else f'median of {args.reps}'})")
    return EXIT_OK


def cmd_plan(args) -> int:
    graph = load_model(args.model, group=args.group)
    prof = _full_profile(args.profile)
    prof = cost.make_profile(graph, prof.robot_op_time, prof.server_op_time,
                             latency=prof.latency, header_bytes=prof.header_bytes)
    buckets = parse_buckets(args.buckets)
    book = build_planbook(graph, prof, buckets, _de_config(args), exhaustive=args.exhaustive,
                          power=_power(args))
    for b, plan in zip(book.buckets, book.plans):
        problems = plan_violations(plan, graph)
        if problems:
            print(f"plan for {b:g} bps violates: {problems}", file=sys.stderr)
            return EXIT_INVARIANT
        print(f"{b / 1e6:10.3f} Mbps  objective {plan.objective * 1e3:9.3f} ms  "
              f"robot share {plan.robot_share():.2f}  transfers {len(plan.transfers)}  {','.join(plan.flags)}")
    save_planbook(book, args.out)
    print(f"wrote {args.out} checksum {book.checksum[:12]}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    graph = load_model(args.model, group=args.group)
    book = load_planbook(args.planbook)
    if book.model_checksum != graph.checksum:
        raise UsageError("plan book was built for a different model (checksum mismatch)")
    trace = netsim.load_trace(args.trace)
    n = args.reps if args.reps else max(int((trace.end - args.period) // args.period), 1)
    try:
        result = simulate_run(graph, book, trace, n, args.period, seed=_seed(args.seed),
                              power=_power(args), check_outputs=not args.no_check)
    except netsim.TraceExhausted as exc:
        raise UsageError(f"trace too short: {exc}") from None
    report = Report(result.rows)
    print(report.table())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text(result.rows))
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.log) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    host, port = _hostport(args.listen if args.role == "server" else args.connect)
    if args.role == "server":
        return _run_server(args, host, port)
    return _run_robot(args, host, port)


def _run_server(args, host: str, port: int) -> int:
    if args.profile:
        prof = cost.load_profile(args.profile[0])
        times = prof.server_op_time if isinstance(prof, cost.CostProfile) else prof.op_time.get("server")
        if times is None:
            raise UsageError("server profile file has no server column")
        profiler = lambda graph: times  # noqa: E731
    else:
        profiler = lambda graph: cost.profile_model(graph, repetitions=args.reps)  # noqa: E731
    server = ServerEndpoint(profiler, timeout=args.timeout)
    bound = server.bind(host, port)
    print(f"listening on {host}:{bound}", flush=True)
    try:
        server.serve(max_connections=args.max_connections)
    finally:
        server.close()
    if server.stats.errors:
        for e in server.stats.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_NETWORK
    return EXIT_OK


def _run_robot(args, host: str, port: int) -> int:
    graph = load_model(args.model, group=args.group)
    book = None
    if args.planbook and os.path.exists(args.planbook):
        book = load_planbook(args.planbook)
    robot_times = None
    if book is None:
        if not args.profile:
            raise UsageError("robot needs --planbook or --profile")
        prof = cost.load_profile(args.profile[0])
        robot_times = prof.robot_op_time if isinstance(prof, cost.CostProfile) else prof.op_time.get("robot")
        if robot_times is None:
            raise UsageError("robot profile file has no robot column")
    if args.input:
        _, x = load_tensor(args.input)
    else:
        x = np.random.default_rng(_seed(args.seed)).standard_normal(graph.raw_input_spec.dims).astype(np.float32)
    trace = netsim.load_trace(args.trace) if args.trace else None
    robot = RobotEndpoint(graph, robot_times, book, buckets=parse_buckets(args.buckets),
                          de=_de_config(args), timeout=args.timeout)
    robot.connect(host, port)
    try:
        if args.planbook and book is None:
            save_planbook(robot.planbook, args.planbook)
        t0 = time.monotonic()
        table = netsim.trace_predictions(trace) if trace else None
        for k in range(args.reps):
            if trace is not None:
                predicted = netsim.predict_at(trace, time.monotonic() - t0, table=table)
            else:
                predicted = args.bandwidth * 1e6 if args.bandwidth else None
            t = time.perf_counter()
            y = robot.infer(x, predicted_bps=predicted)
            ok = y.tobytes() == run_model(graph, x).tobytes() if args.verify else None
            print(f"inference {k}: {1e3 * (time.perf_counter() - t):.3f} ms"
                  + ("" if ok is None else f"  matches local: {ok}"), flush=True)
            if ok is False:
                return EXIT_INVARIANT
        if args.output:
            save_tensor(args.output, y, name="result")
    finally:
        robot.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opsplit", description="operator-level split inference")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp):
        sp.add_argument("--model", required=True)
        sp.add_argument("--group", type=int, default=1, help="merge g adjacent rows per operator")

    def de_args(sp):
        sp.add_argument("--buckets", default="10,30,50,70,90Mbps")
        sp.add_argument("--population", type=int, default=30)
        sp.add_argument("--generations", type=int, default=200)
        sp.add_argument("--cr", type=float, default=0.9)
        sp.add_argument("--f", type=float, default=0.8)
        sp.add_argument("--seed", type=int, default=0)

    def power_args(sp):
        sp.add_argument("--power", help="JSON file with inference/transmission/standby/nic_idle watts")
        for k in ("inference", "transmission", "standby", "nic_idle"):
            sp.add_argument(f"--p-{k.replace('_', '-')}", dest=f"p_{k}", type=float)

    sp = sub.add_parser("demo-model", help="write the built-in demo model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_demo)

    sp = sub.add_parser("trace", help="write a synthetic bandwidth trace")
    sp.add_argument("--kind", choices=("constant", "indoor_like", "outdoor_like"), required=True)
    sp.add_argument("--duration", type=float, default=60.0)
    sp.add_argument("--bps", type=float, help="Mbps for constant traces")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("profile", help="measure or synthesize per-operator times")
    model_args(sp)
    sp.add_argument("--role", choices=("robot", "server", "both"), default="both")
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--synthetic", action="store_true", help="deterministic cost table instead of timing")
    sp.add_argument("--per-unit", type=float, default=DEMO_SEC_PER_UNIT)
    sp.add_argument("--speedup", type=float, default=DEMO_SERVER_SPEEDUP)
    sp.add_argument("--latency", type=float, default=cost.DEFAULT_LATENCY)
    sp.add_argument("--header-bytes", type=int, default=cost.HEADER_BYTES)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("plan", help="build a plan book")
    model_args(sp)
    sp.add_argument("--profile", action="append", required=True, help="profile file (repeatable)")
    de_args(sp)
    power_args(sp)
    sp.add_argument("--exhaustive", action="store_true", help="enumerate instead of evolving")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run both endpoints over a simulated link")
    model_args(sp)
    sp.add_argument("--planbook", required=True)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--reps", type=int, default=0, help="inferences (default: fill the trace)")
    sp.add_argument("--period", type=float, default=0.5, help="seconds between inference starts")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv")
    sp.add_argument("--log")
    sp.add_argument("--no-check", action="store_true", help="skip comparing against local inference")
    power_args(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="live two-process execution")
    sp.add_argument("--role", choices=("robot", "server"), required=True)
    sp.add_argument("--listen", default="127.0.0.1:7878")
    sp.add_argument("--connect", default="127.0.0.1:7878")
    sp.add_argument("--model")
    sp.add_argument("--group", type=int, default=1)
    sp.add_argument("--planbook")
    sp.add_argument("--profile", action="append")
    sp.add_argument("--trace")
    sp.add_argument("--bandwidth", type=float, help="assumed Mbps when no trace is given")
    sp.add_argument("--timeout", type=float, default=30.0)
    sp.add_argument("--input")
    sp.add_argument("--output")
    sp.add_argument("--reps", type=int, default=1)
    sp.add_argument("--verify", action="store_true", help="compare each result with local inference")
    sp.add_argument("--max-connections", type=int)
    de_args(sp)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and args.role == "robot" and not args.model:
        print("error: --model is required for the robot", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (SimError, CombineError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ProtocolError, InferenceError, WireError, ConnectionError, TimeoutError) as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (UsageError, ModelError, EngineError, cost.ProfileError, PlanError, netsim.TraceError,
            FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
