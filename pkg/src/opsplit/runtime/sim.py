"""Both endpoints in one process on the discrete-event core.

Compute takes the profiled time in virtual seconds and transfers take the
time ``SimLink`` reports, so runs are exactly repeatable.  With an input
tensor the session also does the real tensor work and pushes real wire
frames between the two fragment stores; without one it is a pure timing
replay, which serves as an independent check of the scheduler's recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..cost import CostProfile, PowerStates, Timeline, energy_per_inference
from ..engine import Fragment, run_model
from ..graph import INPUT_ID, ModelGraph
from ..lop import Dependencies, span_mask
from ..netsim import BandwidthTrace, EventLoop, SimLink, trace_predictions
from ..scheduler import TO_ROBOT, TO_SERVER, PlanBook, SchedulePlan, best_cut_plan, cut_plan
from . import wire
from .program import ComputeTask, SendTask, role_program, run_ops
from .store import FragmentStore


class SimError(RuntimeError):
    """The simulated execution broke an invariant (deadlock, wrong result)."""


@dataclass(frozen=True)
class MessageRecord:
    direction: str
    kind: str
    layer: int
    start: int
    stop: int
    consumer: int | None
    wire_bytes: int


@dataclass
class SessionResult:
    start: float
    end: float
    t_robot: list[float]
    t_server: list[float]
    robot_compute: list[tuple[float, float]]
    robot_link: list[tuple[float, float]]
    compute_total: float
    transmit_total: float
    messages: list[MessageRecord]
    output: np.ndarray | None = None
    timeline: Timeline | None = None
    energy: float = 0.0

    @property
    def wall(self) -> float:
        return self.end - self.start

    @property
    def wire_bytes(self) -> int:
        return sum(m.wire_bytes for m in self.messages)


class _Device:
    def __init__(self, role: str, graph: ModelGraph, plan: SchedulePlan, start: float):
        prog = role_program(graph, plan, role)
        self.role = role
        self.tasks: list[ComputeTask] = list(prog.compute)
        self.sends: list[SendTask] = list(prog.sends)
        self.next_task = 0
        self.next_send = 0
        self.busy = False
        self.done_at: dict[int, float] = {}
        self.have: dict[int, int] = {}
        self.store = FragmentStore()
        self.start = start
        self.intervals: list[tuple[float, float]] = []


def run_session(
    graph: ModelGraph,
    plan: SchedulePlan,
    profile: CostProfile,
    link: SimLink,
    start: float = 0.0,
    x: np.ndarray | None = None,
    inference_id: int = 0,
    loop: EventLoop | None = None,
    power: PowerStates = PowerStates(),
    deps: Dependencies | None = None,
) -> SessionResult:
    """Execute one inference of ``plan`` starting at virtual time ``start``."""
    deps = deps or Dependencies(graph)
    loop = loop or EventLoop()
    loop.now = max(loop.now, start)
    robot = _Device("robot", graph, plan, start)
    server = _Device("server", graph, plan, start)
    robot.have[INPUT_ID] = graph.input.full_mask
    server.have[INPUT_ID] = 0
    if x is not None:
        robot.store.put(Fragment.whole(graph.input, np.asarray(x, dtype=np.float32)))
    peer = {"robot": server, "server": robot}
    op_time = {"robot": profile.robot_op_time, "server": profile.server_op_time}
    direction = {"robot": TO_SERVER, "server": TO_ROBOT}
    messages: list[MessageRecord] = []
    terminal_left = [sum(len(s.rows) for s in server.sends if s.terminal)]
    terminal_at = [start]
    link_busy: list[tuple[float, float]] = []

    def inputs_ready(dev: _Device, task: ComputeTask) -> bool:
        for p in deps.parents[task.layer]:
            need = deps.need(task.layer, p, task.mask)
            if need & ~dev.have.get(p, 0):
                return False
        return True

    def try_compute(dev: _Device) -> None:
        if dev.busy or dev.next_task >= len(dev.tasks):
            return
        task = dev.tasks[dev.next_task]
        if not inputs_ready(dev, task):
            return
        dev.busy = True
        t0 = loop.now
        t1 = t0 + task.mask.bit_count() * op_time[dev.role][task.layer]
        loop.log("compute", inference=inference_id, device=dev.role, layer=task.layer,
                 ops=_fmt_runs(task.runs()), end=t1)
        loop.at(t1, lambda: finish(dev, task, t0))

    def finish(dev: _Device, task: ComputeTask, t0: float) -> None:
        if x is not None:
            for a, b in task.runs():
                dev.store.put(run_ops(graph, task.layer, a, b, dev.store.get))
        dev.have[task.layer] = dev.have.get(task.layer, 0) | task.mask
        dev.done_at[task.layer] = loop.now
        dev.intervals.append((t0, loop.now))
        dev.busy = False
        dev.next_task += 1
        try_send(dev)
        try_compute(dev)

    def source_ready(dev: _Device, src: int) -> bool:
        return src == INPUT_ID or src in dev.done_at

    def try_send(dev: _Device) -> None:
        while dev.next_send < len(dev.sends):
            task = dev.sends[dev.next_send]
            t = task.transfer
            if not source_ready(dev, t.source):
                return
            dev.next_send += 1
            node = graph.node(t.source)
            kind = wire.MsgType.RESULT if task.terminal else wire.MsgType.FRAGMENT
            for lo, hi in task.rows:
                nbytes = node.slice_bytes(lo, hi) + profile.header_bytes
                frame_bytes = b""
                if x is not None:
                    frag = dev.store.get(t.source, lo, hi)
                    frame_bytes = wire.encode(wire.fragment_frame(kind, inference_id, t.source, lo, hi, frag.data))
                send_at = loop.now
                arrive = link.transfer(direction[dev.role], nbytes, send_at)
                s0, s1 = link.busy[-1][1:]
                link_busy.append((s0, s1))
                messages.append(MessageRecord(t.direction, kind.name, t.source, lo, hi, t.layer,
                                              len(frame_bytes) or nbytes))
                loop.log("send", inference=inference_id, dir=t.direction, type=kind.name,
                         layer=t.source, rows=f"{lo}:{hi}", bytes=nbytes, start=s0, arrive=arrive)
                ops = node.ops_covering(lo, hi)
                loop.at(arrive, lambda d=peer[dev.role], f=frame_bytes, s=t.source, o=ops, k=kind:
                        deliver(d, f, s, o, k))

    def deliver(dev: _Device, frame_bytes: bytes, src: int, ops: tuple[int, int], kind) -> None:
        if frame_bytes:
            frame = wire.decode(frame_bytes)
            node = graph.node(frame.source_layer)
            dev.store.put(Fragment(node.id, node.axis, frame.range_start, frame.range_end,
                                   node.axis_len, frame.tensor()))
        dev.have[src] = dev.have.get(src, 0) | span_mask(*ops)
        loop.log("deliver", inference=inference_id, device=dev.role, layer=src,
                 ops=f"{ops[0]}:{ops[1]}")
        if kind == wire.MsgType.RESULT:
            terminal_left[0] -= 1
            terminal_at[0] = max(terminal_at[0], loop.now)
        try_compute(dev)

    loop.log("start", inference=inference_id, bucket=plan.bandwidth)
    loop.at(loop.now, lambda: (try_send(robot), try_send(server), try_compute(robot), try_compute(server)))
    loop.run()

    for dev in (robot, server):
        if dev.next_task < len(dev.tasks) or dev.next_send < len(dev.sends):
            raise SimError(f"inference {inference_id}: {dev.role} stalled at task {dev.next_task}")
    if terminal_left[0]:
        raise SimError(f"inference {inference_id}: result never reached the robot")

    end = max([start, terminal_at[0]] + [b for _, b in robot.intervals])
    t_r = _completion(robot, len(graph), start)
    t_s = _completion(server, len(graph), start)
    output = None
    if x is not None:
        final = graph.layers[-1]
        output = robot.store.get(final.id, 0, final.axis_len).data
    timeline = Timeline.from_intervals(robot.intervals, link_busy, start, end)
    loop.log("done", inference=inference_id, wall=end - start)
    return SessionResult(
        start=start, end=end, t_robot=t_r, t_server=t_s,
        robot_compute=list(robot.intervals), robot_link=link_busy,
        compute_total=sum(b - a for a, b in robot.intervals + server.intervals),
        transmit_total=sum(b - a for a, b in link_busy),
        messages=messages, output=output, timeline=timeline,
        energy=energy_per_inference(timeline, power),
    )


def _completion(dev: _Device, n: int, start: float) -> list[float]:
    out, last = [], 0.0
    for i in range(n):
        if i in dev.done_at:
            last = dev.done_at[i] - start
        out.append(last)
    return out


def _fmt_runs(rs: Sequence[tuple[int, int]]) -> str:
    return ",".join(f"{a}:{b}" for a, b in rs)


def replay_plan(graph: ModelGraph, plan: SchedulePlan, profile: CostProfile,
                bandwidth: float | None = None) -> SessionResult:
    """Timing-only replay of ``plan`` over a constant-bandwidth link."""
    bw = plan.bandwidth if bandwidth is None else bandwidth
    return run_session(graph, plan, profile, SimLink.constant(bw, profile.latency))


# --------------------------------------------------------------------------
# Multi-inference runs

CSV_COLUMNS = (
    "inference_id", "start_s", "trace_bps", "predicted_bps", "bucket_bps", "wall_s",
    "compute_s", "transmit_s", "transmit_share_pct", "idle_s", "energy_j", "messages", "bytes",
    "local_wall_s", "local_energy_j", "pp_wall_s", "pp_energy_j",
)


@dataclass
class InferenceRow:
    inference_id: int
    start_s: float
    trace_bps: float
    predicted_bps: float
    bucket_bps: float
    wall_s: float
    compute_s: float
    transmit_s: float
    transmit_share_pct: float
    idle_s: float
    energy_j: float
    messages: int
    bytes: int
    local_wall_s: float
    local_energy_j: float
    pp_wall_s: float
    pp_energy_j: float

    def values(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class RunResult:
    rows: list[InferenceRow]
    log: list[str]
    sessions: list[SessionResult] = field(default_factory=list)
    trace_window: list[float] = field(default_factory=list)


def simulate_run(
    graph: ModelGraph,
    book: PlanBook,
    trace: BandwidthTrace,
    inferences: int,
    period: float,
    seed: int = 0,
    power: PowerStates = PowerStates(),
    check_outputs: bool = True,
    alpha: float = 0.3,
) -> RunResult:
    """Run ``inferences`` inferences, one every ``period`` seconds.

    Each inference samples the bandwidth prediction at its start, picks a
    plan from ``book`` and runs on a fresh link over ``trace``.  The
    all-local plan and the best pipeline cut for the same bucket run over
    the same trace window for comparison.
    """
    if inferences < 1 or not period > 0:
        raise ValueError("need at least one inference and a positive period")
    if book.model_checksum != graph.checksum:
        raise SimError("plan book was built for a different model")
    profile = book.profile
    deps = Dependencies(graph)
    table = trace_predictions(trace, alpha)
    rng = np.random.default_rng(seed)
    local = cut_plan(graph, profile, book.buckets[0], len(graph))
    pp = [best_cut_plan(graph, profile, b) for b in book.buckets]
    log: list[str] = []
    rows, sessions = [], []
    last_end = 0.0
    for k in range(inferences):
        start = round(k * period, 9)
        loop = EventLoop(log)
        loop.now = start
        predicted = table[trace.index(start)]
        idx = book.select(predicted)
        plan = book.plans[idx]
        loop.log("select", inference=k, predicted=predicted, bucket=book.buckets[idx], index=idx)
        x = rng.standard_normal(graph.raw_input_spec.dims).astype(np.float32)
        res = run_session(graph, plan, profile, SimLink(trace, profile.latency), start, x, k, loop,
                          power, deps)
        if check_outputs and res.output.tobytes() != run_model(graph, x).tobytes():
            raise SimError(f"inference {k}: distributed output differs from local reference")
        base_local = run_session(graph, local, profile, SimLink(trace, profile.latency), start,
                                 power=power, deps=deps)
        base_pp = run_session(graph, pp[idx], profile, SimLink(trace, profile.latency), start,
                              power=power, deps=deps)
        tl = res.timeline
        wall = res.wall
        rows.append(InferenceRow(
            inference_id=k, start_s=start, trace_bps=trace.at(start), predicted_bps=predicted,
            bucket_bps=book.buckets[idx], wall_s=wall, compute_s=tl.compute, transmit_s=tl.transmit,
            transmit_share_pct=100.0 * tl.transmit / wall if wall > 0 else 0.0, idle_s=tl.idle,
            energy_j=res.energy, messages=len(res.messages), bytes=res.wire_bytes,
            local_wall_s=base_local.wall, local_energy_j=base_local.energy,
            pp_wall_s=base_pp.wall, pp_energy_j=base_pp.energy,
        ))
        sessions.append(res)
        last_end = max(last_end, res.end)
    return RunResult(rows, log, sessions, trace.window(0.0, last_end))
