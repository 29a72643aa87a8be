"""Two-process runtime over TCP.

Each endpoint runs a reader thread that files incoming fragments into a
``FragmentStore``, a compute loop that executes its layer tasks in order,
and a transmit thread that sends planned fragments as soon as their source
rows exist.  The server keeps plan books in memory keyed by model checksum,
so a reconnecting robot with the same model skips profiling.
"""
from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..cost import make_profile
from ..engine import Fragment
from ..graph import INPUT_ID, ModelGraph, dump_model, parse_model
from ..scheduler import (
    DEConfig, PlanBook, PlanError, SchedulePlan, build_planbook, dumps_planbook, loads_planbook,
)
from . import wire
from .program import Program, role_program, run_ops
from .store import FragmentStore, StoreClosed
from .wire import Frame, MsgType

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class ProtocolError(RuntimeError):
    """The peer broke the protocol or reported an error."""


class InferenceError(RuntimeError):
    def __init__(self, inference_id: int, message: str):
        super().__init__(f"inference {inference_id}: {message}")
        self.inference_id = inference_id


@dataclass(frozen=True)
class MessageLog:
    direction: str  # "sent" or "received"
    type: str
    inference_id: int
    layer: int
    start: int
    stop: int


class _Connection:
    """Socket with a send lock, traffic accounting and an optional reader thread."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()
        self.messages: list[MessageLog] = []
        self.bytes_sent = 0
        self.bytes_received = 0
        self._reader: threading.Thread | None = None

    def send(self, frame: Frame) -> None:
        with self._lock:
            self.bytes_sent += wire.write_frame(self.sock, frame)
            self._note("sent", frame)

    def recv(self) -> Frame:
        frame = wire.read_frame(self.sock)
        self.bytes_received += len(wire.encode(frame))
        self._note("received", frame)
        return frame

    def _note(self, direction: str, frame: Frame) -> None:
        if frame.type in (MsgType.FRAGMENT, MsgType.RESULT):
            self.messages.append(MessageLog(direction, frame.type.name, frame.inference_id,
                                            frame.source_layer, frame.range_start, frame.range_end))

    def expect(self, *types: MsgType) -> Frame:
        frame = self.recv()
        if frame.type == MsgType.ERROR:
            raise ProtocolError(f"peer error: {frame.json().get('message', '')}")
        if frame.type not in types:
            raise ProtocolError(f"expected {'/'.join(t.name for t in types)}, got {frame.type.name}")
        return frame

    def error(self, message: str, inference_id: int = 0) -> None:
        try:
            self.send(wire.json_frame(MsgType.ERROR, {"message": message}, inference_id))
        except OSError:
            pass

    def start_reader(self, handle: Callable[[Frame], None], lost: Callable[[BaseException], None]) -> None:
        def loop():
            try:
                while True:
                    handle(self.recv())
            except (OSError, wire.WireError, wire.ConnectionClosed, ProtocolError) as exc:
                lost(exc)
        self.sock.settimeout(None)
        self._reader = threading.Thread(target=loop, name="frame-reader", daemon=True)
        self._reader.start()

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout=5)


def _execute(graph: ModelGraph, program: Program, store: FragmentStore, conn: _Connection,
             inference_id: int, timeout: float, strict: bool = False) -> None:
    """Run one endpoint's share of an inference: compute tasks plus planned sends."""
    failure: list[BaseException] = []

    def transmit():
        try:
            for task in program.sends:
                kind = MsgType.RESULT if task.terminal else MsgType.FRAGMENT
                for lo, hi in task.rows:
                    frag = store.wait(task.transfer.source, lo, hi, timeout)
                    conn.send(wire.fragment_frame(kind, inference_id, task.transfer.source, lo, hi, frag.data))
        except BaseException as exc:  # handed to the compute side below
            failure.append(exc)
            store.close(exc)

    sender = threading.Thread(target=transmit, name="transmit", daemon=True)
    sender.start()
    fetch = lambda p, lo, hi: store.wait(p, lo, hi, timeout)  # noqa: E731
    try:
        for task in program.compute:
            for a, b in task.runs():
                store.put(run_ops(graph, task.layer, a, b, fetch, strict))
    except (TimeoutError, StoreClosed) as exc:
        store.close(exc)
        sender.join(timeout)
        raise InferenceError(inference_id, str(failure[0] if failure else exc)) from exc
    sender.join(timeout)
    if sender.is_alive():
        raise InferenceError(inference_id, "transmit worker did not finish")
    if failure:
        raise InferenceError(inference_id, str(failure[0])) from failure[0]


def _fragment_of(graph: ModelGraph, frame: Frame) -> Fragment:
    layer = frame.source_layer
    if layer != INPUT_ID and not 0 <= layer < len(graph):
        raise ProtocolError(f"fragment for unknown layer {layer}")
    node = graph.node(layer)
    data = frame.tensor()
    try:
        return Fragment(node.id, node.axis, frame.range_start, frame.range_end, node.axis_len, data)
    except ValueError as exc:
        raise ProtocolError(f"bad fragment for layer {layer}: {exc}") from None


# --------------------------------------------------------------------------
# Robot

class RobotEndpoint:
    """Client side: owns the model and the input, receives the result."""

    def __init__(self, graph: ModelGraph, robot_op_time: Sequence[float] | None = None,
                 planbook: PlanBook | None = None, buckets: Sequence[float] = (),
                 de: DEConfig = DEConfig(), latency: float = 1e-3, header_bytes: int = 64,
                 timeout: float = DEFAULT_TIMEOUT, exhaustive: bool = False):
        if planbook is None and robot_op_time is None:
            raise ValueError("need either a plan book or robot operator times")
        self.graph = graph
        self.robot_op_time = robot_op_time
        self.planbook = planbook
        self.buckets = tuple(buckets)
        self.de = de
        self.latency = latency
        self.header_bytes = header_bytes
        self.timeout = timeout
        self.exhaustive = exhaustive
        self.conn: _Connection | None = None
        self.server_cached = False
        self._store: FragmentStore | None = None
        self._store_id = -1
        self._next_id = 0

    def connect(self, host: str, port: int) -> None:
        sock = socket.create_connection((host, port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.conn = _Connection(sock)
        try:
            self._handshake()
        except (wire.WireError, PlanError) as exc:
            self.conn.error(str(exc))
            self.conn.close()
            raise ProtocolError(str(exc)) from exc
        except BaseException:
            self.conn.close()
            raise
        self.conn.start_reader(self._on_frame, self._on_lost)

    def _handshake(self) -> None:
        conn, graph = self.conn, self.graph
        conn.send(wire.json_frame(MsgType.HELLO, {
            "version": wire.PROTOCOL_VERSION, "model_checksum": graph.checksum,
            "group": graph.group, "have_planbook": self.planbook is not None,
        }))
        hello = conn.expect(MsgType.HELLO).json()
        if hello.get("version") != wire.PROTOCOL_VERSION:
            raise ProtocolError(f"server speaks protocol {hello.get('version')}")
        self.server_cached = bool(hello.get("cached"))
        if self.planbook is not None:
            conn.send(wire.text_frame(MsgType.MODEL, dump_model(graph)))
            conn.send(wire.text_frame(MsgType.PLANBOOK, dumps_planbook(self.planbook)))
        elif self.server_cached:
            self.planbook = loads_planbook(conn.expect(MsgType.PLANBOOK).text())
        else:
            conn.send(wire.text_frame(MsgType.MODEL, dump_model(graph)))
            info = {
                "robot_op_time": list(self.robot_op_time), "latency": self.latency,
                "header_bytes": self.header_bytes, "buckets_bps": list(self.buckets),
                "exhaustive": self.exhaustive,
                "de": {k: getattr(self.de, k) for k in ("population", "generations", "crossover",
                                                        "weight", "seed")},
            }
            conn.send(wire.json_frame(MsgType.PROFILE_INFO, info))
            self.planbook = loads_planbook(conn.expect(MsgType.PLANBOOK).text())
        if self.planbook.model_checksum != graph.checksum:
            raise ProtocolError("plan book belongs to a different model")
        conn.send(wire.json_frame(MsgType.HELLO, {"planbook_checksum": self.planbook.checksum}))
        ack = conn.expect(MsgType.HELLO).json()
        if ack.get("planbook_checksum") != self.planbook.checksum:
            raise ProtocolError("plan book checksum mismatch")

    def _on_frame(self, frame: Frame) -> None:
        store = self._store
        if frame.type in (MsgType.FRAGMENT, MsgType.RESULT):
            if store is None or frame.inference_id != self._store_id:
                return
            try:
                store.put(_fragment_of(self.graph, frame))
            except (ProtocolError, wire.WireError) as exc:
                store.close(exc)
        elif frame.type == MsgType.ERROR and store is not None:
            store.close(ProtocolError(f"server error: {frame.json().get('message', '')}"))
        elif frame.type == MsgType.BYE and store is not None:
            store.close(ConnectionError("server said goodbye"))

    def _on_lost(self, exc: BaseException) -> None:
        if self._store is not None:
            self._store.close(ConnectionError(f"connection lost: {exc}"))

    def plan_for(self, predicted_bps: float | None) -> tuple[int, SchedulePlan]:
        book = self.planbook
        idx = 0 if predicted_bps is None else book.select(predicted_bps)
        return idx, book.plans[idx]

    def infer(self, x: np.ndarray, predicted_bps: float | None = None, bucket: int | None = None,
              strict: bool = False) -> np.ndarray:
        if self.conn is None:
            raise ProtocolError("not connected")
        if bucket is None:
            bucket, plan = self.plan_for(predicted_bps)
        elif not 0 <= bucket < len(self.planbook):
            raise ValueError(f"bucket {bucket} out of range")
        plan = self.planbook.plans[bucket]
        graph = self.graph
        inference_id = self._next_id
        self._next_id += 1
        store = FragmentStore()
        store.put(Fragment.whole(graph.input, np.asarray(x, dtype=np.float32)))
        self._store, self._store_id = store, inference_id
        self.conn.send(Frame(MsgType.START_INFERENCE, inference_id, bucket))
        _execute(graph, role_program(graph, plan, "robot"), store, self.conn, inference_id,
                 self.timeout, strict)
        final = graph.layers[-1]
        try:
            return store.wait(final.id, 0, final.axis_len, self.timeout).data
        except (TimeoutError, StoreClosed) as exc:
            raise InferenceError(inference_id, f"result not received: {exc}") from exc

    def close(self) -> None:
        if self.conn is None:
            return
        try:
            self.conn.send(Frame(MsgType.BYE))
        except OSError:
            pass
        self.conn.close()
        self.conn = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# Server

@dataclass
class _Cached:
    graph: ModelGraph
    book: PlanBook


@dataclass
class ServerStats:
    connections: int = 0
    profiled: int = 0
    inferences: int = 0
    errors: list[str] = field(default_factory=list)


class ServerEndpoint:
    """Server side: profiles itself on demand, builds plan books, serves inferences.

    ``profiler`` returns the server's per-layer seconds per operator for a
    model.  Connections are handled one at a time.
    """

    def __init__(self, profiler: Callable[[ModelGraph], Sequence[float]],
                 timeout: float = DEFAULT_TIMEOUT, planbook_path_hook: Callable[[PlanBook], None] | None = None):
        self.profiler = profiler
        self.timeout = timeout
        self.cache: dict[str, _Cached] = {}
        self.stats = ServerStats()
        self.on_planbook = planbook_path_hook
        self._listener: socket.socket | None = None
        self.last_connection: _Connection | None = None

    def bind(self, host: str = "127.0.0.1", port: int = 0) -> int:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(1)
        self._listener = sock
        return sock.getsockname()[1]

    def serve(self, max_connections: int | None = None) -> None:
        """Accept and serve connections until ``max_connections`` have finished."""
        if self._listener is None:
            raise RuntimeError("call bind() first")
        served = 0
        while max_connections is None or served < max_connections:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                break
            served += 1
            self.stats.connections += 1
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(sock)
            self.last_connection = conn
            try:
                self._serve_connection(conn)
            except (ProtocolError, wire.WireError, PlanError, OSError, ValueError) as exc:
                self.stats.errors.append(str(exc))
                log.warning("connection ended with error: %s", exc)
                conn.error(str(exc))
            finally:
                conn.close()

    def close(self) -> None:
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    def _handshake(self, conn: _Connection) -> _Cached:
        conn.sock.settimeout(self.timeout)
        hello = conn.expect(MsgType.HELLO).json()
        if hello.get("version") != wire.PROTOCOL_VERSION:
            conn.send(wire.json_frame(MsgType.ERROR, {"message": "protocol version mismatch"}))
            raise ProtocolError(f"robot speaks protocol {hello.get('version')}")
        checksum = hello.get("model_checksum", "")
        group = int(hello.get("group", 1))
        cached = self.cache.get(checksum)
        conn.send(wire.json_frame(MsgType.HELLO, {"version": wire.PROTOCOL_VERSION,
                                                  "cached": cached is not None}))
        if hello.get("have_planbook"):
            graph = parse_model(conn.expect(MsgType.MODEL).text(), group=group)
            book = loads_planbook(conn.expect(MsgType.PLANBOOK).text())
            if graph.checksum != checksum or book.model_checksum != checksum:
                raise ProtocolError("model checksum mismatch")
            entry = _Cached(graph, book)
        elif cached is not None:
            entry = cached
            conn.send(wire.text_frame(MsgType.PLANBOOK, dumps_planbook(entry.book)))
        else:
            graph = parse_model(conn.expect(MsgType.MODEL).text(), group=group)
            if graph.checksum != checksum:
                raise ProtocolError("model checksum mismatch")
            info = conn.expect(MsgType.PROFILE_INFO).json()
            server_times = tuple(self.profiler(graph))
            self.stats.profiled += 1
            profile = make_profile(graph, info["robot_op_time"], server_times,
                                   latency=float(info.get("latency", 1e-3)),
                                   header_bytes=int(info.get("header_bytes", 64)))
            book = build_planbook(graph, profile, info["buckets_bps"], DEConfig(**info.get("de", {})),
                                  exhaustive=bool(info.get("exhaustive")))
            entry = _Cached(graph, book)
            conn.send(wire.text_frame(MsgType.PLANBOOK, dumps_planbook(book)))
        check = conn.expect(MsgType.HELLO).json()
        if check.get("planbook_checksum") != entry.book.checksum:
            raise ProtocolError("plan book checksum mismatch")
        self.cache[checksum] = entry
        conn.send(wire.json_frame(MsgType.HELLO, {"planbook_checksum": entry.book.checksum}))
        if self.on_planbook is not None:
            self.on_planbook(entry.book)
        return entry

    def _serve_connection(self, conn: _Connection) -> None:
        entry = self._handshake(conn)
        graph, book = entry.graph, entry.book
        jobs: list = []
        ready = threading.Condition()
        current: dict = {"id": None, "store": None}

        def push(job):
            with ready:
                jobs.append(job)
                ready.notify()

        def on_frame(frame: Frame) -> None:
            if frame.type == MsgType.START_INFERENCE:
                store = FragmentStore()
                current["id"], current["store"] = frame.inference_id, store
                push(("infer", frame.inference_id, frame.layer_id, store))
            elif frame.type in (MsgType.FRAGMENT, MsgType.RESULT):
                store = current["store"]
                if store is None or frame.inference_id != current["id"]:
                    raise ProtocolError(f"fragment for inactive inference {frame.inference_id}")
                store.put(_fragment_of(graph, frame))
            elif frame.type == MsgType.BYE:
                push(("bye",))
            elif frame.type == MsgType.ERROR:
                if current["store"] is not None:
                    current["store"].close(ProtocolError("robot aborted"))
            else:
                raise ProtocolError(f"unexpected {frame.type.name} after handshake")

        def on_lost(exc: BaseException) -> None:
            if current["store"] is not None:
                current["store"].close(ConnectionError(f"connection lost: {exc}"))
            push(("lost", exc))

        conn.start_reader(on_frame, on_lost)
        while True:
            with ready:
                while not jobs:
                    ready.wait()
                job = jobs.pop(0)
            if job[0] == "bye":
                return
            if job[0] == "lost":
                exc = job[1]
                if isinstance(exc, wire.ConnectionClosed):
                    return
                raise ProtocolError(str(exc))
            _, inference_id, bucket, store = job
            if not 0 <= bucket < len(book):
                conn.error(f"unknown bucket {bucket}", inference_id)
                continue
            plan = book.plans[bucket]
            try:
                _execute(graph, role_program(graph, plan, "server"), store, conn, inference_id, self.timeout)
                self.stats.inferences += 1
            except InferenceError as exc:
                self.stats.errors.append(str(exc))
                conn.error(str(exc), inference_id)
