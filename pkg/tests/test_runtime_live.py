import socket
import threading

import numpy as np
import pytest

from conftest import two_layer_model
from opsplit.engine import run_model
from opsplit.graph import dump_model
from opsplit.lop import OperatorSet, runs
from opsplit.models import demo_model, demo_profile
from opsplit.runtime import wire
from opsplit.runtime.live import InferenceError, ProtocolError, RobotEndpoint, ServerEndpoint
from opsplit.runtime.wire import Frame, MsgType
from opsplit.scheduler import (
    TO_ROBOT, TO_SERVER, DEConfig, PlanBook, cut_plan, dumps_planbook, evaluate_plan, local_plan, solve_de,
)

FAST_DE = DEConfig(population=10, generations=10)


def serve_in_background(server: ServerEndpoint, connections: int) -> tuple[int, threading.Thread]:
    port = server.bind()
    t = threading.Thread(target=server.serve, args=(connections,), daemon=True)
    t.start()
    return port, t


def fixed_book(graph, profile, plans) -> PlanBook:
    buckets = tuple(float(10 ** (6 + k)) for k in range(len(plans)))
    return PlanBook(buckets, tuple(plans), profile, graph.checksum)


@pytest.fixture()
def demo_setup():
    g = demo_model()
    prof = demo_profile(g)
    x = np.random.default_rng(4).standard_normal(g.raw_input_spec.dims).astype(np.float32)
    return g, prof, x


def test_fresh_pair_agrees_and_reconnect_hits_cache(demo_setup):
    g, prof, x = demo_setup
    server = ServerEndpoint(lambda graph: prof.server_op_time)
    port, t = serve_in_background(server, 2)
    try:
        with RobotEndpoint(g, prof.robot_op_time, buckets=[10e6, 50e6], de=FAST_DE) as robot:
            robot.connect("127.0.0.1", port)
            assert not robot.server_cached
            cached = server.cache[g.checksum].book
            assert robot.planbook.checksum == cached.checksum
            for bw in (10e6, 50e6, 5e6):
                assert robot.infer(x, predicted_bps=bw).tobytes() == run_model(g, x).tobytes()
        with RobotEndpoint(g, prof.robot_op_time, buckets=[10e6, 50e6], de=FAST_DE) as robot:
            robot.connect("127.0.0.1", port)
            assert robot.server_cached
            assert robot.infer(x, predicted_bps=50e6).tobytes() == run_model(g, x).tobytes()
        t.join(10)
        assert server.stats.profiled == 1
        assert server.stats.inferences == 4
        assert server.stats.errors == []
    finally:
        server.close()


def test_local_plan_exchanges_no_fragments(demo_setup):
    g, prof, x = demo_setup
    book = fixed_book(g, prof, [local_plan(g, prof, 10e6)])
    server = ServerEndpoint(lambda graph: prof.server_op_time)
    port, t = serve_in_background(server, 1)
    try:
        with RobotEndpoint(g, planbook=book) as robot:
            robot.connect("127.0.0.1", port)
            assert robot.infer(x).tobytes() == run_model(g, x).tobytes()
            assert robot.conn.messages == []
        t.join(10)
        assert server.last_connection.messages == []
    finally:
        server.close()


def test_pipeline_cut_sends_one_fragment_and_one_result(demo_setup):
    g, prof, x = demo_setup
    plan = cut_plan(g, prof, 10e6, 5)
    book = fixed_book(g, prof, [plan])
    server = ServerEndpoint(lambda graph: prof.server_op_time)
    port, t = serve_in_background(server, 1)
    try:
        with RobotEndpoint(g, planbook=book) as robot:
            robot.connect("127.0.0.1", port)
            assert robot.infer(x).tobytes() == run_model(g, x).tobytes()
            sent = [m for m in robot.conn.messages if m.direction == "sent"]
            got = [m for m in robot.conn.messages if m.direction == "received"]
        assert [(m.type, m.layer) for m in sent] == [("FRAGMENT", 4)]
        assert [m.type for m in got] == ["RESULT"]
    finally:
        server.close()


def test_split_traffic_matches_transfer_sets():
    g, prof = two_layer_model()
    plan = evaluate_plan(g, prof, 100e6, [OperatorSet.span(0, 0, 4), OperatorSet.of(1, [0])],
                         [OperatorSet.span(0, 4, 8), OperatorSet(1)])
    book = fixed_book(g, prof, [plan])
    x = np.random.default_rng(1).standard_normal(g.raw_input_spec.dims).astype(np.float32)
    server = ServerEndpoint(lambda graph: prof.server_op_time)
    port, t = serve_in_background(server, 1)
    try:
        with RobotEndpoint(g, planbook=book) as robot:
            robot.connect("127.0.0.1", port)
            assert robot.infer(x).tobytes() == run_model(g, x).tobytes()
            sent = {(m.layer, m.start, m.stop) for m in robot.conn.messages if m.direction == "sent"}
            got = {(m.layer, m.start, m.stop) for m in robot.conn.messages if m.direction == "received"}
    finally:
        server.close()

    def expected(direction):
        out = set()
        for tr in plan.transfers:
            if tr.direction == direction:
                node = g.node(tr.source)
                out |= {(tr.source, *node.ops_range(a, b)) for a, b in runs(tr.mask)}
        return out
    assert sent == expected(TO_SERVER) == {(-1, 4, 8)}
    assert got == expected(TO_ROBOT) == {(0, 4, 8)}


def test_back_to_back_inferences_switch_plans(demo_setup):
    g, prof, x = demo_setup
    plans = [local_plan(g, prof, 10e6), cut_plan(g, prof, 10e6, 5), solve_de(g, prof, 80e6, config=FAST_DE)]
    book = fixed_book(g, prof, plans)
    server = ServerEndpoint(lambda graph: prof.server_op_time)
    port, t = serve_in_background(server, 1)
    ref = run_model(g, x).tobytes()
    try:
        with RobotEndpoint(g, planbook=book) as robot:
            robot.connect("127.0.0.1", port)
            counts = []
            for bucket in (2, 0, 1, 2):
                before = len(robot.conn.messages)
                assert robot.infer(x, bucket=bucket).tobytes() == ref
                counts.append(len(robot.conn.messages) - before)
        assert counts[1] == 0 and counts[2] == 2 and counts[0] == counts[3] > 0
    finally:
        server.close()


# --------------------------------------------------------------------------
# Failure paths with hand-rolled peers

class FakePeer:
    """Listening socket whose single connection is handled by ``script(sock)``."""

    def __init__(self, script):
        self.listener = socket.socket()
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(1)
        self.port = self.listener.getsockname()[1]
        self.received: list[Frame] = []
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._run, args=(script,), daemon=True)
        self.thread.start()

    def _run(self, script):
        sock, _ = self.listener.accept()
        try:
            script(self, sock)
        except BaseException as exc:  # surfaced by the test
            self.error = exc
        finally:
            sock.close()
            self.listener.close()

    def recv(self, sock) -> Frame:
        frame = wire.read_frame(sock)
        self.received.append(frame)
        return frame


def accept_planbook(peer, sock):
    """Server half of the handshake when the robot brings its own plan book."""
    hello = peer.recv(sock).json()
    wire.write_frame(sock, wire.json_frame(MsgType.HELLO, {"version": hello["version"], "cached": False}))
    peer.recv(sock)
    peer.recv(sock)
    check = peer.recv(sock).json()
    wire.write_frame(sock, wire.json_frame(MsgType.HELLO, check))


def split_book():
    g, prof = two_layer_model()
    plan = evaluate_plan(g, prof, 100e6, [OperatorSet.span(0, 0, 4), OperatorSet.of(1, [0])],
                         [OperatorSet.span(0, 4, 8), OperatorSet(1)])
    return g, fixed_book(g, prof, [plan])


def test_corrupted_planbook_gets_error_and_reset(demo_setup):
    g, prof, _ = demo_setup

    def script(peer, sock):
        peer.recv(sock)
        wire.write_frame(sock, wire.json_frame(MsgType.HELLO, {"version": wire.PROTOCOL_VERSION, "cached": True}))
        wire.write_frame(sock, Frame(MsgType.PLANBOOK, payload=b"\x00garbage"))
        peer.recv(sock)

    peer = FakePeer(script)
    robot = RobotEndpoint(g, prof.robot_op_time, buckets=[10e6], timeout=5)
    with pytest.raises(ProtocolError):
        robot.connect("127.0.0.1", peer.port)
    peer.thread.join(5)
    assert peer.received[-1].type == MsgType.ERROR


def test_unknown_bucket_answered_with_error():
    g, book = split_book()
    server = ServerEndpoint(lambda graph: book.profile.server_op_time)
    port, t = serve_in_background(server, 1)
    sock = socket.create_connection(("127.0.0.1", port))
    try:
        wire.write_frame(sock, wire.json_frame(MsgType.HELLO, {
            "version": wire.PROTOCOL_VERSION, "model_checksum": g.checksum, "group": 1, "have_planbook": True}))
        assert wire.read_frame(sock).type == MsgType.HELLO
        wire.write_frame(sock, wire.text_frame(MsgType.MODEL, dump_model(g)))
        wire.write_frame(sock, wire.text_frame(MsgType.PLANBOOK, dumps_planbook(book)))
        wire.write_frame(sock, wire.json_frame(MsgType.HELLO, {"planbook_checksum": book.checksum}))
        assert wire.read_frame(sock).json() == {"planbook_checksum": book.checksum}
        wire.write_frame(sock, Frame(MsgType.START_INFERENCE, 0, 99))
        reply = wire.read_frame(sock)
        assert reply.type == MsgType.ERROR and "bucket" in reply.json()["message"]
        wire.write_frame(sock, Frame(MsgType.BYE))
    finally:
        sock.close()
        t.join(10)
        server.close()


def test_disconnect_mid_inference_names_the_inference():
    g, book = split_book()

    def script(peer, sock):
        accept_planbook(peer, sock)
        assert peer.recv(sock).type == MsgType.START_INFERENCE

    peer = FakePeer(script)
    x = np.zeros(g.raw_input_spec.dims, dtype=np.float32)
    with RobotEndpoint(g, planbook=book, timeout=5) as robot:
        robot.connect("127.0.0.1", peer.port)
        with pytest.raises(InferenceError) as info:
            robot.infer(x)
    assert info.value.inference_id == 0


def test_silent_server_times_out():
    g, book = split_book()
    release = threading.Event()

    def script(peer, sock):
        accept_planbook(peer, sock)
        release.wait(10)

    peer = FakePeer(script)
    x = np.zeros(g.raw_input_spec.dims, dtype=np.float32)
    try:
        with RobotEndpoint(g, planbook=book, timeout=0.3) as robot:
            robot.connect("127.0.0.1", peer.port)
            with pytest.raises(InferenceError):
                robot.infer(x)
    finally:
        release.set()
