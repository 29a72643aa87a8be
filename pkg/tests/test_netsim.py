import pytest
from hypothesis import given, settings, strategies as st

from opsplit.netsim import (
    BandwidthTrace, EventLoop, EwmaPredictor, SimLink, TraceError, TraceExhausted, busy_intervals,
    constant_trace, load_trace, predict_at, save_trace, synth_trace, trace_predictions,
)

MB = 1e6


def test_constant_trace_samples():
    tr = constant_trace(80e6, 60)
    assert len(tr) == 600 and set(tr.bps) == {80e6}


def test_outdoor_mean_near_target():
    tr = synth_trace("outdoor_like", 300, seed=7)
    assert abs(tr.mean() - 73e6) <= 0.1 * 73e6
    # outages drop close to zero
    assert min(tr.bps) < 0.05 * 73e6


def test_indoor_is_steadier_than_outdoor():
    indoor = synth_trace("indoor_like", 300, seed=7)
    outdoor = synth_trace("outdoor_like", 300, seed=7)
    assert abs(indoor.mean() - 93e6) <= 0.1 * 93e6

    def rel_sd(tr):
        m = tr.mean()
        return (sum((v - m) ** 2 for v in tr.bps) / len(tr)) ** 0.5 / m
    assert rel_sd(indoor) < rel_sd(outdoor)


def test_synth_is_seeded():
    assert synth_trace("outdoor_like", 20, seed=3) == synth_trace("outdoor_like", 20, seed=3)
    assert synth_trace("outdoor_like", 20, seed=3) != synth_trace("outdoor_like", 20, seed=4)


def test_trace_file_round_trip(tmp_path):
    tr = synth_trace("indoor_like", 5, seed=1)
    save_trace(tr, tmp_path / "t.txt")
    back = load_trace(tmp_path / "t.txt")
    assert back.times == tr.times
    assert back.bps == pytest.approx(tr.bps, abs=1e-3)


def test_decreasing_timestamps_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0.0 1e6\n0.2 1e6\n0.1 1e6\n")
    with pytest.raises(TraceError):
        load_trace(path)


def test_link_examples():
    link = SimLink.constant(80e6)
    assert link.transfer("up", MB, 0.0) == pytest.approx(0.1)
    assert link.transfer("up", MB, 0.0) == pytest.approx(0.2)
    # the other direction has its own queue
    assert link.transfer("down", MB, 0.0) == pytest.approx(0.1)
    assert busy_intervals(link, ["up"]) == [(0.0, pytest.approx(0.1)), (pytest.approx(0.1), pytest.approx(0.2))]


def test_outage_stalls_then_drains():
    tr = BandwidthTrace(tuple(k * 0.1 for k in range(20)), (0.0,) * 10 + (80e6,) * 10)
    assert SimLink(tr).transfer("up", MB, 0.0) == pytest.approx(1.1)


def test_latency_added_after_serialization():
    link = SimLink.constant(80e6, latency=0.005)
    assert link.transfer("up", MB, 1.0) == pytest.approx(1.105)


def test_trace_exhaustion():
    tr = constant_trace(8e6, 0.2)
    with pytest.raises(TraceExhausted):
        SimLink(tr).transfer("up", MB, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e3, 1e7), min_size=1, max_size=6), st.floats(1e6, 1e8))
def test_fifo_deliveries_are_ordered_and_conserve_time(sizes, bps):
    link = SimLink.constant(bps)
    times = [link.transfer("up", s, 0.0) for s in sizes]
    assert times == sorted(times)
    assert times[-1] == pytest.approx(sum(sizes) * 8 / bps)


def test_event_loop_orders_and_logs():
    lines = []
    loop = EventLoop(lines)
    seen = []
    loop.at(0.2, lambda: seen.append("b"))
    loop.at(0.1, lambda: (seen.append("a"), loop.log("tick", n=1, v=0.5)))
    loop.at(0.2, lambda: seen.append("c"))
    end = loop.run()
    assert seen == ["a", "b", "c"] and end == pytest.approx(0.2)
    assert lines == ["0.100000000 tick n=1 v=0.5"]


def test_ewma_prediction():
    p = EwmaPredictor(0.5)
    assert p.update(10) == 10
    assert p.update(20) == 15
    tr = BandwidthTrace((0.0, 0.1, 0.2), (10.0, 20.0, 40.0))
    table = trace_predictions(tr, 0.5)
    assert table == [10.0, 15.0, 27.5]
    assert predict_at(tr, 0.15, 0.5) == 15.0
    with pytest.raises(ValueError):
        EwmaPredictor(0.0)
