import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import two_layer_model
from opsplit.cost import make_profile, no_transfer_layers, synthetic_op_times
from opsplit.graph import build_model
from opsplit.lop import OperatorSet
from opsplit.models import random_model, random_profile
from opsplit.scheduler import (
    DEConfig, PlanBook, PlanError, Scheduler, build_planbook, cut_plan, dumps_planbook, evaluate_plan,
    loads_planbook, local_plan, parse_buckets, plan_violations, solve_de, solve_exhaustive,
)


def test_all_local_objective_is_compute_sum():
    g = build_model({"input": [1, 8, 8], "layers": [
        {"name": "a", "op": "relu"}, {"name": "b", "op": "sigmoid"}, {"name": "s", "op": "softmax"}]})
    prof = make_profile(g, [0.001, 0.001, 0.001], [0.001] * 3, latency=0.0)
    plan = local_plan(g, prof, 1e8)
    assert plan.objective == pytest.approx(0.017)
    assert not plan.transfers and plan.robot_share() == 1.0


def test_two_layer_split_timing():
    g, prof = two_layer_model()
    plan = evaluate_plan(g, prof, 100e6, [OperatorSet.span(0, 0, 4), OperatorSet.of(1, [0])],
                         [OperatorSet.span(0, 4, 8), OperatorSet(1)])
    assert plan.t_server[0] == pytest.approx(0.022)
    assert plan.t_robot[0] == pytest.approx(0.008)
    assert plan.objective == pytest.approx(0.045)
    assert plan.N(0)[-1].ops == {4, 5, 6, 7}
    assert plan.M(1)[0].ops == {4, 5, 6, 7}
    assert plan.terminal is None
    assert plan_violations(plan, g) == []


def test_two_layer_exhaustive_and_de_agree():
    g, prof = two_layer_model()
    ex = solve_exhaustive(g, prof, 100e6)
    de = solve_de(g, prof, 100e6)
    assert Scheduler(g, prof).genome_space() == 9 * 2
    assert de.objective == pytest.approx(ex.objective)
    # cut endpoints by hand
    assert cut_plan(g, prof, 100e6, 2).objective == pytest.approx(8 * 0.002 + 0.003)
    # 4 Mb of input out, 8 relu rows, softmax, 4 Mb result back
    assert cut_plan(g, prof, 100e6, 0).objective == pytest.approx(0.04 + 8 * 0.0005 + 0.001 + 0.04)


def test_all_pi_model_stays_local():
    w = np.ones((16, 1, 3, 3), dtype=np.float32)
    g = build_model({"input": [1, 8, 8], "layers": [
        {"name": "c", "op": "conv2d", "weight": "w", "padding": 1},
        {"name": "r", "op": "relu"}, {"name": "s", "op": "sigmoid"}]}, {"w": w})
    prof = make_profile(g, [0.01] * 3, [0.0001] * 3, latency=0.0)
    plan = solve_de(g, prof, 1e12)
    assert all(r == layer.full_mask for r, layer in zip(plan.robot, g.layers))
    assert not any(plan.server) and not plan.transfers


def test_free_link_offloads_everything():
    g = build_model({"input": [4, 8, 8], "layers": [
        {"name": "p", "op": "maxpool2d", "kernel": 2}, {"name": "r", "op": "relu"},
        {"name": "f", "op": "flatten"}, {"name": "s", "op": "softmax"}]})
    robot = synthetic_op_times(g, per_op=0.001)
    prof = make_profile(g, robot, [t / 100 for t in robot], latency=0.0, header_bytes=0)
    ex = solve_exhaustive(g, prof, 1e18)
    server_total = sum(layer.operator_count * t for layer, t in zip(g.layers, prof.server_op_time))
    assert ex.robot_share() == 0.0
    assert ex.objective == pytest.approx(server_total, rel=1e-6)
    assert solve_de(g, prof, 1e18).objective == pytest.approx(ex.objective)


def test_ties_prefer_local():
    g = build_model({"input": [1, 8], "layers": [{"name": "s", "op": "softmax"}]})
    prof = make_profile(g, [0.001], [0.001], latency=0.0, header_bytes=0)
    for plan in (solve_exhaustive(g, prof, 1e18), solve_de(g, prof, 1e18)):
        assert plan.robot == (1,) and plan.server == (0,)


def test_exhaustive_refuses_large_spaces():
    g, prof = two_layer_model()
    with pytest.raises(PlanError):
        solve_exhaustive(g, prof, 1e8, limit=10)


def test_planbook_buckets():
    g, prof = two_layer_model()
    book = build_planbook(g, prof, parse_buckets("10,50,100Mbps"), exhaustive=True)
    assert len(book) == 3
    shares = [p.robot_share() for p in book.plans]
    assert shares == sorted(shares, reverse=True)
    assert len(build_planbook(g, prof, [5e7])) == 1
    with pytest.raises(PlanError):
        build_planbook(g, prof, [1e7, 1e7])
    with pytest.raises(PlanError):
        build_planbook(g, prof, [0.0])


def test_planbook_select():
    g, prof = two_layer_model()
    book = build_planbook(g, prof, [10e6, 50e6, 100e6], DEConfig(generations=5))
    assert book.select(5e6) == 0
    assert book.select(10e6) == 0
    assert book.select(75e6) == 1
    assert book.select(1e9) == 2


def test_planbook_round_trip():
    g, prof = two_layer_model()
    book = build_planbook(g, prof, [10e6, 100e6], DEConfig(generations=10))
    again = loads_planbook(dumps_planbook(book))
    assert isinstance(again, PlanBook)
    assert again.checksum == book.checksum
    assert [p.robot for p in again.plans] == [p.robot for p in book.plans]
    assert [p.transfers for p in again.plans] == [p.transfers for p in book.plans]


def test_parse_buckets():
    assert parse_buckets("10,50,100Mbps") == [10e6, 50e6, 100e6]
    assert parse_buckets("2.5Gbps") == [2.5e9]
    with pytest.raises((PlanError, ValueError)):
        parse_buckets("fast")


def test_de_config_validation():
    with pytest.raises((PlanError, ValueError)):
        DEConfig(population=2)
    with pytest.raises((PlanError, ValueError)):
        DEConfig(crossover=1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5), st.floats(5.0, 9.0))
def test_de_plans_are_valid_and_beat_cuts(seed, n, log_bw):
    rng = np.random.default_rng(seed)
    g = random_model(rng, n)
    prof = random_profile(rng, g)
    bw = 10 ** log_bw
    plan = solve_de(g, prof, bw, config=DEConfig(generations=20))
    assert plan_violations(plan, g) == []
    for i in no_transfer_layers(g):
        assert not any(plan.M(i).values()) and not any(plan.N(i).values())
    best_cut = min(cut_plan(g, prof, bw, k).objective for k in range(len(g) + 1))
    assert plan.objective <= best_cut
    assert plan.objective <= local_plan(g, prof, bw).objective
