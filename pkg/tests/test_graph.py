import numpy as np
import pytest

from opsplit.engine import run_layer_full, run_model
from opsplit.graph import BlockWise, ElementWise, Global, ModelError, build_model, load_model, save_model
from opsplit.models import demo_model


def conv_relu_softmax():
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    return build_model({"input": [1, 8, 8], "layers": [
        {"name": "c", "op": "conv2d", "weight": "w", "padding": 1},
        {"name": "r", "op": "relu"},
        {"name": "s", "op": "softmax"},
    ]}, {"w": w})


def test_chain_kinds_and_operator_counts():
    g = conv_relu_softmax()
    kinds = [type(layer.kind) for layer in g.layers]
    assert kinds == [BlockWise, ElementWise, Global]
    assert [layer.operator_count for layer in g.layers] == [8, 8, 1]


def test_single_row_matmul_is_global():
    g = build_model({"input": [1, 64], "layers": [{"name": "fc", "op": "matmul", "weight": "w"}]},
                    {"w": np.zeros((64, 4), dtype=np.float32)})
    assert g.layers[0].is_global
    assert g.layers[0].operator_count == 1


def test_multi_row_matmul_splits_rows():
    g = build_model({"input": [16, 8], "layers": [{"name": "fc", "op": "matmul", "weight": "w"}]},
                    {"w": np.zeros((8, 32), dtype=np.float32)})
    layer = g.layers[0]
    assert layer.axis == 0 and layer.operator_count == 16


def test_strided_conv_shape_matches_engine():
    w = np.ones((2, 1, 2, 2), dtype=np.float32)
    g = build_model({"input": [1, 8, 8], "layers": [
        {"name": "c", "op": "conv2d", "weight": "w", "stride": 2}]}, {"w": w})
    layer = g.layers[0]
    assert layer.output_spec.dims == (2, 4, 4)
    assert layer.operator_count == 4
    out = run_layer_full(layer, [np.zeros((1, 8, 8), dtype=np.float32)])
    assert out.shape == layer.output_spec.dims


def test_partition_axes():
    g = build_model({"input": [1, 8, 8], "layers": [
        {"name": "r", "op": "relu"},
        {"name": "p", "op": "maxpool2d", "kernel": 2},
    ]})
    relu, pool = g.layers
    assert relu.axis == 1 and relu.operator_count == 8
    assert [relu.op_range(k) for k in range(3)] == [(0, 1), (1, 2), (2, 3)]
    assert pool.axis == 1 and pool.operator_count == 4


def test_grouping_merges_rows():
    g = build_model({"input": [1, 8, 8], "layers": [{"name": "r", "op": "relu"}]}, group=3)
    layer = g.layers[0]
    assert layer.operator_count == 3
    assert layer.op_range(2) == (6, 8)
    assert layer.ops_covering(2, 7) == (0, 3)


@pytest.mark.parametrize("desc, msg", [
    ({"input": [1, 4, 4], "layers": [{"name": "x", "op": "gelu"}]}, "unknown op"),
    ({"input": [1, 4, 4], "layers": [{"name": "x", "op": "relu", "parents": ["y"]}]}, "undefined"),
    ({"input": [1, 4, 4], "layers": [{"name": "x", "op": "relu"}, {"name": "x", "op": "relu"}]},
     "duplicate"),
    ({"layers": []}, "input"),
])
def test_invalid_descriptions(desc, msg):
    with pytest.raises(ModelError, match=msg):
        build_model(desc)


def test_shape_mismatch_rejected():
    with pytest.raises(ModelError):
        build_model({"input": [4, 8], "layers": [{"name": "m", "op": "matmul", "weight": "w"}]},
                    {"w": np.zeros((5, 2), dtype=np.float32)})


def test_save_load_round_trip(tmp_path):
    g = demo_model(seed=3)
    path = tmp_path / "m.json"
    save_model(g, path)
    assert (tmp_path / "m.bin").exists()
    h = load_model(path)
    assert h.checksum == g.checksum
    x = np.random.default_rng(0).standard_normal(g.raw_input_spec.dims).astype(np.float32)
    assert run_model(h, x).tobytes() == run_model(g, x).tobytes()


def test_checksum_tracks_weights():
    assert demo_model(seed=1).checksum != demo_model(seed=2).checksum
    assert demo_model(seed=1).checksum == demo_model(seed=1).checksum
