"""Built-in models: the demo CNN and a random small-model factory for tests."""
from __future__ import annotations

import numpy as np

from .cost import CostProfile, make_profile, synthetic_op_times
from .graph import ModelGraph, build_model

# robot seconds per work unit (MAC or output element) for synthetic profiles
DEMO_SEC_PER_UNIT = 2e-8
DEMO_SERVER_SPEEDUP = 3.0


def _conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt(c_in * k * k)
    w = (rng.standard_normal((c_out, c_in, k, k)) * scale).astype(np.float32)
    b = (rng.standard_normal(c_out) * 0.1).astype(np.float32)
    return w, b


def demo_model(seed: int = 0, group: int = 1) -> ModelGraph:
    """Small CNN classifier on a 3x32x32 input."""
    rng = np.random.default_rng(seed)
    w1, b1 = _conv(rng, 8, 3, 3)
    w2, b2 = _conv(rng, 16, 8, 3)
    w3, b3 = _conv(rng, 16, 16, 3)
    fc = (rng.standard_normal((1024, 10)) / 32.0).astype(np.float32)
    fcb = np.zeros(10, dtype=np.float32)
    desc = {
        "input": [3, 32, 32],
        "layers": [
            {"name": "conv1", "op": "conv2d", "weight": "w1", "bias": "b1", "padding": 1},
            {"name": "relu1", "op": "relu"},
            {"name": "pool1", "op": "maxpool2d", "kernel": 2},
            {"name": "conv2", "op": "conv2d", "weight": "w2", "bias": "b2", "padding": 1},
            {"name": "relu2", "op": "relu"},
            {"name": "pool2", "op": "maxpool2d", "kernel": 2},
            {"name": "conv3", "op": "conv2d", "weight": "w3", "bias": "b3", "padding": 1},
            {"name": "silu3", "op": "silu"},
            {"name": "flatten", "op": "flatten"},
            {"name": "fc", "op": "matmul", "weight": "fc", "bias": "fcb"},
            {"name": "softmax", "op": "softmax"},
        ],
    }
    weights = {"w1": w1, "b1": b1, "w2": w2, "b2": b2, "w3": w3, "b3": b3, "fc": fc, "fcb": fcb}
    return build_model(desc, weights, group=group)


def demo_profile(graph: ModelGraph, sec_per_unit: float = DEMO_SEC_PER_UNIT,
                 speedup: float = DEMO_SERVER_SPEEDUP, latency: float = 1e-3) -> CostProfile:
    robot = synthetic_op_times(graph, per_unit=sec_per_unit)
    server = synthetic_op_times(graph, per_unit=sec_per_unit, speedup=speedup)
    return make_profile(graph, robot, server, latency=latency)


def random_model(rng: np.random.Generator, n_layers: int, group: int = 1) -> ModelGraph:
    """A random valid chain (with occasional skip-adds) of ``n_layers`` layers."""
    weights: dict[str, np.ndarray] = {}
    layers: list[dict] = []
    if rng.random() < 0.7:
        dims = [int(rng.integers(1, 4)), int(rng.integers(4, 11)), int(rng.integers(3, 8))]
    else:
        dims = [int(rng.integers(2, 9)), int(rng.integers(2, 7))]
    shapes: list[tuple[str, list[int]]] = [("input", list(dims))]
    cur = list(dims)
    while len(layers) < n_layers:
        name = f"l{len(layers)}"
        last = len(layers) == n_layers - 1
        choices = ["act", "add"]
        if len(cur) == 3:
            choices += ["conv", "conv", "pool", "flatten"]
        if len(cur) == 2:
            choices += ["matmul", "matmul", "softmax"]
        if len(cur) == 3 and last:
            choices.append("softmax")
        op = choices[int(rng.integers(len(choices)))]
        entry: dict = {"name": name}
        if op == "act":
            entry["op"] = ["relu", "sigmoid", "silu"][int(rng.integers(3))]
        elif op == "add":
            entry["op"] = "add"
            same = [n for n, s in shapes[:-1] if s == cur]
            if same and rng.random() < 0.6:
                entry["parents"] = [shapes[-1][0], same[int(rng.integers(len(same)))]]
            else:
                key = f"{name}.rhs"
                weights[key] = rng.standard_normal(cur).astype(np.float32)
                entry["rhs"] = key
        elif op == "conv":
            c_in, h, w = cur
            k = int(rng.integers(1, 4))
            d = 2 if k > 1 and rng.random() < 0.25 else 1
            s = 2 if rng.random() < 0.3 else 1
            p = int(rng.integers(0, d * (k - 1) + 1))
            if (h + 2 * p - d * (k - 1) - 1) < 0 or (w + 2 * p - d * (k - 1) - 1) < 0:
                k, d, s, p = 1, 1, 1, 0
            c_out = int(rng.integers(1, 5))
            wk, bk = f"{name}.w", f"{name}.b"
            weights[wk] = (rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(c_in * k * k)).astype(np.float32)
            weights[bk] = (rng.standard_normal(c_out) * 0.1).astype(np.float32)
            entry.update(op="conv2d", weight=wk, bias=bk, stride=s, padding=p, dilation=d)
        elif op == "pool":
            c, h, w = cur
            if h >= 2 and w >= 2 and rng.random() < 0.6:
                entry.update(op="maxpool2d", kernel=2, stride=2)
            else:
                entry.update(op="maxpool2d", kernel=3, stride=1, padding=1)
        elif op == "flatten":
            entry["op"] = "flatten"
        elif op == "matmul":
            n = int(rng.integers(1, 7))
            key = f"{name}.w"
            weights[key] = (rng.standard_normal((cur[-1], n)) / np.sqrt(cur[-1])).astype(np.float32)
            entry.update(op="matmul", weight=key)
            if rng.random() < 0.5:
                weights[f"{name}.b"] = rng.standard_normal(n).astype(np.float32)
                entry["bias"] = f"{name}.b"
        else:
            entry["op"] = "softmax"
        layers.append(entry)
        graph = build_model({"input": dims, "layers": layers}, weights, group=group)
        cur = list(graph.layers[-1].output_spec.dims)
        shapes.append((name, cur))
    return build_model({"input": dims, "layers": layers}, weights, group=group)


def random_profile(rng: np.random.Generator, graph: ModelGraph, latency: float = 1e-4,
                   header_bytes: int = 64) -> CostProfile:
    robot = [float(rng.uniform(1e-5, 1e-3)) for _ in graph.layers]
    speed = float(rng.uniform(1.0, 20.0))
    server = [t / speed * float(rng.uniform(0.5, 1.5)) for t in robot]
    return make_profile(graph, robot, server, latency=latency, header_bytes=header_bytes)
