from __future__ import annotations

import numpy as np
import pytest

from opsplit.graph import build_model
from opsplit.models import demo_model, demo_profile, random_model, random_profile
from opsplit.cost import make_profile

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_instances(count: int, max_layers: int = 4, max_ops: int = 8, seed: int = 1000):
    """Seeded (graph, profile, bandwidth) triples with at most ``max_ops`` operators per layer."""
    out = []
    s = seed
    while len(out) < count:
        rng = np.random.default_rng(s)
        s += 1
        n = int(rng.integers(2, max_layers + 1))
        g = random_model(rng, n)
        if max(layer.operator_count for layer in g.layers) > max_ops:
            continue
        prof = random_profile(rng, g)
        bw = float(10 ** rng.uniform(5, 8))
        out.append((g, prof, bw))
    return out


def two_layer_model():
    """Element-wise layer of 8 row operators followed by a global softmax."""
    g = build_model({"input": [8, 15625], "layers": [
        {"name": "act", "op": "relu"},
        {"name": "soft", "op": "softmax"},
    ]}, {})
    prof = make_profile(g, [0.002, 0.003], [0.0005, 0.001], latency=0.0, header_bytes=0)
    return g, prof


@pytest.fixture(scope="session")
def demo():
    g = demo_model()
    return g, demo_profile(g)


@pytest.fixture(scope="session")
def two_layer():
    return two_layer_model()
