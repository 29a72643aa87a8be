"""Per-endpoint task lists derived from a schedule plan."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

from ..engine import Fragment, run_layer_fragment
from ..graph import ModelGraph
from ..lop import OperatorSet, required_input, runs
from ..scheduler import TO_ROBOT, TO_SERVER, SchedulePlan, Transfer

Role = Literal["robot", "server"]


@dataclass(frozen=True)
class ComputeTask:
    layer: int
    mask: int

    def runs(self) -> list[tuple[int, int]]:
        return list(runs(self.mask))


@dataclass(frozen=True)
class SendTask:
    transfer: Transfer
    rows: tuple[tuple[int, int], ...]

    @property
    def terminal(self) -> bool:
        return self.transfer.layer is None


@dataclass(frozen=True)
class Program:
    role: Role
    compute: tuple[ComputeTask, ...]
    sends: tuple[SendTask, ...]
    receives: tuple[SendTask, ...]


def _rows(graph: ModelGraph, t: Transfer) -> tuple[tuple[int, int], ...]:
    node = graph.node(t.source)
    return tuple(node.ops_range(a, b) for a, b in runs(t.mask))


def role_program(graph: ModelGraph, plan: SchedulePlan, role: Role) -> Program:
    own = plan.robot if role == "robot" else plan.server
    outgoing = TO_SERVER if role == "robot" else TO_ROBOT
    compute = tuple(ComputeTask(i, m) for i, m in enumerate(own) if m)
    sends, receives = [], []
    for t in plan.transfers:
        task = SendTask(t, _rows(graph, t))
        (sends if t.direction == outgoing else receives).append(task)
    return Program(role, compute, tuple(sends), tuple(receives))


def input_rows(graph: ModelGraph, layer_id: int, a: int, b: int) -> dict[int, tuple[int, int]]:
    """Rows of each parent needed for operators ``[a, b)`` of a layer."""
    layer = graph.layers[layer_id]
    if layer.is_global:
        return {p: (0, graph.node(p).axis_len) for p in dict.fromkeys(layer.parents)}
    return required_input(layer, OperatorSet.span(layer_id, a, b), graph)


def run_ops(graph: ModelGraph, layer_id: int, a: int, b: int,
            fetch: Callable[[int, int, int], Fragment], strict: bool = False) -> Fragment:
    """Compute operators ``[a, b)`` of a layer, pulling inputs through ``fetch``."""
    layer = graph.layers[layer_id]
    inputs = {p: fetch(p, lo, hi) for p, (lo, hi) in input_rows(graph, layer_id, a, b).items()}
    lo, hi = layer.ops_range(a, b)
    return run_layer_fragment(layer, graph, inputs, lo, hi, strict=strict)
