"""Operator dependency analysis.

Maps a set of operators of one layer to the parent-layer operators whose
outputs it reads.  Block-wise layers need a halo of extra input rows, which
is where redundant computation between the two devices comes from.

Operator sets are carried internally as int bitmasks (bit ``k`` = operator
``k``); ``OperatorSet`` is the public wrapper.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .graph import INPUT_ID, BlockWise, Layer, ModelError, ModelGraph, RowWise


class CoverageError(ValueError):
    """X_i and Y_i together do not cover every operator of a layer."""


def mask_of(ops: Iterable[int]) -> int:
    m = 0
    for k in ops:
        m |= 1 << k
    return m


def span_mask(start: int, stop: int) -> int:
    return ((1 << stop) - 1) & ~((1 << start) - 1) if stop > start else 0


def runs(mask: int) -> Iterator[tuple[int, int]]:
    """Contiguous ``[start, stop)`` runs of set bits, lowest first."""
    k = 0
    while mask:
        if mask & 1:
            start = k
            while mask & 1:
                mask >>= 1
                k += 1
            yield start, k
        else:
            low = (mask & -mask).bit_length() - 1
            mask >>= low
            k += low


@dataclass(frozen=True)
class OperatorSet:
    layer_id: int
    mask: int = 0

    @classmethod
    def of(cls, layer_id: int, ops: Iterable[int]) -> "OperatorSet":
        return cls(layer_id, mask_of(ops))

    @classmethod
    def span(cls, layer_id: int, start: int, stop: int) -> "OperatorSet":
        return cls(layer_id, span_mask(start, stop))

    @property
    def ops(self) -> frozenset[int]:
        return frozenset(k for a, b in runs(self.mask) for k in range(a, b))

    def runs(self) -> list[tuple[int, int]]:
        return list(runs(self.mask))

    def __len__(self) -> int:
        return self.mask.bit_count()

    def __bool__(self) -> bool:
        return self.mask != 0

    def __or__(self, other: "OperatorSet") -> "OperatorSet":
        return OperatorSet(self.layer_id, self.mask | other.mask)

    def __and__(self, other: "OperatorSet") -> "OperatorSet":
        return OperatorSet(self.layer_id, self.mask & other.mask)

    def __sub__(self, other: "OperatorSet") -> "OperatorSet":
        return OperatorSet(self.layer_id, self.mask & ~other.mask)

    def __repr__(self) -> str:
        body = ",".join(f"{a}" if b == a + 1 else f"{a}..{b - 1}" for a, b in runs(self.mask))
        return f"OperatorSet(layer={self.layer_id}, {{{body}}})"


def _parent_is_full(layer: Layer, index: int, parent: Layer) -> bool:
    """True when ``layer`` reads the whole output of its ``index``-th parent."""
    if layer.is_global or parent.is_global:
        return True
    kind = layer.kind
    if isinstance(kind, RowWise) and kind.op == "matmul" and index == 1:
        return True
    # the child's partition axis must line up with the parent's
    in_axis = 1 if isinstance(kind, BlockWise) else layer.axis
    return in_axis != parent.axis


def input_region(layer: Layer, parent: Layer, index: int, lo: int, hi: int) -> tuple[int, int]:
    """Rows ``[a, b)`` of ``parent``'s partition axis read by output rows ``[lo, hi)``."""
    if _parent_is_full(layer, index, parent):
        return 0, parent.axis_len
    kind = layer.kind
    if isinstance(kind, BlockWise):
        return window_rows(kind, lo, hi, parent.axis_len)
    return lo, hi


def window_rows(kind: BlockWise, lo: int, hi: int, h_in: int) -> tuple[int, int]:
    """First and one-past-last input rows a kernel tap lands on for outputs ``[lo, hi)``.

    With dilation the raw window can start or end on a padding row while
    the nearest real row is skipped by the taps, so both ends are searched.
    """
    k, s, p, d = kind.kernel[0], kind.stride[0], kind.padding[0], kind.dilation[0]

    def first_tap(o: int) -> int | None:
        t = o * s - p
        if t < 0:
            t += -(t // d) * d if t % d == 0 else (-t // d + 1) * d
        return t if t <= o * s - p + d * (k - 1) and t < h_in else None

    def last_tap(o: int) -> int | None:
        t = o * s - p + d * (k - 1)
        if t >= h_in:
            t -= -(-(t - h_in + 1) // d) * d
        return t if t >= o * s - p and t >= 0 else None

    a = None
    for o in range(lo, hi):
        if a is not None and o * s - p >= a:
            break
        t = first_tap(o)
        if t is not None and (a is None or t < a):
            a = t
    b = None
    for o in range(hi - 1, lo - 1, -1):
        if b is not None and o * s - p + d * (k - 1) <= b:
            break
        t = last_tap(o)
        if t is not None and (b is None or t > b):
            b = t
    if a is None or b is None:
        edge = min(max(lo * s - p, 0), h_in)
        return edge, edge
    return a, b + 1


def required_input(layer: Layer, ops: OperatorSet, graph: ModelGraph) -> dict[int, tuple[int, int]]:
    """Input rows each parent must supply so that ``ops`` can be computed.

    The operators are taken as their contiguous hull.  Global layers have no
    partial input and are rejected; callers treat them as needing
    everything.
    """
    if layer.is_global:
        raise ModelError(f"layer {layer.id} is global: it needs its whole input")
    if not ops:
        raise ValueError("empty operator set")
    if ops.mask >> layer.operator_count:
        raise ValueError(f"operators {ops} out of range for layer {layer.id}")
    first = (ops.mask & -ops.mask).bit_length() - 1
    last = ops.mask.bit_length()
    lo, hi = layer.ops_range(first, last)
    region: dict[int, tuple[int, int]] = {}
    for index, p in enumerate(layer.parents):
        a, b = input_region(layer, graph.node(p), index, lo, hi)
        if p in region:
            a, b = min(a, region[p][0]), max(b, region[p][1])
        region[p] = (a, b)
    return region


class Dependencies:
    """Memoized parent(.) for one graph, on bitmasks."""

    def __init__(self, graph: ModelGraph):
        self.graph = graph
        self.parents: list[tuple[int, ...]] = []
        self._full: list[dict[int, bool]] = []
        for layer in graph.layers:
            uniq = tuple(dict.fromkeys(layer.parents))
            self.parents.append(uniq)
            full = {}
            for p in uniq:
                idxs = [j for j, q in enumerate(layer.parents) if q == p]
                full[p] = any(_parent_is_full(layer, j, graph.node(p)) for j in idxs)
            self._full.append(full)
        self._memo: dict[tuple[int, int, int], int] = {}

    def need(self, i: int, p: int, mask: int) -> int:
        """Operators of parent ``p`` read by the operators ``mask`` of layer ``i``."""
        if not mask:
            return 0
        parent = self.graph.node(p)
        if self._full[i][p]:
            return parent.full_mask
        key = (i, p, mask)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        layer = self.graph.layers[i]
        out = 0
        for start, stop in runs(mask):
            lo, hi = layer.ops_range(start, stop)
            a = b = None
            for index, q in enumerate(layer.parents):
                if q == p:
                    ra, rb = input_region(layer, parent, index, lo, hi)
                    a = ra if a is None else min(a, ra)
                    b = rb if b is None else max(b, rb)
            pa, pb = parent.ops_covering(a, b)
            out |= span_mask(pa, pb)
        self._memo[key] = out
        return out


def parent_ops(layer: Layer, ops: OperatorSet, graph: ModelGraph,
               deps: Dependencies | None = None) -> dict[int, OperatorSet]:
    """parent(ops): for each parent layer, the operators whose outputs are read."""
    deps = deps or Dependencies(graph)
    return {p: OperatorSet(p, deps.need(layer.id, p, ops.mask)) for p in deps.parents[layer.id]}


def transfer_sets(
    graph: ModelGraph,
    layer_id: int,
    robot_ops: OperatorSet,
    server_ops: OperatorSet,
    robot_has: Mapping[int, OperatorSet],
    server_has: Mapping[int, OperatorSet],
    deps: Dependencies | None = None,
) -> tuple[dict[int, OperatorSet], dict[int, OperatorSet]]:
    """Per-parent (M_i, N_i).

    ``M[p]`` are parent operators the robot needs but does not hold (sent by
    the server), ``N[p]`` the converse.  ``robot_has``/``server_has`` give
    what each side holds per parent (its own computed set, plus anything it
    already received).  The raw input is always held by the robot only.
    """
    layer = graph.layers[layer_id]
    full = layer.full_mask
    if (robot_ops.mask | server_ops.mask) != full:
        raise CoverageError(f"layer {layer_id}: X ∪ Y does not cover all {layer.operator_count} operators")
    deps = deps or Dependencies(graph)
    m: dict[int, OperatorSet] = {}
    n: dict[int, OperatorSet] = {}
    for p in deps.parents[layer_id]:
        if p == INPUT_ID:
            rh, sh = graph.input.full_mask, 0
        else:
            rh, sh = robot_has[p].mask, server_has[p].mask
        m[p] = OperatorSet(p, deps.need(layer_id, p, robot_ops.mask) & ~rh)
        n[p] = OperatorSet(p, deps.need(layer_id, p, server_ops.mask) & ~sh)
    return m, n
