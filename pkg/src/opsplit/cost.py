"""Compute/transmit estimators, the no-transfer layer set and the energy model."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Sequence

import numpy as np

from .engine import run_layer_full
from .graph import INPUT_ID, BlockWise, Global, ModelGraph, RowWise
from .lop import OperatorSet

Device = Literal["robot", "server"]
PROFILE_FORMAT = "opsplit-profile"
PROFILE_VERSION = 1
DEFAULT_LATENCY = 1e-3
HEADER_BYTES = 64


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class PowerStates:
    """Robot power draw (W) per state."""

    inference: float = 13.35
    transmission: float = 4.25
    standby: float = 4.04
    nic_idle: float = 0.21

    def __post_init__(self):
        for name in ("inference", "transmission", "standby", "nic_idle"):
            if not getattr(self, name) > 0:
                raise ValueError(f"power {name} must be > 0")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "PowerStates":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(**{k: float(v) for k, v in doc.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class CostProfile:
    """Per-layer seconds per operator on each device plus link framing costs.

    ``latency`` is the fixed per-message delay and ``header_bytes`` the
    framing overhead charged per message.
    """

    robot_op_time: tuple[float, ...]
    server_op_time: tuple[float, ...]
    out_bytes_per_op: tuple[int, ...] = ()
    raw_input_bytes: int = 0
    latency: float = DEFAULT_LATENCY
    header_bytes: int = HEADER_BYTES
    model_checksum: str = ""

    def __post_init__(self):
        if len(self.robot_op_time) != len(self.server_op_time):
            raise ProfileError("robot and server tables differ in length")
        if any(t < 0 for t in self.robot_op_time + self.server_op_time):
            raise ProfileError("operator times must be >= 0")
        if self.latency < 0 or self.header_bytes < 0:
            raise ProfileError("latency and header size must be >= 0")

    def op_time(self, layer_id: int, device: Device) -> float:
        table = self.robot_op_time if device == "robot" else self.server_op_time
        return table[layer_id]


# --------------------------------------------------------------------------
# Profiling

def _op_units(graph: ModelGraph) -> list[float]:
    """Work units per operator: multiply-accumulates plus output elements."""
    units = []
    for layer in graph.layers:
        out = layer.output_spec.size
        kind = layer.kind
        if isinstance(kind, BlockWise):
            macs = out * kind.kernel[0] * kind.kernel[1] * (kind.in_channels if kind.op == "conv2d" else 1)
        elif isinstance(kind, (RowWise, Global)) and kind.op == "matmul":
            macs = out * layer.input_spec.dims[-1]
        else:
            macs = 0
        units.append((macs + out) / layer.operator_count)
    return units


def synthetic_op_times(
    graph: ModelGraph,
    per_op: float | Sequence[float] | None = None,
    per_unit: float | None = None,
    speedup: float = 1.0,
) -> tuple[float, ...]:
    """Deterministic cost table used instead of measuring.

    Either a flat ``per_op`` time (scalar or per layer), or ``per_unit``
    seconds per work unit (MACs + output elements).  ``speedup`` divides the
    result, e.g. 4.0 for a server four times faster than the robot.
    """
    if speedup <= 0:
        raise ProfileError("speedup must be > 0")
    if per_op is not None:
        if isinstance(per_op, (int, float)):
            base = [float(per_op)] * len(graph)
        else:
            base = [float(t) for t in per_op]
            if len(base) != len(graph):
                raise ProfileError("per-layer cost list has wrong length")
    elif per_unit is not None:
        base = [u * per_unit for u in _op_units(graph)]
    else:
        raise ProfileError("synthetic profile needs per_op or per_unit")
    return tuple(t / speedup for t in base)


def profile_model(graph: ModelGraph, repetitions: int = 5, seed: int = 0) -> tuple[float, ...]:
    """Measure median seconds per operator for every layer on this host."""
    if repetitions < 1:
        raise ProfileError("repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    outputs = {INPUT_ID: rng.standard_normal(graph.raw_input_spec.dims).astype(np.float32)}
    samples: list[list[float]] = [[] for _ in graph.layers]
    for rep in range(repetitions):
        if rep:
            outputs[INPUT_ID] = rng.standard_normal(graph.raw_input_spec.dims).astype(np.float32)
        for layer in graph.layers:
            inputs = [outputs[p] for p in layer.parents]
            t0 = time.perf_counter()
            outputs[layer.id] = run_layer_full(layer, inputs)
            samples[layer.id].append(time.perf_counter() - t0)
    return tuple(float(np.median(s)) / l.operator_count for s, l in zip(samples, graph.layers))


def make_profile(
    graph: ModelGraph,
    robot_op_time: Sequence[float],
    server_op_time: Sequence[float],
    latency: float = DEFAULT_LATENCY,
    header_bytes: int = HEADER_BYTES,
) -> CostProfile:
    if len(robot_op_time) != len(graph) or len(server_op_time) != len(graph):
        raise ProfileError("cost tables must have one entry per layer")
    return CostProfile(
        robot_op_time=tuple(float(t) for t in robot_op_time),
        server_op_time=tuple(float(t) for t in server_op_time),
        out_bytes_per_op=tuple(l.output_spec.nbytes // l.operator_count for l in graph.layers),
        raw_input_bytes=graph.raw_input_spec.nbytes,
        latency=latency,
        header_bytes=header_bytes,
        model_checksum=graph.checksum,
    )


# --------------------------------------------------------------------------
# Estimators

def compute_time(ops: OperatorSet, profile: CostProfile, device: Device) -> float:
    if not ops:
        return 0.0
    return len(ops) * profile.op_time(ops.layer_id, device)


def payload_bytes(graph: ModelGraph, ops: OperatorSet) -> int:
    node = graph.node(ops.layer_id)
    return sum(node.slice_bytes(*node.ops_range(a, b)) for a, b in ops.runs())


def message_bytes(graph: ModelGraph, ops: OperatorSet, profile: CostProfile) -> int:
    """Bytes on the wire: payload plus one frame header per contiguous run."""
    if not ops:
        return 0
    return payload_bytes(graph, ops) + profile.header_bytes * len(ops.runs())


def transmit_time(nbytes: float, bandwidth: float, link_free: float = 0.0, now: float = 0.0,
                  latency: float = 0.0) -> float:
    """Seconds from ``now`` until ``nbytes`` have arrived over a FIFO link.

    The transfer starts once the link has drained earlier messages
    (``link_free``).  Zero bytes cost nothing.
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    if nbytes <= 0:
        return 0.0
    start = max(now, link_free)
    return start + nbytes * 8.0 / bandwidth + latency - now


def pi_set(graph: ModelGraph, profile: CostProfile | None = None) -> frozenset[int]:
    """Layers whose output is larger than the raw input."""
    raw = profile.raw_input_bytes if profile and profile.raw_input_bytes else graph.raw_input_spec.nbytes
    return frozenset(l.id for l in graph.layers if l.output_spec.nbytes > raw)


def no_transfer_layers(graph: ModelGraph, pi: frozenset[int] | None = None) -> frozenset[int]:
    """Layers of ``pi`` that may not receive any cross-device data.

    Layers reading the raw input directly are exempt: what they receive is
    the raw input itself, never an enlarged intermediate.
    """
    pi = pi_set(graph) if pi is None else pi
    return frozenset(i for i in pi if INPUT_ID not in graph.layers[i].parents)


# --------------------------------------------------------------------------
# Energy

@dataclass(frozen=True)
class Timeline:
    """Robot-side durations that partition one inference's wall time."""

    compute: float
    transmit_exclusive: float
    idle: float
    transmit_overlapped: float = 0.0

    @property
    def wall(self) -> float:
        return self.compute + self.transmit_exclusive + self.idle

    @property
    def transmit(self) -> float:
        return self.transmit_exclusive + self.transmit_overlapped

    @classmethod
    def from_intervals(cls, compute: Iterable[tuple[float, float]],
                       transmit: Iterable[tuple[float, float]], start: float, end: float) -> "Timeline":
        """Classify ``[start, end)`` given robot compute and link-busy intervals."""
        comp = _union(compute, start, end)
        tx = _union(transmit, start, end)
        t_comp = sum(b - a for a, b in comp)
        t_tx = sum(b - a for a, b in tx)
        overlap = _intersection_length(comp, tx)
        excl = t_tx - overlap
        idle = max(0.0, (end - start) - t_comp - excl)
        return cls(t_comp, excl, idle, overlap)


def _union(intervals: Iterable[tuple[float, float]], lo: float, hi: float) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted((max(a, lo), min(b, hi)) for a, b in intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _intersection_length(xs: list[tuple[float, float]], ys: list[tuple[float, float]]) -> float:
    total, i, j = 0.0, 0, 0
    while i < len(xs) and j < len(ys):
        a = max(xs[i][0], ys[j][0])
        b = min(xs[i][1], ys[j][1])
        if b > a:
            total += b - a
        if xs[i][1] < ys[j][1]:
            i += 1
        else:
            j += 1
    return total


def energy_per_inference(timeline: Timeline, power: PowerStates = PowerStates()) -> float:
    """Joules drawn by the robot over one inference."""
    for name in ("compute", "transmit_exclusive", "idle", "transmit_overlapped"):
        if getattr(timeline, name) < 0:
            raise ValueError(f"negative duration {name}")
    return (power.inference * timeline.compute
            + power.transmission * timeline.transmit_exclusive
            + power.standby * timeline.idle
            + power.nic_idle * timeline.transmit_overlapped)


# --------------------------------------------------------------------------
# Profile files

def profile_to_dict(profile: CostProfile) -> dict:
    layers = {}
    for i, (r, s) in enumerate(zip(profile.robot_op_time, profile.server_op_time)):
        entry = {"robot_op_time": r, "server_op_time": s}
        if profile.out_bytes_per_op:
            entry["out_bytes_per_op"] = profile.out_bytes_per_op[i]
        layers[str(i)] = entry
    return {
        "format": PROFILE_FORMAT, "version": PROFILE_VERSION,
        "model_checksum": profile.model_checksum,
        "raw_input_bytes": profile.raw_input_bytes,
        "latency": profile.latency, "header_bytes": profile.header_bytes,
        "layers": layers,
    }


def profile_from_dict(doc: dict) -> CostProfile:
    if doc.get("format") != PROFILE_FORMAT:
        raise ProfileError(f"not an {PROFILE_FORMAT} document")
    if doc.get("version") != PROFILE_VERSION:
        raise ProfileError(f"unsupported profile version {doc.get('version')!r}")
    layers = doc["layers"]
    n = len(layers)
    try:
        rows = [layers[str(i)] for i in range(n)]
    except KeyError as exc:
        raise ProfileError(f"profile is missing layer {exc}") from None
    return CostProfile(
        robot_op_time=tuple(_time(r, "robot_op_time") for r in rows),
        server_op_time=tuple(_time(r, "server_op_time") for r in rows),
        out_bytes_per_op=tuple(int(r.get("out_bytes_per_op", 0)) for r in rows),
        raw_input_bytes=int(doc.get("raw_input_bytes", 0)),
        latency=float(doc.get("latency", DEFAULT_LATENCY)),
        header_bytes=int(doc.get("header_bytes", HEADER_BYTES)),
        model_checksum=doc.get("model_checksum", ""),
    )


def _time(row: dict, key: str) -> float:
    value = row.get(key)
    return -1.0 if value is None else float(value)


def dumps_profile(profile: CostProfile) -> str:
    return json.dumps(profile_to_dict(profile), sort_keys=True, indent=1)


def loads_profile(text: str) -> CostProfile:
    """Parse profile text.  A side that was never profiled is stored as null."""
    doc = json.loads(text)
    layers = doc.get("layers", {})
    partial = any(v.get(k) is None for v in layers.values() for k in ("robot_op_time", "server_op_time"))
    if partial:
        # keep the gaps recognizable for merge_profiles
        return _partial_from_dict(doc)
    return profile_from_dict(doc)


@dataclass(frozen=True)
class PartialProfile:
    """One device's column of a profile, as written by a single-role run."""

    op_time: dict[str, tuple[float, ...]] = field(default_factory=dict)
    base: dict = field(default_factory=dict)


def _partial_from_dict(doc: dict) -> PartialProfile:
    layers = doc["layers"]
    cols = {}
    for key in ("robot_op_time", "server_op_time"):
        values = [layers[str(i)].get(key) for i in range(len(layers))]
        if all(v is not None for v in values):
            cols[key.split("_")[0]] = tuple(float(v) for v in values)
    return PartialProfile(cols, {k: v for k, v in doc.items() if k != "layers"})


def merge_profiles(parts: Sequence[CostProfile | PartialProfile]) -> CostProfile:
    """Combine one complete profile, or a robot-only and a server-only one."""
    robot = server = None
    base: dict = {}
    for part in parts:
        if isinstance(part, CostProfile):
            robot = robot or part.robot_op_time
            server = server or part.server_op_time
            base = base or {"raw_input_bytes": part.raw_input_bytes, "latency": part.latency,
                            "header_bytes": part.header_bytes, "model_checksum": part.model_checksum}
        else:
            robot = robot or part.op_time.get("robot")
            server = server or part.op_time.get("server")
            base = base or part.base
    if robot is None or server is None:
        raise ProfileError("need operator times for both robot and server")
    return CostProfile(
        robot_op_time=robot, server_op_time=server,
        raw_input_bytes=int(base.get("raw_input_bytes", 0)),
        latency=float(base.get("latency", DEFAULT_LATENCY)),
        header_bytes=int(base.get("header_bytes", HEADER_BYTES)),
        model_checksum=base.get("model_checksum", ""),
    )


def save_profile(profile: CostProfile | PartialProfile, path: str | os.PathLike,
                 graph: ModelGraph | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if isinstance(profile, PartialProfile):
            fh.write(dumps_partial(profile, graph))
        else:
            fh.write(dumps_profile(profile))
        fh.write("\n")


def dumps_partial(part: PartialProfile, graph: ModelGraph | None) -> str:
    n = len(next(iter(part.op_time.values())))
    layers = {}
    for i in range(n):
        entry = {f"{dev}_op_time": part.op_time[dev][i] if dev in part.op_time else None
                 for dev in ("robot", "server")}
        if graph is not None:
            l = graph.layers[i]
            entry["out_bytes_per_op"] = l.output_spec.nbytes // l.operator_count
        layers[str(i)] = entry
    doc = {"format": PROFILE_FORMAT, "version": PROFILE_VERSION, **part.base, "layers": layers}
    return json.dumps(doc, sort_keys=True, indent=1)


def load_profile(path: str | os.PathLike) -> CostProfile | PartialProfile:
    with open(path, encoding="utf-8") as fh:
        return loads_profile(fh.read())


def with_link(profile: CostProfile, latency: float | None = None, header_bytes: int | None = None) -> CostProfile:
    changes = {}
    if latency is not None:
        changes["latency"] = latency
    if header_bytes is not None:
        changes["header_bytes"] = header_bytes
    return replace(profile, **changes)
