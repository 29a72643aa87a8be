"""Operator-to-device scheduling.

A genome holds one split point per layer: the robot computes operators
``[0, s)`` and the server ``[s, L)``.  For a global layer ``L = 1`` and the
split is just a device bit.  ``derive_assignment`` turns a genome into the
final robot/server operator sets, adding redundant computation wherever a
no-transfer layer needs it.  ``evaluate_plan`` then prices the assignment
with the two-device completion-time recursion.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cost import (
    CostProfile, PowerStates, Timeline, energy_per_inference, no_transfer_layers,
    pi_set, profile_from_dict, profile_to_dict,
)
from .graph import INPUT_ID, ModelGraph
from .lop import CoverageError, Dependencies, OperatorSet, runs, span_mask

PLANBOOK_FORMAT = "opsplit-planbook"
PLANBOOK_VERSION = 1
EXHAUSTIVE_LIMIT = 10**6

TO_SERVER = "robot->server"
TO_ROBOT = "server->robot"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class DEConfig:
    population: int = 30
    generations: int = 200
    crossover: float = 0.9
    weight: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise PlanError("population must be >= 4")
        if not 0 <= self.crossover <= 1:
            raise PlanError("crossover rate must lie in [0, 1]")
        if not 0 < self.weight <= 2:
            raise PlanError("differential weight must lie in (0, 2]")
        if self.generations < 0:
            raise PlanError("generations must be >= 0")


@dataclass(frozen=True)
class Transfer:
    """Operators of ``source`` sent for consumer ``layer``.

    ``layer`` is ``None`` for the final result returned to the robot.
    """

    layer: int | None
    source: int
    direction: str
    mask: int

    def ranges(self) -> list[tuple[int, int]]:
        return list(runs(self.mask))


@dataclass(frozen=True)
class Assignment:
    robot: tuple[int, ...]
    server: tuple[int, ...]


@dataclass
class SchedulePlan:
    bandwidth: float
    robot: tuple[int, ...]
    server: tuple[int, ...]
    transfers: tuple[Transfer, ...]
    t_robot: tuple[float, ...]
    t_server: tuple[float, ...]
    objective: float
    energy: float = 0.0
    genome: tuple[int, ...] | None = None
    flags: tuple[str, ...] = ()

    def X(self, i: int) -> OperatorSet:
        return OperatorSet(i, self.robot[i])

    def Y(self, i: int) -> OperatorSet:
        return OperatorSet(i, self.server[i])

    def M(self, i: int) -> dict[int, OperatorSet]:
        """Parent operators the robot receives before layer ``i``."""
        return {t.source: OperatorSet(t.source, t.mask) for t in self.transfers
                if t.layer == i and t.direction == TO_ROBOT}

    def N(self, i: int) -> dict[int, OperatorSet]:
        return {t.source: OperatorSet(t.source, t.mask) for t in self.transfers
                if t.layer == i and t.direction == TO_SERVER}

    @property
    def terminal(self) -> Transfer | None:
        return next((t for t in self.transfers if t.layer is None), None)

    def robot_ops(self) -> int:
        return sum(m.bit_count() for m in self.robot)

    def server_ops(self) -> int:
        return sum(m.bit_count() for m in self.server)

    def robot_share(self) -> float:
        """Fraction of all scheduled operator executions done on the robot."""
        total = self.robot_ops() + self.server_ops()
        return self.robot_ops() / total if total else 1.0


# --------------------------------------------------------------------------
# Genome -> assignment

class Scheduler:
    """Holds per-graph precomputation shared by every evaluation."""

    def __init__(self, graph: ModelGraph, profile: CostProfile, pi: Iterable[int] | None = None,
                 power: PowerStates = PowerStates()):
        if len(profile.robot_op_time) != len(graph):
            raise PlanError("profile does not match the model's layer count")
        self.graph = graph
        self.profile = profile
        self.power = power
        self.deps = Dependencies(graph)
        self.pi = frozenset(pi_set(graph, profile) if pi is None else pi)
        self.locked = no_transfer_layers(graph, self.pi)
        self.sizes = tuple(l.operator_count for l in graph.layers)
        self._children = [tuple(c for c in graph.children(i)) for i in range(len(graph))]

    # genome helpers
    def clamp(self, genome: Sequence[float]) -> tuple[int, ...]:
        return tuple(min(max(int(round(g)), 0), n) for g, n in zip(genome, self.sizes))

    def genome_space(self) -> int:
        return math.prod(n + 1 for n in self.sizes)

    def cut_genome(self, k: int) -> tuple[int, ...]:
        """Pipeline cut: layers before ``k`` on the robot, the rest on the server."""
        return tuple(n if i < k else 0 for i, n in enumerate(self.sizes))

    def seeds(self) -> list[tuple[int, ...]]:
        return [self.cut_genome(k) for k in range(len(self.sizes), -1, -1)]

    def derive(self, genome: Sequence[int]) -> Assignment:
        graph, deps = self.graph, self.deps
        n = len(graph)
        final = n - 1
        X = [span_mask(0, s) for s in genome]
        Y = [span_mask(s, size) for s, size in zip(genome, self.sizes)]
        if final in self.pi:
            # the result may not cross the link either
            X[final], Y[final] = graph.layers[final].full_mask, 0
        for i in range(final, -1, -1):
            if i != final:
                robot_need = server_need = 0
                for c in self._children[i]:
                    robot_need |= deps.need(c, i, X[c])
                    server_need |= deps.need(c, i, Y[c])
                both = X[i] & Y[i]
                Y[i] &= ~(both & ~server_need)
                both = X[i] & Y[i]
                X[i] &= ~(both & ~robot_need)
            if i in self.locked:
                for p in deps.parents[i]:
                    X[p] |= deps.need(i, p, X[i])
                    Y[p] |= deps.need(i, p, Y[i])
        return Assignment(tuple(X), tuple(Y))

    # transfers and timing
    def transfers(self, a: Assignment) -> list[Transfer]:
        graph, deps = self.graph, self.deps
        have_r: dict[int, int] = {INPUT_ID: graph.input.full_mask}
        have_s: dict[int, int] = {INPUT_ID: 0}
        out: list[Transfer] = []
        for i, layer in enumerate(graph.layers):
            if (a.robot[i] | a.server[i]) != layer.full_mask:
                raise CoverageError(f"layer {i}: robot and server sets do not cover every operator")
            for p in deps.parents[i]:
                m = deps.need(i, p, a.robot[i]) & ~have_r[p]
                if m:
                    out.append(Transfer(i, p, TO_ROBOT, m))
                    have_r[p] |= m
                nn = deps.need(i, p, a.server[i]) & ~have_s[p]
                if nn:
                    out.append(Transfer(i, p, TO_SERVER, nn))
                    have_s[p] |= nn
            have_r[i] = a.robot[i]
            have_s[i] = a.server[i]
        final = graph.layers[-1]
        rest = final.full_mask & ~a.robot[-1]
        if rest:
            out.append(Transfer(None, final.id, TO_ROBOT, rest))
        return out

    def wire_bytes(self, t: Transfer) -> int:
        node = self.graph.node(t.source)
        total = 0
        for a, b in runs(t.mask):
            total += node.slice_bytes(*node.ops_range(a, b)) + self.profile.header_bytes
        return total

    def timeline(self, a: Assignment, transfers: Sequence[Transfer], bandwidth: float):
        """Completion-time recursion.

        Returns ``(T_robot, T_server, objective, robot compute intervals,
        robot link intervals)``.
        """
        if not bandwidth > 0:
            raise PlanError(f"bandwidth must be > 0, got {bandwidth}")
        prof = self.profile
        n = len(self.graph)
        t_r = [0.0] * n
        t_s = [0.0] * n
        free = {TO_ROBOT: 0.0, TO_SERVER: 0.0}
        compute_iv: list[tuple[float, float]] = []
        link_iv: list[tuple[float, float]] = []
        by_layer: dict[int | None, list[Transfer]] = {}
        for t in transfers:
            by_layer.setdefault(t.layer, []).append(t)

        def send(t: Transfer) -> float:
            if t.direction == TO_ROBOT:
                ready = t_s[t.source]
            else:
                ready = 0.0 if t.source == INPUT_ID else t_r[t.source]
            start = max(ready, free[t.direction])
            end = start + self.wire_bytes(t) * 8.0 / bandwidth
            free[t.direction] = end
            link_iv.append((start, end))
            return end + prof.latency

        prev_r = prev_s = 0.0
        for i in range(n):
            ready_r, ready_s = prev_r, prev_s
            for t in by_layer.get(i, ()):
                arrival = send(t)
                if t.direction == TO_ROBOT:
                    ready_r = max(ready_r, arrival)
                else:
                    ready_s = max(ready_s, arrival)
            work_r = a.robot[i].bit_count() * prof.robot_op_time[i]
            work_s = a.server[i].bit_count() * prof.server_op_time[i]
            t_r[i] = ready_r + work_r
            t_s[i] = ready_s + work_s
            if work_r > 0:
                compute_iv.append((ready_r, t_r[i]))
            prev_r, prev_s = t_r[i], t_s[i]
        objective = t_r[-1]
        for t in by_layer.get(None, ()):
            objective = max(objective, send(t))
        return t_r, t_s, objective, compute_iv, link_iv

    def evaluate(self, a: Assignment, bandwidth: float, genome: Sequence[int] | None = None,
                 flags: tuple[str, ...] = ()) -> SchedulePlan:
        transfers = self.transfers(a)
        t_r, t_s, obj, comp, link = self.timeline(a, transfers, bandwidth)
        energy = energy_per_inference(Timeline.from_intervals(comp, link, 0.0, obj), self.power)
        return SchedulePlan(
            bandwidth=float(bandwidth), robot=a.robot, server=a.server, transfers=tuple(transfers),
            t_robot=tuple(t_r), t_server=tuple(t_s), objective=obj, energy=energy,
            genome=tuple(genome) if genome is not None else None, flags=flags,
        )

    def objective(self, genome: Sequence[int], bandwidth: float) -> float:
        a = self.derive(genome)
        return self.timeline(a, self.transfers(a), bandwidth)[2]

    def rank(self, genome: tuple[int, ...], obj: float) -> tuple:
        """Sort key: lower objective, then more robot work, then robot work at earlier layers."""
        return (round(obj, 12), -sum(genome), tuple(-g for g in genome))


# --------------------------------------------------------------------------
# Public operations

def derive_assignment(graph: ModelGraph, profile: CostProfile, genome: Sequence[int],
                      pi: Iterable[int] | None = None) -> Assignment:
    sched = Scheduler(graph, profile, pi)
    return sched.derive(sched.clamp(genome))


def evaluate_plan(
    graph: ModelGraph,
    profile: CostProfile,
    bandwidth: float,
    robot: Sequence[OperatorSet | int],
    server: Sequence[OperatorSet | int],
    power: PowerStates = PowerStates(),
) -> SchedulePlan:
    """Price an explicit assignment of operators to devices."""
    def masks(sets):
        return tuple(s.mask if isinstance(s, OperatorSet) else int(s) for s in sets)
    a = Assignment(masks(robot), masks(server))
    if len(a.robot) != len(graph) or len(a.server) != len(graph):
        raise PlanError("one robot and one server set per layer required")
    return Scheduler(graph, profile, power=power).evaluate(a, bandwidth)


def plan_violations(plan: SchedulePlan, graph: ModelGraph, pi: Iterable[int] | None = None) -> list[str]:
    """Everything wrong with ``plan``; an empty list means it is executable."""
    deps = Dependencies(graph)
    locked = no_transfer_layers(graph, frozenset(pi_set(graph) if pi is None else pi))
    problems = []
    have_r = {INPUT_ID: graph.input.full_mask}
    have_s = {INPUT_ID: 0}
    incoming: dict[tuple[int | None, int, str], int] = {}
    for t in plan.transfers:
        incoming[(t.layer, t.source, t.direction)] = incoming.get((t.layer, t.source, t.direction), 0) | t.mask
    for i, layer in enumerate(graph.layers):
        if (plan.robot[i] | plan.server[i]) != layer.full_mask:
            problems.append(f"layer {i}: coverage")
        for p in deps.parents[i]:
            m = incoming.get((i, p, TO_ROBOT), 0)
            nn = incoming.get((i, p, TO_SERVER), 0)
            if m & have_r[p] or nn & have_s[p]:
                problems.append(f"layer {i}: transfer of operators already held")
            if m and (m & ~(plan.server[p] if p != INPUT_ID else 0)):
                problems.append(f"layer {i}: server sends operators of {p} it never computes")
            if nn and p != INPUT_ID and nn & ~plan.robot[p]:
                problems.append(f"layer {i}: robot sends operators of {p} it never computes")
            have_r[p] |= m
            have_s[p] |= nn
            if deps.need(i, p, plan.robot[i]) & ~have_r[p]:
                problems.append(f"layer {i}: robot lacks inputs from {p}")
            if deps.need(i, p, plan.server[i]) & ~have_s[p]:
                problems.append(f"layer {i}: server lacks inputs from {p}")
            if i in locked and (m or nn):
                problems.append(f"layer {i}: transfer into a no-transfer layer")
        have_r[i] = plan.robot[i]
        have_s[i] = plan.server[i]
    final = graph.layers[-1]
    term = plan.terminal
    got = plan.robot[-1] | (term.mask if term else 0)
    if got != final.full_mask:
        problems.append("final result not resident on the robot")
    if term and term.mask & ~plan.server[-1]:
        problems.append("terminal transfer of operators the server never computes")
    if term and final.id in frozenset(pi_set(graph) if pi is None else pi):
        problems.append("final result of a no-transfer layer crosses the link")
    return problems


def solve_de(graph: ModelGraph, profile: CostProfile, bandwidth: float,
             pi: Iterable[int] | None = None, config: DEConfig = DEConfig(),
             power: PowerStates = PowerStates()) -> SchedulePlan:
    """Differential evolution (rand/1/bin) over split-point genomes.

    Every pipeline cut, including all-local and all-server, is in the
    initial population, so the result is never worse than any of them.
    """
    sched = Scheduler(graph, profile, pi, power)
    rng = np.random.default_rng(config.seed)
    dim = len(sched.sizes)
    upper = np.array(sched.sizes, dtype=float)
    cache: dict[tuple[int, ...], float] = {}
    best: list = [None, math.inf, None]

    def score(g: tuple[int, ...]) -> float:
        obj = cache.get(g)
        if obj is None:
            obj = sched.objective(g, bandwidth)
            cache[g] = obj
            key = sched.rank(g, obj)
            if best[2] is None or key < best[2]:
                best[:] = [g, obj, key]
        return obj

    pop = [tuple(s) for s in dict.fromkeys(sched.seeds())]
    size = max(config.population, len(pop))
    while len(pop) < size:
        pop.append(sched.clamp(rng.uniform(0, upper + 1 - 1e-9) - 0.5))
    fit = [score(g) for g in pop]
    arr = np.array(pop, dtype=float)
    for _ in range(config.generations):
        for j in range(size):
            r1, r2, r3 = rng.choice([k for k in range(size) if k != j], 3, replace=False)
            mutant = arr[r1] + config.weight * (arr[r2] - arr[r3])
            cross = rng.random(dim) < config.crossover
            cross[rng.integers(dim)] = True
            trial = sched.clamp(np.where(cross, mutant, arr[j]))
            f = score(trial)
            if f <= fit[j]:
                arr[j] = trial
                fit[j] = f
    g = best[0]
    return sched.evaluate(sched.derive(g), bandwidth, g, ("de",))


def solve_exhaustive(graph: ModelGraph, profile: CostProfile, bandwidth: float,
                     pi: Iterable[int] | None = None, power: PowerStates = PowerStates(),
                     limit: int = EXHAUSTIVE_LIMIT) -> SchedulePlan:
    """Enumerate every split-point genome; the reference optimum for small models."""
    sched = Scheduler(graph, profile, pi, power)
    if sched.genome_space() > limit:
        raise PlanError(f"search space of {sched.genome_space()} genomes exceeds {limit}")
    best_key, best_g = None, None
    for g in itertools.product(*(range(n + 1) for n in sched.sizes)):
        key = sched.rank(g, sched.objective(g, bandwidth))
        if best_key is None or key < best_key:
            best_key, best_g = key, g
    return sched.evaluate(sched.derive(best_g), bandwidth, best_g, ("exhaustive",))


def local_plan(graph: ModelGraph, profile: CostProfile, bandwidth: float,
               power: PowerStates = PowerStates()) -> SchedulePlan:
    sched = Scheduler(graph, profile, power=power)
    g = sched.cut_genome(len(graph))
    return sched.evaluate(sched.derive(g), bandwidth, g, ("local",))


def cut_plan(graph: ModelGraph, profile: CostProfile, bandwidth: float, k: int,
             pi: Iterable[int] | None = None, power: PowerStates = PowerStates()) -> SchedulePlan:
    """Pipeline-parallel plan with layers ``< k`` on the robot."""
    if not 0 <= k <= len(graph):
        raise PlanError(f"cut {k} outside 0..{len(graph)}")
    sched = Scheduler(graph, profile, pi, power)
    g = sched.cut_genome(k)
    return sched.evaluate(sched.derive(g), bandwidth, g, (f"cut:{k}",))


def best_cut_plan(graph: ModelGraph, profile: CostProfile, bandwidth: float,
                  pi: Iterable[int] | None = None, power: PowerStates = PowerStates()) -> SchedulePlan:
    plans = [cut_plan(graph, profile, bandwidth, k, pi, power) for k in range(len(graph), -1, -1)]
    return min(plans, key=lambda p: round(p.objective, 12))


# --------------------------------------------------------------------------
# Plan books

@dataclass
class PlanBook:
    buckets: tuple[float, ...]
    plans: tuple[SchedulePlan, ...]
    profile: CostProfile
    model_checksum: str
    config: DEConfig = field(default_factory=DEConfig)

    def __post_init__(self):
        if not self.buckets:
            raise PlanError("plan book needs at least one bucket")
        if any(b <= 0 for b in self.buckets):
            raise PlanError("bucket bandwidths must be > 0")
        if any(b >= c for b, c in zip(self.buckets, self.buckets[1:])):
            raise PlanError("buckets must be strictly increasing")
        if len(self.plans) != len(self.buckets):
            raise PlanError("one plan per bucket required")

    def __len__(self) -> int:
        return len(self.buckets)

    def select(self, predicted_bps: float) -> int:
        """Largest bucket not above the prediction, else the lowest bucket."""
        idx = 0
        for k, b in enumerate(self.buckets):
            if b <= predicted_bps:
                idx = k
        return idx

    @property
    def checksum(self) -> str:
        return hashlib.sha256(dumps_planbook(self).encode()).hexdigest()


def build_planbook(graph: ModelGraph, profile: CostProfile, buckets: Sequence[float],
                   config: DEConfig = DEConfig(), exhaustive: bool = False,
                   power: PowerStates = PowerStates()) -> PlanBook:
    buckets = tuple(float(b) for b in buckets)
    if not buckets:
        raise PlanError("no bandwidth buckets given")
    if len(set(buckets)) != len(buckets):
        raise PlanError("duplicate bandwidth buckets")
    if any(b <= 0 for b in buckets):
        raise PlanError("bucket bandwidths must be > 0")
    if list(buckets) != sorted(buckets):
        raise PlanError("buckets must be ascending")
    if exhaustive:
        plans = tuple(solve_exhaustive(graph, profile, b, power=power) for b in buckets)
    else:
        plans = tuple(solve_de(graph, profile, b, config=config, power=power) for b in buckets)
    return PlanBook(buckets, plans, profile, graph.checksum, config)


def _ranges(mask: int) -> list[list[int]]:
    return [[a, b] for a, b in runs(mask)]


def _mask(ranges: Sequence[Sequence[int]]) -> int:
    m = 0
    for a, b in ranges:
        m |= span_mask(int(a), int(b))
    return m


def plan_to_dict(plan: SchedulePlan) -> dict:
    return {
        "bandwidth_bps": plan.bandwidth,
        "objective_s": plan.objective,
        "energy_j": plan.energy,
        "genome": list(plan.genome) if plan.genome is not None else None,
        "flags": list(plan.flags),
        "layers": [
            {"X": _ranges(x), "Y": _ranges(y), "T_robot": tr, "T_server": ts}
            for x, y, tr, ts in zip(plan.robot, plan.server, plan.t_robot, plan.t_server)
        ],
        "transfers": [
            {"layer": t.layer, "source": t.source, "direction": t.direction, "ops": _ranges(t.mask)}
            for t in plan.transfers
        ],
    }


def plan_from_dict(doc: dict) -> SchedulePlan:
    layers = doc["layers"]
    return SchedulePlan(
        bandwidth=float(doc["bandwidth_bps"]),
        robot=tuple(_mask(l["X"]) for l in layers),
        server=tuple(_mask(l["Y"]) for l in layers),
        transfers=tuple(Transfer(t["layer"], int(t["source"]), t["direction"], _mask(t["ops"]))
                        for t in doc["transfers"]),
        t_robot=tuple(float(l["T_robot"]) for l in layers),
        t_server=tuple(float(l["T_server"]) for l in layers),
        objective=float(doc["objective_s"]),
        energy=float(doc.get("energy_j", 0.0)),
        genome=tuple(doc["genome"]) if doc.get("genome") is not None else None,
        flags=tuple(doc.get("flags", ())),
    )


def dumps_planbook(book: PlanBook) -> str:
    c = book.config
    doc = {
        "format": PLANBOOK_FORMAT, "version": PLANBOOK_VERSION,
        "model_checksum": book.model_checksum,
        "buckets_bps": list(book.buckets),
        "de": {"population": c.population, "generations": c.generations,
               "crossover": c.crossover, "weight": c.weight, "seed": c.seed},
        "profile": profile_to_dict(book.profile),
        "plans": [plan_to_dict(p) for p in book.plans],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def loads_planbook(text: str) -> PlanBook:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanError(f"plan book is not valid JSON: {exc}") from None
    if doc.get("format") != PLANBOOK_FORMAT:
        raise PlanError("not a plan book")
    if doc.get("version") != PLANBOOK_VERSION:
        raise PlanError(f"unsupported plan book version {doc.get('version')!r}")
    return PlanBook(
        buckets=tuple(float(b) for b in doc["buckets_bps"]),
        plans=tuple(plan_from_dict(p) for p in doc["plans"]),
        profile=profile_from_dict(doc["profile"]),
        model_checksum=doc["model_checksum"],
        config=DEConfig(**doc["de"]),
    )


def save_planbook(book: PlanBook, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_planbook(book) + "\n")


def load_planbook(path: str | os.PathLike) -> PlanBook:
    with open(path, encoding="utf-8") as fh:
        return loads_planbook(fh.read())


def parse_buckets(text: str) -> list[float]:
    """``"10,50,100Mbps"`` -> bits per second.  Units: bps, kbps, Mbps, Gbps."""
    units = {"gbps": 1e9, "mbps": 1e6, "kbps": 1e3, "bps": 1.0}
    body = text.strip()
    scale = 1e6
    for suffix, mult in units.items():
        if body.lower().endswith(suffix):
            body, scale = body[: -len(suffix)], mult
            break
    try:
        values = [float(v) * scale for v in body.split(",") if v.strip()]
    except ValueError:
        raise PlanError(f"cannot parse buckets {text!r}") from None
    if not values:
        raise PlanError("no buckets given")
    return values
