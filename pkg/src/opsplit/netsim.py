"""Trace-driven link simulation.

Bandwidth traces are piecewise constant between samples.  ``SimLink``
integrates a transfer's bits over the trace, so an outage stalls a transfer
rather than dropping it.  ``EventLoop`` is the single-threaded event core
shared by the plan replay and the simulated runtime.
"""
from __future__ import annotations

import bisect
import heapq
import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SAMPLE_PERIOD = 0.1
INDOOR_MEAN = 93e6
OUTDOOR_MEAN = 73e6
EWMA_ALPHA = 0.3


class TraceError(ValueError):
    pass


class TraceExhausted(RuntimeError):
    """A transfer ran past the end of a trace that does not hold its last value."""


@dataclass(frozen=True)
class BandwidthTrace:
    times: tuple[float, ...]
    bps: tuple[float, ...]
    name: str = "trace"

    def __post_init__(self):
        if not self.times or len(self.times) != len(self.bps):
            raise TraceError("trace needs matching, non-empty time and bandwidth columns")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise TraceError("trace timestamps must be strictly increasing")
        if any(not (v >= 0) or math.isinf(v) for v in self.bps):
            raise TraceError("bandwidth samples must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def period(self) -> float:
        if len(self.times) > 1:
            return self.times[-1] - self.times[-2]
        return SAMPLE_PERIOD

    @property
    def end(self) -> float:
        """Time at which the last sample stops holding."""
        return self.times[-1] + self.period

    def index(self, t: float) -> int:
        """Sample in force at time ``t`` (the first one before the trace starts)."""
        return max(bisect.bisect_right(self.times, t) - 1, 0)

    def at(self, t: float) -> float:
        return self.bps[self.index(t)]

    def mean(self) -> float:
        return float(np.mean(self.bps))

    def window(self, start: float, stop: float) -> list[float]:
        lo, hi = self.index(start), self.index(stop)
        return list(self.bps[lo:hi + 1])


def constant_trace(bps: float, duration: float, period: float = SAMPLE_PERIOD) -> BandwidthTrace:
    n = int(round(duration / period))
    if n < 1:
        raise TraceError("duration must cover at least one sample")
    return BandwidthTrace(tuple(round(k * period, 9) for k in range(n)), (float(bps),) * n, f"constant-{bps:g}")


def synth_trace(kind: str, duration: float, seed: int = 0, bps: float | None = None,
                period: float = SAMPLE_PERIOD) -> BandwidthTrace:
    """Generate ``constant``, ``indoor_like`` or ``outdoor_like`` traces.

    The two environment kinds are AR(1) processes rescaled to their target
    means; the outdoor one is noisier and has short outages close to zero.
    """
    if not duration > 0:
        raise TraceError("duration must be > 0")
    if kind == "constant":
        if bps is None:
            raise TraceError("constant trace needs a bandwidth")
        return constant_trace(bps, duration, period)
    n = max(int(round(duration / period)), 1)
    rng = np.random.default_rng(seed)
    if kind == "indoor_like":
        mean, rel_sd, phi, dip_rate = INDOOR_MEAN, 0.12, 0.9, 0.0
    elif kind == "outdoor_like":
        mean, rel_sd, phi, dip_rate = OUTDOOR_MEAN, 0.3, 0.85, 0.15
    else:
        raise TraceError(f"unknown trace kind {kind!r}")
    innov = rel_sd * math.sqrt(1 - phi * phi)
    x = np.empty(n)
    level = rng.normal(0.0, rel_sd)
    for k in range(n):
        level = phi * level + rng.normal(0.0, innov)
        x[k] = level
    values = mean * np.clip(1.0 + x, 0.05, None)
    if dip_rate:
        k = 0
        while k < n:
            if rng.random() < dip_rate * period:
                length = int(rng.integers(2, 8))
                values[k:k + length] = rng.uniform(0.0, 0.02 * mean, size=len(values[k:k + length]))
                k += length
            else:
                k += 1
    values *= mean / values.mean()
    return BandwidthTrace(tuple(round(k * period, 9) for k in range(n)),
                          tuple(float(v) for v in values), kind)


def load_trace(path: str | os.PathLike) -> BandwidthTrace:
    """Read ``t_seconds bandwidth_bps`` lines; ``#`` starts a comment."""
    times, values = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 2:
                raise TraceError(f"{path}:{lineno}: expected 't bps', got {line.strip()!r}")
            try:
                t, v = float(parts[0]), float(parts[1])
            except ValueError:
                raise TraceError(f"{path}:{lineno}: not a number") from None
            if v < 0:
                raise TraceError(f"{path}:{lineno}: negative bandwidth {v}")
            times.append(t)
            values.append(v)
    if not times:
        raise TraceError(f"{path}: empty trace")
    try:
        return BandwidthTrace(tuple(times), tuple(values), os.path.basename(os.fspath(path)))
    except TraceError as exc:
        raise TraceError(f"{path}: {exc}") from None


def save_trace(trace: BandwidthTrace, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {trace.name}\n")
        for t, v in zip(trace.times, trace.bps):
            fh.write(f"{t:.6f} {v:.3f}\n")


# --------------------------------------------------------------------------
# Links

class SimLink:
    """Two independent FIFO half-links sharing one bandwidth trace."""

    def __init__(self, trace: BandwidthTrace, latency: float = 0.0, hold_last: bool = False,
                 jitter: float = 0.0, seed: int = 0):
        if latency < 0 or jitter < 0:
            raise ValueError("latency and jitter must be >= 0")
        self.trace = trace
        self.latency = latency
        self.hold_last = hold_last
        self.jitter = jitter
        self._rng = np.random.default_rng(seed)
        self.tail: dict[str, float] = {}
        self.sent: dict[str, int] = {}
        self.busy: list[tuple[str, float, float]] = []

    @classmethod
    def constant(cls, bps: float, latency: float = 0.0) -> "SimLink":
        if not bps > 0:
            raise ValueError("bandwidth must be > 0")
        return cls(BandwidthTrace((0.0,), (float(bps),), f"constant-{bps:g}"), latency, hold_last=True)

    def drain_time(self, start: float, nbytes: float) -> float:
        """Time at which ``nbytes`` finish serializing when started at ``start``."""
        tr = self.trace
        bits = nbytes * 8.0
        if bits <= 0:
            return start
        k = tr.index(start)
        t = max(start, tr.times[0])
        n = len(tr)
        while True:
            seg_end = tr.times[k + 1] if k + 1 < n else tr.end
            last = k + 1 >= n
            rate = tr.bps[k]
            if last and self.hold_last:
                if rate <= 0:
                    raise TraceExhausted("trace ends in an outage")
                return t + bits / rate
            capacity = rate * (seg_end - t)
            if capacity >= bits and rate > 0:
                return t + bits / rate
            bits -= capacity
            if last:
                raise TraceExhausted(f"transfer outlasts trace {tr.name!r} ending at {tr.end:.3f} s")
            t = seg_end
            k += 1

    def transfer(self, direction: str, nbytes: float, enqueue_time: float) -> float:
        """Queue ``nbytes`` and return the delivery time at the far end."""
        if nbytes <= 0:
            raise ValueError("transfer needs a positive byte count")
        start = max(enqueue_time, self.tail.get(direction, 0.0))
        done = self.drain_time(start, nbytes)
        self.tail[direction] = done
        self.sent[direction] = self.sent.get(direction, 0) + int(nbytes)
        self.busy.append((direction, start, done))
        latency = self.latency
        if self.jitter:
            latency *= 1.0 + self._rng.uniform(-self.jitter, self.jitter)
        return done + latency


# --------------------------------------------------------------------------
# Event core

@dataclass(order=True)
class _Event:
    time: float
    seq: int
    action: Callable[[], None] = field(compare=False)


class EventLoop:
    """Deterministic discrete-event scheduler; ties run in scheduling order."""

    def __init__(self, log: list[str] | None = None):
        self.now = 0.0
        self._queue: list[_Event] = []
        self._seq = itertools.count()
        self.log_lines = log if log is not None else []

    def at(self, time: float, action: Callable[[], None]) -> None:
        if time < self.now - 1e-12:
            raise ValueError(f"cannot schedule at {time} before now {self.now}")
        heapq.heappush(self._queue, _Event(time, next(self._seq), action))

    def run(self) -> float:
        while self._queue:
            ev = heapq.heappop(self._queue)
            self.now = max(self.now, ev.time)
            ev.action()
        return self.now

    def log(self, event: str, **fields) -> None:
        body = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
        self.log_lines.append(f"{self.now:.9f} {event}" + (f" {body}" if body else ""))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


# --------------------------------------------------------------------------
# Bandwidth prediction

class EwmaPredictor:
    def __init__(self, alpha: float = EWMA_ALPHA):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        self.alpha = alpha
        self.value: float | None = None

    def update(self, sample: float) -> float:
        self.value = sample if self.value is None else self.alpha * sample + (1 - self.alpha) * self.value
        return self.value


def trace_predictions(trace: BandwidthTrace, alpha: float = EWMA_ALPHA) -> list[float]:
    """EWMA after each sample; entry ``k`` is the prediction using samples ``0..k``."""
    pred = EwmaPredictor(alpha)
    return [pred.update(v) for v in trace.bps]


def predict_at(trace: BandwidthTrace, t: float, alpha: float = EWMA_ALPHA,
               table: Sequence[float] | None = None) -> float:
    """Prediction from all samples taken at or before ``t``."""
    table = table if table is not None else trace_predictions(trace, alpha)
    return table[trace.index(t)]


def busy_intervals(link: SimLink, directions: Iterable[str] | None = None) -> list[tuple[float, float]]:
    wanted = None if directions is None else set(directions)
    return [(a, b) for d, a, b in link.busy if wanted is None or d in wanted]
