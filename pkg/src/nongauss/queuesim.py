"""Trace-driven FIFO tail-drop link.

Packets are replayed open loop at their recorded timestamps through one
link of fixed bandwidth; there is no feedback from losses to the sources.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence


from .stats import (
    DEFAULT_BIN_WIDTH,
    DEFAULT_FREQ_FRACTION,
    AnalysisError,
    hurst_periodogram,
    pearson,
    skewness,
    throughput_series,
)
from .trace import Trace

log = logging.getLogger(__name__)

DEFAULT_RHO = 0.6
DEFAULT_BUFFER = 50

IN_SYSTEM = "system"  # capacity counts the packet being transmitted
WAITING = "waiting"  # capacity counts only packets waiting behind it
BUFFER_CONVENTIONS = (IN_SYSTEM, WAITING)


@dataclass(frozen=True)
class SimConfig:
    bandwidth: float | None = None
    buffer_packets: int = DEFAULT_BUFFER
    target_utilization: float | None = None
    buffer_convention: str = IN_SYSTEM

    def __post_init__(self):
        if (self.bandwidth is None) == (self.target_utilization is None):
            raise ValueError("set exactly one of bandwidth and target_utilization")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.target_utilization is not None and not 0 < self.target_utilization < 1:
            raise ValueError("target_utilization must be in (0, 1)")
        if self.buffer_packets < 1:
            raise ValueError("buffer_packets must be >= 1")
        if self.buffer_convention not in BUFFER_CONVENTIONS:
            raise ValueError(f"buffer_convention must be one of {BUFFER_CONVENTIONS}")

    def resolve_bandwidth(self, trace: Trace) -> float:
        if self.bandwidth is not None:
            return self.bandwidth
        return derive_bandwidth(trace, self.target_utilization)


@dataclass(frozen=True)
class SimResult:
    total_packets: int
    dropped_packets: int
    loss_ratio: float
    effective_bandwidth: float
    max_queue_seen: int
    bandwidth: float
    buffer_packets: int
    departed_packets: int = 0
    buffer_convention: str = IN_SYSTEM

    def as_dict(self) -> dict:
        return {
            "total_packets": self.total_packets,
            "dropped_packets": self.dropped_packets,
            "departed_packets": self.departed_packets,
            "loss_ratio": self.loss_ratio,
            "effective_bandwidth": self.effective_bandwidth,
            "max_queue_seen": self.max_queue_seen,
            "bandwidth": self.bandwidth,
            "buffer_packets": self.buffer_packets,
            "buffer_convention": self.buffer_convention,
        }


def derive_bandwidth(trace: Trace, rho: float = DEFAULT_RHO) -> float:
    """Link rate giving utilisation ``rho`` for the trace's mean rate."""
    if not 0 < rho < 1:
        raise ValueError("rho must be in (0, 1)")
    if len(trace) == 0:
        raise ValueError("empty trace")
    if trace.duration <= 0:
        raise ValueError("trace duration is zero")
    mean_rate = trace.total_bytes * 8.0 / trace.duration
    return mean_rate / rho


def simulate(trace: Trace, config: SimConfig) -> SimResult:
    bw = config.resolve_bandwidth(trace)
    capacity = config.buffer_packets + (1 if config.buffer_convention == WAITING else 0)
    arrivals = trace.timestamp.tolist()
    services = (trace.size * 8.0 / bw).tolist()

    in_system: deque[float] = deque()  # departure times, FIFO
    last_departure = -math.inf
    dropped = 0
    delivered_bits = 0
    max_occ = 0
    sizes = trace.size.tolist()
    for t, s, size in zip(arrivals, services, sizes):
        # departures at the same instant leave before the admission test
        while in_system and in_system[0] <= t:
            in_system.popleft()
        if len(in_system) >= capacity:
            dropped += 1
            continue
        start = t if t > last_departure else last_departure
        last_departure = start + s
        in_system.append(last_departure)
        delivered_bits += size * 8
        if len(in_system) > max_occ:
            max_occ = len(in_system)

    total = len(arrivals)
    if config.buffer_convention == WAITING:
        max_occ = max(0, max_occ - 1)
    span = trace.duration if trace.duration > 0 else max(last_departure, 0.0)
    return SimResult(
        total_packets=total,
        dropped_packets=dropped,
        loss_ratio=dropped / total if total else 0.0,
        effective_bandwidth=delivered_bits / span if span > 0 else 0.0,
        max_queue_seen=max_occ,
        bandwidth=bw,
        buffer_packets=config.buffer_packets,
        departed_packets=total - dropped,
        buffer_convention=config.buffer_convention,
    )


@dataclass
class SweepRow:
    trace_id: str
    skewness: float | None = None
    hurst: float | None = None
    loss_ratio: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    rows: list[SweepRow]
    rho: float
    buffer_packets: int
    corr_skewness_loss: float | None = None
    corr_hurst_loss: float | None = None
    notes: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "rho": self.rho,
            "buffer_packets": self.buffer_packets,
            "traces": len(self.rows),
            "failed": [r.trace_id for r in self.rows if not r.ok],
            "corr_skewness_loss": self.corr_skewness_loss,
            "corr_hurst_loss": self.corr_hurst_loss,
            "notes": self.notes,
        }


def performance_sweep(
    traces: Sequence[Trace] | Mapping[str, Trace],
    rho: float = DEFAULT_RHO,
    buffer: int = DEFAULT_BUFFER,
    *,
    bin_width: float = DEFAULT_BIN_WIDTH,
    freq_fraction: float = DEFAULT_FREQ_FRACTION,
    buffer_convention: str = IN_SYSTEM,
) -> SweepResult:
    """Skewness, Hurst parameter and loss ratio per trace, plus their correlations with loss."""
    items = list(traces.items()) if isinstance(traces, Mapping) else [
        (t.name or f"trace{i:03d}", t) for i, t in enumerate(traces)
    ]
    if len(items) < 2:
        raise ValueError("a sweep needs at least 2 traces")
    config = SimConfig(
        target_utilization=rho, buffer_packets=buffer, buffer_convention=buffer_convention
    )
    rows = []
    for label, trace in items:
        row = SweepRow(label)
        try:
            series = throughput_series(trace, bin_width)
            row.skewness = skewness(series)
            row.hurst = hurst_periodogram(series, freq_fraction).h
            row.loss_ratio = simulate(trace, config).loss_ratio
        except (AnalysisError, ValueError) as exc:
            log.warning("trace %s failed: %s", label, exc)
            row.error = str(exc)
        rows.append(row)

    result = SweepResult(rows, rho, buffer)
    good = [r for r in rows if r.ok]
    loss = [r.loss_ratio for r in good]
    for attr, name in (("skewness", "corr_skewness_loss"), ("hurst", "corr_hurst_loss")):
        try:
            setattr(result, name, pearson([getattr(r, attr) for r in good], loss))
        except AnalysisError as exc:
            result.notes.append(f"{name} undefined: {exc}")
    return result


def write_sweep_csv(result: SweepResult, out: IO[str]) -> None:
    out.write("trace,skewness,hurst,loss_ratio\n")
    for r in result.rows:
        if r.ok:
            out.write(f"{r.trace_id},{r.skewness!r},{r.hurst!r},{r.loss_ratio!r}\n")
        else:
            out.write(f"{r.trace_id},failed,failed,failed\n")


def write_sweep_json(result: SweepResult, out: IO[str]) -> None:
    json.dump(result.summary(), out, indent=2, sort_keys=True)
    out.write("\n")
