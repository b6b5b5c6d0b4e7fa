"""Synthetic ON/OFF traffic with known ground truth.

Each source alternates Pareto-distributed ON and OFF periods and, while ON,
sends fixed-size packets at a constant spacing.  With homogeneous source
rates the aggregate is close to Gaussian; drawing per-source rates from a
heavy-tailed law produces a few "greedy" sources and a right-skewed
aggregate.  Everything is reproducible from the seed, and each source draws
from its own random substream so adding sources leaves existing ones alone.
"""

from __future__ import annotations

import configparser
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Mapping, NamedTuple, Sequence

import numpy as np

from .trace import ACK, PROTO_TCP, PROTO_UDP, PSH, SYN, Trace, bin_index, int_to_ip, ip_to_int

SOURCE_NET = ip_to_int("10.0.0.0")
SERVER_NET = ip_to_int("192.168.0.0")
OTHER_PROTO = 47  # GRE stands in for "neither TCP nor UDP"


@dataclass(frozen=True)
class SourceModel:
    n_sources: int = 100
    on_shape: float = 1.4
    off_shape: float = 1.4
    mean_on: float = 1.0
    mean_off: float = 1.0
    rate: float = 20.0  # packets/s while ON (mean over sources)
    rate_shape: float | None = None  # None: every source sends at ``rate``
    packet_size: int = 700
    seed: int = 0
    protocols: tuple[tuple[int, float], ...] = ((PROTO_TCP, 1.0),)
    n_servers: int = 1
    ttl: int = 64
    max_rate: float | None = None

    def __post_init__(self):
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        for name in ("on_shape", "off_shape"):
            v = getattr(self, name)
            if not 1 < v <= 2:
                raise ValueError(f"{name} must be in (1, 2], got {v}")
        if self.mean_on <= 0 or self.mean_off < 0:
            raise ValueError("mean_on must be > 0 and mean_off >= 0")
        if self.rate <= 0:
            raise ValueError("rate must be > 0")
        if self.rate_shape is not None and self.rate_shape <= 1:
            raise ValueError("rate_shape must be > 1 so the mean rate exists")
        if self.packet_size < 20:
            raise ValueError("packet_size must be >= 20")
        if not self.protocols or any(w < 0 for _, w in self.protocols):
            raise ValueError("protocol weights must be non-negative")
        if self.n_servers < 1 or not 1 <= self.ttl <= 255:
            raise ValueError("bad n_servers or ttl")

    @property
    def theoretical_h(self) -> float:
        return (3.0 - min(self.on_shape, self.off_shape)) / 2.0


@dataclass
class SourceTruth:
    index: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    rate: float
    packets: int
    bytes: int
    on_periods: list[tuple[float, float]]


@dataclass
class GroundTruth:
    model: SourceModel
    duration: float
    tau: float
    sources: list[SourceTruth]
    # (bin, source index) -> packets in that bin
    bin_counts: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def theoretical_h(self) -> float:
        return self.model.theoretical_h

    @property
    def total_bytes(self) -> int:
        return sum(s.bytes for s in self.sources)

    def flow_counts(self, min_packets: int = 2) -> dict[tuple[int, int], int]:
        return {k: v for k, v in self.bin_counts.items() if v >= min_packets}

    def to_json(self) -> dict:
        flows = sorted(self.flow_counts().items())
        return {
            "model": asdict(self.model),
            "duration": self.duration,
            "tau": self.tau,
            "theoretical_h": self.theoretical_h,
            "total_bytes": self.total_bytes,
            "sources": [asdict(s) for s in self.sources],
            "flow_counts": [[b, s, n] for (b, s), n in flows],
        }


def pareto(rng: np.random.Generator, shape: float, mean: float, size: int) -> np.ndarray:
    """Pareto samples with the given shape and exact mean (scale = mean*(shape-1)/shape)."""
    scale = mean * (shape - 1.0) / shape
    u = 1.0 - rng.random(size)  # (0, 1]
    return scale * u ** (-1.0 / shape)


def pareto_residual(rng: np.random.Generator, shape: float, mean: float) -> float:
    """One draw of the remaining life of a Pareto period caught in progress.

    This is the stationary (equilibrium) law of a renewal process's first
    period, so a source started with it is stationary from t=0.
    """
    scale = mean * (shape - 1.0) / shape
    u = rng.random()
    if u < scale / mean:
        return u * mean
    return scale * (1.0 - (u * mean - scale) * (shape - 1.0) / scale) ** (-1.0 / (shape - 1.0))


def _protocol_quota(protocols: Sequence[tuple[int, float]], n: int) -> list[int]:
    """Largest-remainder apportionment of n sources over the protocol weights."""
    total = sum(w for _, w in protocols)
    exact = [w / total * n for _, w in protocols]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(exact)), key=lambda i: (counts[i] - exact[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    out = []
    for (proto, _), c in zip(protocols, counts):
        out.extend([proto] * c)
    return out


def _source_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _on_periods(rng, model: SourceModel, start: float, end: float) -> list[tuple[float, float]]:
    if model.mean_off == 0:
        return [(start, end)]
    p_on = model.mean_on / (model.mean_on + model.mean_off)
    on = rng.random() < p_on
    first = pareto_residual(rng, model.on_shape if on else model.off_shape,
                            model.mean_on if on else model.mean_off)
    t = start
    periods = []
    if on:
        periods.append((t, t + first))
    t += first
    on = not on
    while t < end:
        ons = pareto(rng, model.on_shape, model.mean_on, 64)
        offs = pareto(rng, model.off_shape, model.mean_off, 64)
        for a, b in zip(ons.tolist(), offs.tolist()):
            if on:
                periods.append((t, t + a))
                t += a
            else:
                t += b
            on = not on
            if t >= end:
                break
    return [(a, min(b, end)) for a, b in periods if b > 0 and a < end]


def _emit(periods, rate: float, duration: float) -> np.ndarray:
    spacing = 1.0 / rate
    chunks = []
    for a, b in periods:
        n = max(1, math.ceil((b - a) / spacing - 1e-12))
        t = a + spacing * np.arange(n)
        chunks.append(t[(t >= 0) & (t < duration)])
    if not chunks:
        return np.zeros(0)
    t = np.round(np.concatenate(chunks), 6)
    return t[t < duration]


def generate(model: SourceModel, duration: float, tau: float = 0.1) -> tuple[Trace, GroundTruth]:
    """Superpose ``model.n_sources`` ON/OFF sources over ``[0, duration)``."""
    if duration <= 0:
        raise ValueError("duration must be > 0")
    protos = _protocol_quota(model.protocols, model.n_sources)
    cols = defaultdict(list)
    sources = []
    bin_counts: dict[tuple[int, int], int] = {}
    tau_us = round(tau * 1e6)
    for i in range(model.n_sources):
        rng = _source_rng(model.seed, i)
        if model.rate_shape is None:
            rate = model.rate
        else:
            rate = float(pareto(rng, model.rate_shape, model.rate, 1)[0])
        if model.max_rate is not None:
            rate = min(rate, model.max_rate)
        if model.mean_off == 0:
            # always ON: random phase on the packet grid
            phase = rng.random() / rate
            periods = [(-phase, duration)]
        else:
            periods = _on_periods(rng, model, 0.0, duration)
        times = _emit(periods, rate, duration)
        proto = protos[i]
        src = SOURCE_NET + 1 + i
        dst = SERVER_NET + 1 + (i % model.n_servers)
        sport = 1024 + i % 64000 if proto in (PROTO_TCP, PROTO_UDP) else 0
        dport = {PROTO_TCP: 80, PROTO_UDP: 53}.get(proto, 0)
        flags = ACK | PSH if proto == PROTO_TCP else 0
        n = times.size
        cols["timestamp"].append(times)
        cols["src_ip"].append(np.full(n, src))
        cols["dst_ip"].append(np.full(n, dst))
        cols["src_port"].append(np.full(n, sport))
        cols["dst_port"].append(np.full(n, dport))
        cols["protocol"].append(np.full(n, proto))
        cols["tcp_flags"].append(np.full(n, flags))
        for b, c in zip(*np.unique((np.rint(times * 1e6).astype(np.int64)) // tau_us, return_counts=True)):
            bin_counts[(int(b), i)] = int(c)
        sources.append(
            SourceTruth(
                index=i,
                src_ip=int_to_ip(src),
                dst_ip=int_to_ip(dst),
                src_port=sport,
                dst_port=dport,
                protocol=proto,
                rate=rate,
                packets=int(n),
                bytes=int(n) * model.packet_size,
                on_periods=[(max(a, 0.0), b) for a, b in periods if b > 0],
            )
        )
    merged = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.argsort(merged["timestamp"], kind="stable")
    merged = {k: v[order] for k, v in merged.items()}
    n = order.size
    merged["size"] = np.full(n, model.packet_size)
    merged["ttl"] = np.full(n, model.ttl)
    trace = Trace.from_columns(merged, duration=duration, name=f"synth-seed{model.seed}")
    return trace, GroundTruth(model, duration, tau, sources, bin_counts)


class HostPath(NamedTuple):
    """Where a host sits relative to the measuring point."""

    distance: int  # routers between the host and the measuring point
    rtt: float  # handshake RTT (s) for connections this host initiates
    initial_ttl: int = 64


def emulate_path(trace: Trace, topology: Mapping[str, HostPath | tuple]) -> Trace:
    """Rewrite TTLs from per-host distances and add a scripted handshake per TCP connection.

    Every TCP 5-tuple gets SYN / SYN+ACK / ACK packets just before its first
    packet, spaced so that the measured SYN-to-ACK time equals the
    initiator's RTT.  The whole trace is shifted later to make room.
    """
    topo = {ip: HostPath(*v) for ip, v in topology.items()}
    by_int = {ip_to_int(ip): hp for ip, hp in topo.items()}
    for ips in (np.unique(trace.src_ip), np.unique(trace.dst_ip)):
        for v in ips.tolist():
            if v not in by_int:
                raise KeyError(f"host {int_to_ip(v)} missing from topology")
    for ip, hp in topo.items():
        if not 0 <= hp.distance < hp.initial_ttl:
            raise ValueError(f"{ip}: distance {hp.distance} incompatible with initial TTL {hp.initial_ttl}")
        if hp.rtt <= 0:
            raise ValueError(f"{ip}: rtt must be > 0")

    def ttl_of(ip: int) -> int:
        hp = by_int[ip]
        return hp.initial_ttl - hp.distance

    tcp = trace.protocol == PROTO_TCP
    keys = np.stack(
        [trace.src_ip, trace.dst_ip, trace.src_port, trace.dst_port], axis=1
    ).astype(np.int64)[tcp]
    first_t = trace.timestamp[tcp]
    handshake_keys = []
    seen = set()
    for row, t in zip(keys.tolist(), first_t.tolist()):
        k = tuple(row)
        rev = (k[1], k[0], k[3], k[2])
        if k in seen or rev in seen:
            continue
        seen.add(k)
        handshake_keys.append((k, t))

    rtts = [round(by_int[k[0]].rtt, 6) for k, _ in handshake_keys]
    lead = math.ceil((max(rtts, default=0.0) + 2e-6) * 1e6) / 1e6
    cols = {c: v.copy() for c, v in trace.columns().items()}
    cols["timestamp"] = np.round(cols["timestamp"] + lead, 6)
    cols["ttl"] = np.array([ttl_of(v) for v in cols["src_ip"].tolist()], dtype=np.int64)

    extra = defaultdict(list)
    for (k, t), rtt in zip(handshake_keys, rtts):
        sip, dip, sp, dp = k
        t0 = round(t + lead, 6)
        t_ack = round(t0 - 1e-6, 6)
        t_syn = round(t_ack - rtt, 6)
        t_synack = round(t_syn + round(rtt / 2, 6), 6)
        for ts, a, b, pa, pb, fl in (
            (t_syn, sip, dip, sp, dp, SYN),
            (t_synack, dip, sip, dp, sp, SYN | ACK),
            (t_ack, sip, dip, sp, dp, ACK),
        ):
            extra["timestamp"].append(ts)
            extra["size"].append(40)
            extra["src_ip"].append(a)
            extra["dst_ip"].append(b)
            extra["src_port"].append(pa)
            extra["dst_port"].append(pb)
            extra["protocol"].append(PROTO_TCP)
            extra["ttl"].append(ttl_of(a))
            extra["tcp_flags"].append(fl)
    if extra:
        cols = {c: np.concatenate([np.asarray(extra[c]), v]) for c, v in cols.items()}
    order = np.argsort(cols["timestamp"], kind="stable")
    cols = {c: v[order] for c, v in cols.items()}
    return Trace.from_columns(cols, duration=trace.duration + lead, name=trace.name)


def shuffle_bins(trace: Trace, tau: float, block_bins: int, seed: int) -> Trace:
    """Permute whole blocks of ``block_bins`` consecutive bins.

    The multiset of per-bin throughputs (hence skewness) is unchanged while
    correlations longer than one block are destroyed.
    """
    if block_bins < 1:
        raise ValueError("block_bins must be >= 1")
    tau_us = round(tau * 1e6)
    if abs(tau * 1e6 - tau_us) > 1e-6:
        raise ValueError("tau must be a whole number of microseconds")
    block_us = tau_us * block_bins
    us = np.rint(trace.timestamp * 1e6).astype(np.int64)
    n_blocks = int(round(trace.duration * 1e6)) // block_us
    block = us // block_us
    perm = np.random.default_rng(seed).permutation(n_blocks)
    new_block = np.where(block < n_blocks, perm[np.minimum(block, max(n_blocks - 1, 0))], block)
    new_us = us - block * block_us + new_block * block_us
    cols = trace.columns()
    cols["timestamp"] = new_us / 1e6
    order = np.argsort(new_us, kind="stable")
    cols = {c: np.asarray(v)[order] for c, v in cols.items()}
    return Trace.from_columns(cols, duration=trace.duration, name=trace.name)


def rate_tail_ensemble(
    n_traces: int = 20,
    *,
    seed: int = 2024,
    duration: float = 120.0,
    shapes: Sequence[float] | None = None,
    **model_kwargs,
) -> list[tuple[SourceModel, Trace]]:
    """Traces whose per-source rate tails run from very heavy to light.

    Rate shapes are spread evenly from 1.1 (a few very greedy sources) to
    3.0 unless given explicitly.
    """
    if shapes is None:
        shapes = np.linspace(1.1, 3.0, n_traces)
    out = []
    for i, shape in enumerate(shapes):
        kwargs = dict(
            n_sources=100, rate=100.0, mean_on=0.2, mean_off=2.0, max_rate=1000.0, seed=seed + i
        )
        kwargs.update(model_kwargs)
        model = SourceModel(rate_shape=None if shape is None else float(shape), **kwargs)
        trace, _ = generate(model, duration)
        label = "uniform" if shape is None else f"g{shape:.2f}"
        out.append((model, Trace.from_columns(trace.columns(), duration=duration, name=f"ens{i:02d}-{label}")))
    return out


# ---------------------------------------------------------------- config files

_FIELD_TYPES = {
    "n_sources": int,
    "on_shape": float,
    "off_shape": float,
    "mean_on": float,
    "mean_off": float,
    "rate": float,
    "rate_shape": float,
    "packet_size": int,
    "seed": int,
    "n_servers": int,
    "ttl": int,
    "max_rate": float,
}
_RUN_KEYS = {"duration": float, "tau": float}


def parse_protocols(text: str) -> tuple[tuple[int, float], ...]:
    """``"6:97,17:1,47:2"`` -> ((6, 97.0), (17, 1.0), (47, 2.0))."""
    out = []
    for part in text.split(","):
        proto, _, weight = part.strip().partition(":")
        out.append((int(proto), float(weight) if weight else 1.0))
    return tuple(out)


def load_config(text: str) -> tuple[SourceModel, dict]:
    """Parse a flat ``key = value`` config; returns the model and run options (duration, tau)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[synth]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"bad config: {exc}") from None
    model_kw: dict = {}
    run = {"duration": 300.0, "tau": 0.1}
    for key, raw in cp["synth"].items():
        raw = raw.strip()
        try:
            if key in _FIELD_TYPES:
                model_kw[key] = None if raw.lower() in ("", "none", "uniform") else _FIELD_TYPES[key](raw)
            elif key in _RUN_KEYS:
                run[key] = _RUN_KEYS[key](raw)
            elif key == "protocols":
                model_kw[key] = parse_protocols(raw)
            else:
                raise ValueError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from None
    return SourceModel(**model_kw), run


def write_ground_truth(truth: GroundTruth, out: IO[str]) -> None:
    json.dump(truth.to_json(), out, sort_keys=True)
    out.write("\n")


def read_config_file(path: str | Path) -> tuple[SourceModel, dict]:
    return load_config(Path(path).read_text(encoding="utf-8"))
