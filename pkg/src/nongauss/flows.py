"""Per-time-unit flows, greedy-flow classification and the power-law tail of flow sizes.

A per-time-unit flow is the set of packets sharing one 5-tuple inside one
``tau``-second bin; it only counts when it holds at least two packets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .stats import AnalysisError, linear_fit, skewness, throughput_series
from .trace import PROTO_TCP, PROTO_UDP, FlowKey, Trace, bin_index, int_to_ip

DEFAULT_TAU = 0.1
DEFAULT_GREEDY_THRESHOLD = 20
DEFAULT_TAIL_MIN = 10
MIN_PACKETS_PER_FLOW = 2


@dataclass(frozen=True)
class PerTimeUnitFlow:
    key: FlowKey
    bin_index: int
    packet_count: int
    byte_count: int

    @property
    def protocol(self) -> int:
        return self.key.protocol


@dataclass(frozen=True)
class FlowTable:
    """Column form of the per-time-unit flows of one trace (sorted by bin, then key)."""

    bin_index: np.ndarray
    src_ip: np.ndarray
    dst_ip: np.ndarray
    src_port: np.ndarray
    dst_port: np.ndarray
    protocol: np.ndarray
    packet_count: np.ndarray
    byte_count: np.ndarray
    n_bins: int

    def __len__(self) -> int:
        return self.packet_count.size

    def key(self, i: int) -> FlowKey:
        return FlowKey(
            int_to_ip(self.src_ip[i]),
            int_to_ip(self.dst_ip[i]),
            int(self.src_port[i]),
            int(self.dst_port[i]),
            int(self.protocol[i]),
        )

    def flows_per_bin(self) -> np.ndarray:
        """N_{T_i} for every bin."""
        return np.bincount(self.bin_index, minlength=self.n_bins)


def _analysable(trace: Trace) -> np.ndarray:
    # TCP/UDP packets without ports are non-first fragments
    has_ports = (trace.src_port != 0) | (trace.dst_port != 0)
    transport = (trace.protocol == PROTO_TCP) | (trace.protocol == PROTO_UDP)
    return has_ports | ~transport


def flow_table(trace: Trace, tau: float = DEFAULT_TAU, *, bidirectional: bool = False) -> FlowTable:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    n_bins = max(math.ceil(trace.duration / tau - 1e-9), 1) if len(trace) else 0
    keep = _analysable(trace)
    b = bin_index(trace.timestamp[keep], tau)
    if b.size:
        n_bins = max(n_bins, int(b.max()) + 1)
    sip = trace.src_ip[keep].astype(np.int64)
    dip = trace.dst_ip[keep].astype(np.int64)
    sp = trace.src_port[keep].astype(np.int64)
    dp = trace.dst_port[keep].astype(np.int64)
    proto = trace.protocol[keep].astype(np.int64)
    size = trace.size[keep]
    if bidirectional:
        swap = (sip > dip) | ((sip == dip) & (sp > dp))
        sip, dip = np.where(swap, dip, sip), np.where(swap, sip, dip)
        sp, dp = np.where(swap, dp, sp), np.where(swap, sp, dp)
    if b.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return FlowTable(empty, empty, empty, empty, empty, empty, empty, empty, n_bins)
    rows = np.stack([b, sip, dip, sp, dp, proto], axis=1)
    uniq, inverse, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    nbytes = np.bincount(inverse, weights=size, minlength=len(uniq)).astype(np.int64)
    sel = counts >= MIN_PACKETS_PER_FLOW
    u = uniq[sel]
    return FlowTable(
        bin_index=u[:, 0],
        src_ip=u[:, 1],
        dst_ip=u[:, 2],
        src_port=u[:, 3],
        dst_port=u[:, 4],
        protocol=u[:, 5],
        packet_count=counts[sel].astype(np.int64),
        byte_count=nbytes[sel],
        n_bins=n_bins,
    )


def extract_flows(
    trace: Trace, tau: float = DEFAULT_TAU, *, bidirectional: bool = False
) -> list[PerTimeUnitFlow]:
    """Every (bin, 5-tuple) pair with at least two packets, in bin then key order."""
    table = flow_table(trace, tau, bidirectional=bidirectional)
    ips: dict[int, str] = {}

    def ip(v: int) -> str:
        s = ips.get(v)
        if s is None:
            s = ips[v] = int_to_ip(v)
        return s

    return [
        PerTimeUnitFlow(FlowKey(ip(a), ip(d), sp, dp, p), bi, n, nb)
        for bi, a, d, sp, dp, p, n, nb in zip(
            table.bin_index.tolist(),
            table.src_ip.tolist(),
            table.dst_ip.tolist(),
            table.src_port.tolist(),
            table.dst_port.tolist(),
            table.protocol.tolist(),
            table.packet_count.tolist(),
            table.byte_count.tolist(),
        )
    ]


def classify_greedy(flow: PerTimeUnitFlow | int, threshold: int = DEFAULT_GREEDY_THRESHOLD) -> bool:
    """A flow is greedy when its packet count strictly exceeds ``threshold``."""
    if threshold < MIN_PACKETS_PER_FLOW:
        raise ValueError(f"greedy threshold must be >= {MIN_PACKETS_PER_FLOW}")
    n = flow if isinstance(flow, (int, np.integer)) else flow.packet_count
    return int(n) > threshold


def eccdf(counts: Iterable[int]) -> list[tuple[int, float]]:
    """``(n, P[N > n])`` at each distinct observed n, ascending."""
    x = np.asarray(list(counts) if not isinstance(counts, np.ndarray) else counts)
    if x.size == 0:
        raise AnalysisError("ECCDF of empty sample")
    values, freq = np.unique(x, return_counts=True)
    greater = x.size - np.cumsum(freq)
    return [(int(v), g / x.size) for v, g in zip(values.tolist(), greater.tolist())]


@dataclass(frozen=True)
class TailFit:
    alpha: float
    regression_r: float
    n_min: float
    points: tuple[tuple[float, float], ...]
    intercept: float = 0.0

    @property
    def heavy_tailed(self) -> bool:
        return is_heavy_tailed(self.alpha)


def is_heavy_tailed(alpha: float) -> bool:
    return 0 < alpha < 2


def fit_tail(points: Sequence[tuple[float, float]], n_min: float = DEFAULT_TAIL_MIN) -> TailFit:
    """Least-squares power law through the ECCDF points with ``n >= n_min`` and ``P > 0``."""
    used = tuple((float(n), float(p)) for n, p in points if n >= n_min and p > 0 and n > 0)
    if len(used) < 3:
        raise AnalysisError(
            f"tail fit needs at least 3 points with n >= {n_min} and P > 0, got {len(used)}"
        )
    arr = np.array(used)
    fit = linear_fit(np.log10(arr[:, 0]), np.log10(arr[:, 1]))
    return TailFit(-fit.slope, fit.pearson_r, n_min, used, fit.intercept)


@dataclass(frozen=True)
class ProtocolMix:
    tcp: float
    udp: float
    other: float
    n_flows: int

    def as_dict(self) -> dict[str, float]:
        return {"TCP": self.tcp, "UDP": self.udp, "Other": self.other}

    def to_json(self) -> str:
        return json.dumps({**self.as_dict(), "flows": self.n_flows}, sort_keys=True)


def protocol_mix(
    flows: Sequence[PerTimeUnitFlow] | FlowTable,
    greedy_only: bool = False,
    threshold: int = DEFAULT_GREEDY_THRESHOLD,
) -> ProtocolMix:
    """Share of per-time-unit flows (not packets) carried by TCP, UDP and everything else."""
    if isinstance(flows, FlowTable):
        proto = flows.protocol
        npk = flows.packet_count
    else:
        proto = np.array([f.protocol for f in flows], dtype=np.int64)
        npk = np.array([f.packet_count for f in flows], dtype=np.int64)
    if greedy_only:
        if threshold < MIN_PACKETS_PER_FLOW:
            raise ValueError(f"greedy threshold must be >= {MIN_PACKETS_PER_FLOW}")
        proto = proto[npk > threshold]
    n = proto.size
    if n == 0:
        raise AnalysisError("no flows selected for protocol mix")
    tcp = int(np.sum(proto == PROTO_TCP))
    udp = int(np.sum(proto == PROTO_UDP))
    return ProtocolMix(tcp / n, udp / n, (n - tcp - udp) / n, n)


def alpha_vs_skewness(
    traces: Sequence[Trace] | Mapping[str, Trace],
    tau: float = DEFAULT_TAU,
    n_min: float = DEFAULT_TAIL_MIN,
) -> list[tuple[float, float]]:
    """Tail exponent of flow sizes paired with throughput skewness, one pair per trace."""
    items = list(traces.items()) if isinstance(traces, Mapping) else [
        (t.name or f"#{i}", t) for i, t in enumerate(traces)
    ]
    if len(items) < 2:
        raise ValueError("need at least 2 traces")
    pairs = []
    for label, trace in items:
        try:
            table = flow_table(trace, tau)
            alpha = fit_tail(eccdf(table.packet_count), n_min).alpha
            skew = skewness(throughput_series(trace, tau))
        except (AnalysisError, ValueError) as exc:
            raise AnalysisError(f"trace {label}: {exc}") from exc
        pairs.append((alpha, skew))
    return pairs


def write_llcd_csv(points: Sequence[tuple[float, float]], out: IO[str]) -> None:
    out.write("n_p,ccdf\n")
    for n, p in points:
        out.write(f"{n},{p!r}\n")
