"""Passive path metrics: hop counts from TTLs and RTTs from TCP handshakes.

Both work on bidirectional connections seen at one measuring point.  The hop
count between two hosts is the sum of each side's TTL decrement (observed
TTL against the inferred initial TTL) plus one; the RTT is the time between
the initiator's SYN and its ACK of the SYN+ACK.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .flows import DEFAULT_GREEDY_THRESHOLD, DEFAULT_TAU, flow_table
from .stats import AnalysisError, Histogram, RegressionFit, histogram, linear_fit
from .trace import ACK, PROTO_TCP, RST, SYN, FlowKey, Trace, int_to_ip, ip_to_int

INITIAL_TTLS = (32, 64, 128, 255)
DEFAULT_MIN_SHARE = 0.01


class InvalidPacketError(ValueError):
    pass


def infer_initial_ttl(observed: int) -> int:
    """Smallest of the common initial TTLs that is not below ``observed``."""
    if not 1 <= observed <= 255:
        raise InvalidPacketError(f"TTL {observed} outside 1..255")
    for c in INITIAL_TTLS:
        if c >= observed:
            return c
    raise AssertionError("unreachable")


def ttl_decrement(observed: int) -> int:
    return infer_initial_ttl(observed) - observed


def modal_ttl(ttls: Sequence[int]) -> int:
    """Most frequent TTL; ties go to the smaller value."""
    counts = Counter(int(t) for t in ttls)
    best = max(counts.values())
    return min(t for t, c in counts.items() if c == best)


@dataclass(frozen=True)
class HopEstimate:
    bikey: FlowKey
    hops: int
    dec_a: int  # decrement of bikey's first endpoint (src side)
    dec_b: int
    ambiguous: bool = False


_Dir = tuple[int, int, int, int, int]  # src_ip, dst_ip, src_port, dst_port, proto


def _canonical(d: _Dir) -> _Dir:
    sip, dip, sp, dp, proto = d
    if (sip, sp) <= (dip, dp):
        return d
    return (dip, sip, dp, sp, proto)


def _to_key(d: _Dir) -> FlowKey:
    return FlowKey(int_to_ip(d[0]), int_to_ip(d[1]), d[2], d[3], d[4])


def _directional_modes(trace: Trace) -> dict[_Dir, int]:
    valid = trace.ttl > 0
    rows = np.stack(
        [
            trace.src_ip[valid].astype(np.int64),
            trace.dst_ip[valid].astype(np.int64),
            trace.src_port[valid].astype(np.int64),
            trace.dst_port[valid].astype(np.int64),
            trace.protocol[valid].astype(np.int64),
            trace.ttl[valid].astype(np.int64),
        ],
        axis=1,
    )
    if rows.size == 0:
        return {}
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    # np.unique sorts by TTL within a key, so strict '>' keeps the smaller TTL on ties
    best: dict[_Dir, tuple[int, int]] = {}
    for row, c in zip(uniq.tolist(), counts.tolist()):
        d = tuple(row[:5])
        cur = best.get(d)
        if cur is None or c > cur[1]:
            best[d] = (row[5], c)
    return {d: ttl for d, (ttl, _) in best.items()}


def estimate_hops(trace: Trace) -> list[HopEstimate]:
    """One estimate per connection seen in both directions, sorted by key.

    A connection is ambiguous when either endpoint's address shows more than
    one distance to the measuring point across its traffic.
    """
    modes = _directional_modes(trace)
    decs = {d: ttl_decrement(ttl) for d, ttl in modes.items()}
    per_ip: dict[int, set[int]] = defaultdict(set)
    for d, dec in decs.items():
        per_ip[d[0]].add(dec)
    out = []
    for d in sorted({_canonical(d) for d in decs}):
        rev = (d[1], d[0], d[3], d[2], d[4])
        if d not in decs or rev not in decs:
            continue
        dec_a, dec_b = decs[d], decs[rev]
        ambiguous = len(per_ip[d[0]]) > 1 or len(per_ip[d[1]]) > 1
        out.append(HopEstimate(_to_key(d), dec_a + dec_b + 1, dec_a, dec_b, ambiguous))
    return out


@dataclass(frozen=True)
class HandshakeRecord:
    bikey: FlowKey
    t_syn: float
    t_synack: float
    t_ack: float
    rtt: float
    clean: bool
    initiator: str = ""


def estimate_rtts(trace: Trace) -> list[HandshakeRecord]:
    """RTT of every TCP connection whose 3-way handshake is visible, sorted by key.

    Records with a repeated SYN or SYN+ACK before the handshake's ACK are
    kept but marked unclean.
    """
    tcp = np.flatnonzero(trace.protocol == PROTO_TCP)
    flags = trace.tcp_flags[tcp]
    has_syn = (flags & SYN) != 0
    if not has_syn.any():
        return []
    sip = trace.src_ip[tcp].astype(np.int64)
    dip = trace.dst_ip[tcp].astype(np.int64)
    sp = trace.src_port[tcp].astype(np.int64)
    dp = trace.dst_port[tcp].astype(np.int64)
    swap = (sip > dip) | ((sip == dip) & (sp > dp))
    canon = np.stack(
        [np.where(swap, dip, sip), np.where(swap, sip, dip), np.where(swap, dp, sp), np.where(swap, sp, dp)],
        axis=1,
    )
    _, key_id = np.unique(canon, axis=0, return_inverse=True)
    key_id = key_id.reshape(-1)
    syn_keys = np.unique(key_id[has_syn])
    relevant = np.isin(key_id, syn_keys) & ((flags & (SYN | ACK)) != 0)
    order = np.flatnonzero(relevant)
    order = order[np.argsort(key_id[order], kind="stable")]

    ts = trace.timestamp[tcp]
    records = []
    state: dict | None = None
    current = -1

    def finish(st):
        if st is None or st["ack"] is None:
            return
        rtt = round(st["ack"] - st["syn"], 6)
        if rtt <= 0:
            return
        clean = not st["dup"] and st["syn"] < st["synack"] < st["ack"]
        d = (int(canon[st["row"], 0]), int(canon[st["row"], 1]), int(canon[st["row"], 2]),
             int(canon[st["row"], 3]), PROTO_TCP)
        records.append(
            HandshakeRecord(_to_key(d), st["syn"], st["synack"], st["ack"], rtt, clean,
                            int_to_ip(st["initiator"][0]))
        )

    for i in order.tolist():
        k = key_id[i]
        if k != current:
            finish(state)
            current = k
            state = {"syn": None, "synack": None, "ack": None, "dup": False,
                     "initiator": None, "row": i, "done": False}
        if state["done"]:
            continue
        f = int(flags[i])
        src = (int(sip[i]), int(sp[i]))
        t = float(ts[i])
        if f & SYN and not f & ACK:
            if state["syn"] is None:
                state["syn"], state["initiator"] = t, src
            else:
                state["dup"] = True
        elif f & SYN:
            if state["syn"] is None or src == state["initiator"]:
                continue
            if state["synack"] is None:
                state["synack"] = t
            else:
                state["dup"] = True
        elif not f & RST and state["synack"] is not None and src == state["initiator"]:
            state["ack"] = t
            state["done"] = True
    finish(state)
    records.sort(key=lambda r: r.bikey)
    return records


@dataclass(frozen=True)
class HopGroup:
    hops: int
    mean_rtt: float
    flows: int
    share: float


def join_hops_rtts(trace: Trace) -> list[tuple[int, float]]:
    """(hops, rtt) for every connection with a clean handshake and an unambiguous hop count."""
    hops = {h.bikey: h.hops for h in estimate_hops(trace) if not h.ambiguous}
    return [(hops[r.bikey], r.rtt) for r in estimate_rtts(trace) if r.clean and r.bikey in hops]


def hops_vs_rtt(
    trace: Trace, min_share: float = DEFAULT_MIN_SHARE
) -> tuple[list[HopGroup], RegressionFit]:
    """Mean RTT per hop count, and a linear fit over hop counts holding more than ``min_share`` of flows."""
    pairs = join_hops_rtts(trace)
    if not pairs:
        raise AnalysisError("no connection has both a hop count and a clean RTT")
    by_hops: dict[int, list[float]] = defaultdict(list)
    for h, rtt in pairs:
        by_hops[h].append(rtt)
    total = len(pairs)
    groups = [
        HopGroup(h, float(np.mean(v)), len(v), len(v) / total) for h, v in sorted(by_hops.items())
    ]
    chosen = [g for g in groups if g.share > min_share]
    if len(chosen) < 2:
        raise AnalysisError(
            f"only {len(chosen)} hop-count group(s) exceed a {min_share:.2%} share; need 2"
        )
    fit = linear_fit([g.hops for g in chosen], [g.mean_rtt for g in chosen])
    return groups, fit


def hop_histograms(
    trace: Trace,
    tau: float = DEFAULT_TAU,
    threshold: int = DEFAULT_GREEDY_THRESHOLD,
    estimates: Sequence[HopEstimate] | None = None,
) -> tuple[Histogram, Histogram | None]:
    """Hop counts weighted by per-time-unit flow occurrences: all flows, and greedy ones.

    Every per-time-unit flow inherits the hop count of its connection.
    """
    if estimates is None:
        estimates = estimate_hops(trace)
    hops = {}
    for h in estimates:
        if not h.ambiguous:
            k = h.bikey
            d = (ip_to_int(k.src_ip), ip_to_int(k.dst_ip), k.src_port, k.dst_port, k.protocol)
            hops[d] = h.hops
    table = flow_table(trace, tau, bidirectional=True)
    vals, npk = [], []
    for row in zip(
        table.src_ip.tolist(), table.dst_ip.tolist(), table.src_port.tolist(),
        table.dst_port.tolist(), table.protocol.tolist(), table.packet_count.tolist(),
    ):
        h = hops.get(row[:5])
        if h is not None:
            vals.append(h)
            npk.append(row[5])
    if not vals:
        raise AnalysisError("no per-time-unit flow has a hop estimate")
    all_hist = histogram(vals, 1.0)
    greedy = [h for h, n in zip(vals, npk) if n > threshold]
    return all_hist, (histogram(greedy, 1.0) if greedy else None)


def write_hop_histogram_csv(hist: Histogram, out: IO[str]) -> None:
    out.write("hops,count\n")
    for e, c in zip(hist.edges[:-1].tolist(), hist.counts.tolist()):
        out.write(f"{int(e)},{int(c)}\n")


def write_rtt_by_hops_csv(groups: Sequence[HopGroup], out: IO[str]) -> None:
    out.write("hops,mean_rtt_s,flows\n")
    for g in groups:
        out.write(f"{g.hops},{g.mean_rtt:.6f},{g.flows}\n")
