import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nongauss.paths import (
    INITIAL_TTLS,
    InvalidPacketError,
    estimate_hops,
    estimate_rtts,
    hop_histograms,
    hops_vs_rtt,
    infer_initial_ttl,
    modal_ttl,
)
from nongauss.stats import AnalysisError
from nongauss.synth import HostPath, SourceModel, emulate_path, generate
from nongauss.trace import ACK, PSH, SYN, FlowKey, PacketRecord, Trace

C, S = "10.0.0.5", "192.168.1.1"


def _p(t, src, dst, ttl, flags=ACK, sport=None, dport=None):
    sport = sport if sport is not None else (40000 if src == C else 80)
    dport = dport if dport is not None else (80 if src == C else 40000)
    return PacketRecord(t, 40, src, dst, sport, dport, 6, ttl, flags)


def smallest_candidate(observed):
    return min(c for c in INITIAL_TTLS if c >= observed)


@pytest.mark.parametrize("observed, initial", [(45, 64), (125, 128), (255, 255), (64, 64), (33, 64)])
def test_infer_initial_ttl(observed, initial):
    assert infer_initial_ttl(observed) == initial


def test_infer_initial_ttl_exhaustive():
    for v in range(1, 256):
        assert infer_initial_ttl(v) == smallest_candidate(v)
    with pytest.raises(InvalidPacketError):
        infer_initial_ttl(0)


def test_infer_initial_ttl_monotone_idempotent():
    outs = [infer_initial_ttl(v) for v in range(1, 256)]
    assert outs == sorted(outs)
    assert all(infer_initial_ttl(c) == c for c in INITIAL_TTLS)


def test_hops_worked_example():
    trace = Trace.from_records([_p(0.0, C, S, 125), _p(0.01, S, C, 62), _p(0.02, C, S, 125)])
    (h,) = estimate_hops(trace)
    assert h.hops == 6
    assert {h.dec_a, h.dec_b} == {3, 2}
    assert not h.ambiguous
    assert h.bikey == FlowKey(C, S, 40000, 80, 6).canonical()


def test_hops_adjacent_endpoints():
    trace = Trace.from_records([_p(0.0, C, S, 64), _p(0.01, S, C, 64)])
    assert estimate_hops(trace)[0].hops == 1


def test_one_way_key_omitted():
    trace = Trace.from_records([_p(0.0, C, S, 125), _p(0.1, C, S, 125)])
    assert estimate_hops(trace) == []


def test_modal_ttl_and_tie_break():
    assert modal_ttl([60, 61, 61, 60, 59]) == 60
    recs = [_p(0.0, C, S, 120), _p(0.1, C, S, 121), _p(0.2, S, C, 64), _p(0.3, C, S, 125), _p(0.4, C, S, 125)]
    # mode 125 (2 votes) beats the noisy packets
    (h,) = estimate_hops(Trace.from_records(recs))
    assert h.dec_a + h.dec_b == 3
    tie = [_p(0.0, C, S, 125), _p(0.1, C, S, 120), _p(0.2, S, C, 64)]
    (h,) = estimate_hops(Trace.from_records(tie))
    assert h.hops == 8 + 0 + 1  # tie goes to the smaller TTL, the larger decrement


def test_ambiguous_source_marked():
    other = "192.168.1.2"
    recs = [
        _p(0.0, C, S, 125), _p(0.1, S, C, 62),
        PacketRecord(0.2, 40, C, other, 40001, 80, 6, 120, ACK),
        PacketRecord(0.3, 40, other, C, 80, 40001, 6, 60, ACK),
    ]
    hops = estimate_hops(Trace.from_records(recs))
    assert len(hops) == 2
    assert all(h.ambiguous for h in hops)


def test_boundary_straddle_is_ambiguous():
    other = "192.168.1.2"
    recs = [
        _p(0.0, C, S, 33), _p(0.1, S, C, 62),
        PacketRecord(0.2, 40, C, other, 40001, 80, 6, 32, ACK),
        PacketRecord(0.3, 40, other, C, 80, 40001, 6, 60, ACK),
    ]
    assert all(h.ambiguous for h in estimate_hops(Trace.from_records(recs)))


def test_hops_order_invariant():
    recs = [_p(0.0, C, S, 125), _p(0.0, C, S, 124), _p(0.0, C, S, 125), _p(0.0, S, C, 62), _p(0.0, S, C, 62)]
    rng = random.Random(1)
    first = estimate_hops(Trace.from_records(recs))
    for _ in range(5):
        rng.shuffle(recs)
        assert estimate_hops(Trace.from_records(recs)) == first


def _handshake(t_syn, t_synack, t_ack, extra=()):
    recs = [
        _p(t_syn, C, S, 125, SYN),
        _p(t_synack, S, C, 62, SYN | ACK),
        _p(t_ack, C, S, 125, ACK),
        _p(t_ack + 0.001, C, S, 125, ACK | PSH),
        *extra,
    ]
    return Trace.from_records(sorted(recs, key=lambda r: r.timestamp))


def test_rtt_scripted_handshake():
    (r,) = estimate_rtts(_handshake(0.0, 0.03, 0.080))
    assert r.rtt == 0.080
    assert r.clean
    assert (r.t_syn, r.t_synack, r.t_ack) == (0.0, 0.03, 0.08)
    assert r.initiator == C


def test_rtt_duplicate_syn_unclean():
    trace = _handshake(0.0, 1.03, 1.08, extra=[_p(1.0, C, S, 125, SYN)])
    (r,) = estimate_rtts(trace)
    assert not r.clean


def test_rtt_duplicate_synack_unclean():
    trace = _handshake(0.0, 0.03, 0.08, extra=[_p(0.05, S, C, 62, SYN | ACK)])
    assert not estimate_rtts(trace)[0].clean


def test_rtt_incomplete_handshake_omitted():
    trace = Trace.from_records([_p(0.0, C, S, 125, SYN), _p(0.03, S, C, 62, SYN | ACK)])
    assert estimate_rtts(trace) == []
    assert estimate_rtts(Trace.from_records([_p(0.0, C, S, 125, ACK)])) == []


def _emulated(n_hosts, rtt_of, distance_of, seed=0, duration=20.0):
    model = SourceModel(n_sources=n_hosts, rate=20, mean_on=0.5, mean_off=0.5, seed=seed)
    trace, truth = generate(model, duration)
    topo = {s.src_ip: HostPath(distance_of(s.index), rtt_of(s.index), 128) for s in truth.sources}
    topo["192.168.0.1"] = HostPath(2, 0.001, 64)
    active = {s.index for s in truth.sources if s.packets}
    return emulate_path(trace, topo), truth, topo, active


def test_rtts_recovered_exactly_from_script():
    rtts = {i: round(0.010 + 0.0013 * i, 6) for i in range(100)}
    trace, truth, _, active = _emulated(100, rtts.__getitem__, lambda i: 5 + i % 20)
    by_src = {r.initiator: r for r in estimate_rtts(trace)}
    assert len(by_src) == len(active)
    for s in truth.sources:
        if s.index in active:
            assert by_src[s.src_ip].rtt == rtts[s.index]
            assert by_src[s.src_ip].clean


def test_hops_recovered_exactly_from_script():
    trace, truth, topo, active = _emulated(60, lambda i: 0.05, lambda i: i % 25)
    got = {h.bikey.src_ip: h for h in estimate_hops(trace)}
    for s in truth.sources:
        if s.index in active:
            h = got[s.src_ip]
            assert h.hops == topo[s.src_ip].distance + 2 + 1
            assert not h.ambiguous


def test_hops_vs_rtt_linear_topology():
    dist = lambda i: 3 + i % 10  # noqa: E731
    trace, *_ = _emulated(80, lambda i: 0.005 * (dist(i) + 3), dist, seed=2)
    groups, fit = hops_vs_rtt(trace, 0.01)
    assert fit.pearson_r == pytest.approx(1.0, abs=1e-12)
    assert fit.slope == pytest.approx(0.005, rel=1e-9)
    assert sum(g.flows for g in groups) == len(estimate_rtts(trace))


def test_hops_vs_rtt_noisy():
    rng = np.random.default_rng(7)
    dist = lambda i: 3 + i % 12  # noqa: E731
    noise = rng.normal(0, 0.004, 300)
    trace, *_ = _emulated(300, lambda i: max(0.001, 0.005 * (dist(i) + 3) + noise[i]), dist, seed=4)
    _, fit = hops_vs_rtt(trace)
    assert fit.pearson_r > 0.9


def test_hops_vs_rtt_needs_two_groups():
    trace, *_ = _emulated(10, lambda i: 0.05, lambda i: 4)
    with pytest.raises(AnalysisError):
        hops_vs_rtt(trace)


def test_unclean_records_only_shrink_sample():
    trace = _handshake(0.0, 0.03, 0.08, extra=[_p(0.01, C, S, 125, SYN)])
    recs = estimate_rtts(trace)
    assert all(r.rtt > 0 for r in recs)
    assert len([r for r in recs if r.clean]) <= len(recs)


def test_hop_histogram_matches_direct_tally():
    dist = lambda i: i % 7  # noqa: E731
    trace, truth, topo, _ = _emulated(40, lambda i: 0.02, dist, seed=5)
    all_hist, greedy = hop_histograms(trace, 0.1, threshold=2)
    from nongauss.flows import extract_flows

    tally = {}
    hop_of = {s.src_ip: topo[s.src_ip].distance + 3 for s in truth.sources}
    for f in extract_flows(trace, 0.1, bidirectional=True):
        ip = f.key.src_ip if f.key.src_ip in hop_of else f.key.dst_ip
        tally[hop_of[ip]] = tally.get(hop_of[ip], 0) + 1
    assert {int(k): v for k, v in all_hist.as_dict().items() if v} == tally
    assert all_hist.counts.sum() == sum(tally.values())


@given(st.lists(st.integers(1, 255), min_size=1, max_size=40))
def test_modal_ttl_is_a_mode(ttls):
    m = modal_ttl(ttls)
    assert ttls.count(m) == max(ttls.count(t) for t in ttls)
    assert all(t >= m for t in ttls if ttls.count(t) == ttls.count(m))
