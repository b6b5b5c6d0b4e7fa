"""Packet and trace data model, plus readers/writers for pcap and canonical CSV.

A :class:`Trace` is stored column-wise (one numpy array per header field) so
that binning, flow grouping and queue replay stay vectorised on traces of a
few million packets.  Individual :class:`PacketRecord` objects are only built
on demand.
"""

from __future__ import annotations

import io
import ipaddress
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

CSV_HEADER = "timestamp,size,src_ip,dst_ip,src_port,dst_port,protocol,ttl,tcp_flags"

PROTO_TCP = 6
PROTO_UDP = 17

# TCP flag bits
FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10

_COLUMNS = (
    ("timestamp", np.float64),
    ("size", np.int64),
    ("src_ip", np.uint32),
    ("dst_ip", np.uint32),
    ("src_port", np.uint16),
    ("dst_port", np.uint16),
    ("protocol", np.uint8),
    ("ttl", np.uint8),
    ("tcp_flags", np.uint8),
)


class TraceFormatError(ValueError):
    """Raised when a pcap or CSV input cannot be parsed."""


def ip_to_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(int(value)))


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    size: int
    src_ip: str
    dst_ip: str
    src_port: int = 0
    dst_port: int = 0
    protocol: int = PROTO_TCP
    ttl: int = 64
    tcp_flags: int = 0

    @property
    def key(self) -> FlowKey:
        return FlowKey(self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)


class FlowKey(NamedTuple):
    """Directional 5-tuple."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int

    def reversed(self) -> FlowKey:
        return FlowKey(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.protocol)

    def canonical(self) -> FlowKey:
        """Bidirectional form: the endpoint with the smaller (address, port) comes first."""
        a = (ip_to_int(self.src_ip), self.src_port)
        b = (ip_to_int(self.dst_ip), self.dst_port)
        return self if a <= b else self.reversed()


def bin_index(timestamps: np.ndarray, width: float) -> np.ndarray:
    """Index of the width-sized bin (aligned at t=0) holding each timestamp.

    Timestamps carry microsecond resolution, so when the width is a whole
    number of microseconds the division is done on integers; plain float
    division puts e.g. t=0.3 into bin 2 for width 0.1.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    width_us = width * 1e6
    if abs(width_us - round(width_us)) < 1e-6 and round(width_us) > 0:
        us = np.rint(ts * 1e6).astype(np.int64)
        return us // int(round(width_us))
    return np.floor(ts / width).astype(np.int64)


def n_complete_bins(duration: float, width: float) -> int:
    return int(bin_index(np.array([duration]), width)[0])


class Trace:
    """An immutable, timestamp-ordered sequence of IPv4 packets.

    ``duration`` defaults to the last timestamp; ``origin`` is the wall-clock
    time of the first packet before rebasing and is informational only.
    """

    def __init__(
        self,
        timestamp: Sequence[float] | np.ndarray = (),
        size: Sequence[int] | np.ndarray = (),
        src_ip: Sequence[int] | np.ndarray = (),
        dst_ip: Sequence[int] | np.ndarray = (),
        src_port: Sequence[int] | np.ndarray = (),
        dst_port: Sequence[int] | np.ndarray = (),
        protocol: Sequence[int] | np.ndarray = (),
        ttl: Sequence[int] | np.ndarray = (),
        tcp_flags: Sequence[int] | np.ndarray = (),
        *,
        duration: float | None = None,
        origin: float = 0.0,
        name: str = "",
    ):
        values = (timestamp, size, src_ip, dst_ip, src_port, dst_port, protocol, ttl, tcp_flags)
        n = len(timestamp)
        for (col, dtype), v in zip(_COLUMNS, values):
            arr = np.array(v, dtype=dtype)
            if arr.shape != (n,):
                raise ValueError(f"column {col!r} has length {arr.size}, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, col, arr)
        ts = self.timestamp
        if n and ts[0] < 0:
            raise ValueError("negative timestamp")
        if n > 1 and np.any(np.diff(ts) < 0):
            first = int(np.argmax(np.diff(ts) < 0)) + 1
            raise ValueError(f"timestamps not sorted at packet {first}")
        last = float(ts[-1]) if n else 0.0
        if duration is None:
            duration = last
        if duration < last:
            raise ValueError(f"duration {duration} shorter than last timestamp {last}")
        object.__setattr__(self, "duration", float(duration))
        object.__setattr__(self, "origin", float(origin))
        object.__setattr__(self, "name", name)

    def __setattr__(self, name, value):
        if name in self.__dict__ or name in {c for c, _ in _COLUMNS}:
            raise AttributeError(f"Trace is immutable ({name})")
        object.__setattr__(self, name, value)

    @classmethod
    def from_records(
        cls, records: Iterable[PacketRecord], *, duration: float | None = None, name: str = ""
    ) -> Trace:
        recs = list(records)
        return cls(
            [r.timestamp for r in recs],
            [r.size for r in recs],
            [ip_to_int(r.src_ip) for r in recs],
            [ip_to_int(r.dst_ip) for r in recs],
            [r.src_port for r in recs],
            [r.dst_port for r in recs],
            [r.protocol for r in recs],
            [r.ttl for r in recs],
            [r.tcp_flags for r in recs],
            duration=duration,
            name=name,
        )

    @classmethod
    def from_columns(cls, columns: dict, **kwargs) -> Trace:
        return cls(*(columns[c] for c, _ in _COLUMNS), **kwargs)

    def columns(self) -> dict[str, np.ndarray]:
        return {c: getattr(self, c) for c, _ in _COLUMNS}

    def take(self, index: np.ndarray, **kwargs) -> Trace:
        """New trace from a subset (boolean mask or sorted indices) of packets."""
        cols = {c: v[index] for c, v in self.columns().items()}
        kwargs.setdefault("name", self.name)
        return Trace.from_columns(cols, **kwargs)

    def __len__(self) -> int:
        return self.timestamp.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Trace{label} packets={len(self)} duration={self.duration:.6f}s>"

    def __getitem__(self, i: int) -> PacketRecord:
        return self.packets[i]

    @cached_property
    def packets(self) -> tuple[PacketRecord, ...]:
        ips: dict[int, str] = {}

        def ip(v: int) -> str:
            s = ips.get(v)
            if s is None:
                s = ips[v] = int_to_ip(v)
            return s

        return tuple(
            PacketRecord(float(t), int(s), ip(a), ip(b), int(sp), int(dp), int(p), int(ttl), int(f))
            for t, s, a, b, sp, dp, p, ttl, f in zip(
                self.timestamp.tolist(),
                self.size.tolist(),
                self.src_ip.tolist(),
                self.dst_ip.tolist(),
                self.src_port.tolist(),
                self.dst_port.tolist(),
                self.protocol.tolist(),
                self.ttl.tolist(),
                self.tcp_flags.tolist(),
            )
        )

    @property
    def total_bytes(self) -> int:
        return int(self.size.sum())

    def flow_key(self, i: int) -> FlowKey:
        return FlowKey(
            int_to_ip(self.src_ip[i]),
            int_to_ip(self.dst_ip[i]),
            int(self.src_port[i]),
            int(self.dst_port[i]),
            int(self.protocol[i]),
        )


def slice_trace(trace: Trace, start: float, length: float) -> Trace:
    """Packets with ``start <= t < start + length``, rebased to t=0."""
    if start < 0:
        raise ValueError("start must be >= 0")
    if length <= 0:
        raise ValueError("length must be > 0")
    ts = trace.timestamp
    lo = int(np.searchsorted(ts, start, side="left"))
    hi = int(np.searchsorted(ts, start + length, side="left"))
    cols = {c: v[lo:hi] for c, v in trace.columns().items()}
    if start:
        cols["timestamp"] = np.round(cols["timestamp"] - start, 6)
    # a window running past the end of the trace is cut to what was observed
    duration = max(0.0, min(length, trace.duration - start))
    if hi > lo:
        duration = max(duration, float(cols["timestamp"][-1]))
    return Trace.from_columns(cols, duration=duration, name=trace.name)


# ---------------------------------------------------------------- CSV


def write_csv(trace: Trace, out: IO[str] | None = None) -> str:
    """Serialise to the canonical CSV; returns the text and also writes it to ``out``."""
    ips: dict[int, str] = {}
    for v in np.unique(np.concatenate([trace.src_ip, trace.dst_ip])).tolist():
        ips[v] = int_to_ip(v)
    lines = [CSV_HEADER]
    for t, s, a, b, sp, dp, p, ttl, f in zip(
        trace.timestamp.tolist(),
        trace.size.tolist(),
        trace.src_ip.tolist(),
        trace.dst_ip.tolist(),
        trace.src_port.tolist(),
        trace.dst_port.tolist(),
        trace.protocol.tolist(),
        trace.ttl.tolist(),
        trace.tcp_flags.tolist(),
    ):
        lines.append(f"{t:.6f},{s},{ips[a]},{ips[b]},{sp},{dp},{p},{ttl},{f}")
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text


def read_csv(source: IO[str] | str, *, duration: float | None = None, name: str = "") -> Trace:
    """Parse canonical CSV text (a string or a text stream)."""
    text = source if isinstance(source, str) else source.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise TraceFormatError(f"line 1: expected header {CSV_HEADER!r}")
    cols: list[list] = [[] for _ in _COLUMNS]
    ips: dict[str, int] = {}
    prev = -np.inf
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(_COLUMNS):
            raise TraceFormatError(
                f"line {lineno}: expected {len(_COLUMNS)} fields, got {len(fields)}"
            )
        try:
            t = float(fields[0])
            row = [t, int(fields[1])]
            for f in fields[2:4]:
                v = ips.get(f)
                if v is None:
                    v = ips[f] = ip_to_int(f)
                row.append(v)
            row.extend(int(f) for f in fields[4:])
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from None
        if t < prev:
            raise TraceFormatError(f"line {lineno}: timestamp {t} earlier than previous {prev}")
        prev = t
        for c, v in zip(cols, row):
            c.append(v)
    try:
        return Trace(*cols, duration=duration, name=name)
    except (ValueError, OverflowError) as exc:
        raise TraceFormatError(str(exc)) from None


# ---------------------------------------------------------------- pcap

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
ETHERTYPE_IPV4 = 0x0800


@dataclass(frozen=True)
class PcapStats:
    """Frame accounting from one pcap parse."""

    accepted: int
    skipped: int
    accepted_bytes: int
    skipped_bytes: int
    payload_bytes: int
    link_type: int


def parse_pcap(data: bytes, *, name: str = "") -> tuple[Trace, PcapStats]:
    """Parse a classic pcap byte string into a trace plus frame accounting."""
    if len(data) < 24:
        raise TraceFormatError("truncated pcap global header")
    magic_le = struct.unpack_from("<I", data, 0)[0]
    if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = "<"
        nano = magic_le == PCAP_MAGIC_NS
    else:
        magic_be = struct.unpack_from(">I", data, 0)[0]
        if magic_be not in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            raise TraceFormatError(f"bad pcap magic 0x{magic_le:08x}")
        endian = ">"
        nano = magic_be == PCAP_MAGIC_NS
    _, _, _, _, _, _, link_type = struct.unpack_from(endian + "IHHiIII", data, 0)
    if link_type not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
        raise TraceFormatError(f"unsupported link type {link_type}")

    rec_hdr = struct.Struct(endian + "IIII")
    divisor = 1_000_000_000 if nano else 1_000_000
    rows: list[tuple] = []
    skipped = accepted_bytes = skipped_bytes = 0
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            raise TraceFormatError(f"truncated packet record header at byte offset {off}")
        sec, frac, incl, _orig = rec_hdr.unpack_from(data, off)
        start = off + 16
        if start + incl > len(data):
            raise TraceFormatError(f"truncated packet data at byte offset {off}")
        frame = data[start : start + incl]
        off = start + incl
        row = _decode_frame(frame, link_type)
        if row is None:
            skipped += 1
            skipped_bytes += 16 + incl
            continue
        accepted_bytes += 16 + incl
        # integer microseconds keep the rebase exact
        us = sec * 1_000_000 + (frac * 1_000_000) // divisor
        rows.append((us,) + row)

    stats = PcapStats(len(rows), skipped, accepted_bytes, skipped_bytes, len(data) - 24, link_type)
    if not rows:
        return Trace(name=name), stats
    arr = np.array(rows, dtype=np.int64)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    t0 = int(arr[0, 0])
    cols = [(arr[:, 0] - t0) / 1e6] + [arr[:, i] for i in range(1, arr.shape[1])]
    return Trace(*cols, origin=t0 / 1e6, name=name), stats


def read_pcap(data: bytes | IO[bytes], *, name: str = "") -> Trace:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        data = data.read()
    return parse_pcap(bytes(data), name=name)[0]


def _decode_frame(frame: bytes, link_type: int) -> tuple | None:
    if link_type == LINKTYPE_ETHERNET:
        if len(frame) < 14 or struct.unpack_from("!H", frame, 12)[0] != ETHERTYPE_IPV4:
            return None
        ip = frame[14:]
    else:
        ip = frame
    if len(ip) < 20 or ip[0] >> 4 != 4:
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len = struct.unpack_from("!H", ip, 2)[0]
    frag_offset = struct.unpack_from("!H", ip, 6)[0] & 0x1FFF
    ttl, proto = ip[8], ip[9]
    src, dst = struct.unpack_from("!II", ip, 12)
    sport = dport = flags = 0
    l4 = ip[ihl:]
    # non-first fragments carry no transport header
    if frag_offset == 0 and proto in (PROTO_TCP, PROTO_UDP) and len(l4) >= 4:
        sport, dport = struct.unpack_from("!HH", l4, 0)
        if proto == PROTO_TCP and len(l4) >= 14:
            flags = l4[13]
    return (total_len, src, dst, sport, dport, proto, ttl, flags)


def write_pcap(trace: Trace, out: IO[bytes] | None = None, *, origin: float | None = None) -> bytes:
    """Encode a trace as a little-endian microsecond pcap of Ethernet frames.

    Only headers are captured; the record's original length and the IP
    total-length field carry the packet size.
    """
    base = trace.origin if origin is None else origin
    base_us = int(round(base * 1e6))
    buf = io.BytesIO()
    buf.write(struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
    eth = b"\x00\x00\x00\x00\x00\x02" + b"\x00\x00\x00\x00\x00\x01" + struct.pack("!H", ETHERTYPE_IPV4)
    for i in range(len(trace)):
        proto = int(trace.protocol[i])
        if proto == PROTO_TCP:
            l4 = struct.pack(
                "!HHIIBBHHH",
                int(trace.src_port[i]), int(trace.dst_port[i]), 0, 0,
                5 << 4, int(trace.tcp_flags[i]), 65535, 0, 0,
            )
        elif proto == PROTO_UDP:
            size = int(trace.size[i])
            l4 = struct.pack(
                "!HHHH", int(trace.src_port[i]), int(trace.dst_port[i]), max(size - 20, 8) & 0xFFFF, 0
            )
        else:
            l4 = b""
        ip = struct.pack(
            "!BBHHHBBHII",
            0x45, 0, int(trace.size[i]), 0, 0, int(trace.ttl[i]), proto, 0,
            int(trace.src_ip[i]), int(trace.dst_ip[i]),
        )
        frame = eth + ip + l4
        us = base_us + int(round(float(trace.timestamp[i]) * 1e6))
        buf.write(struct.pack("<IIII", us // 1_000_000, us % 1_000_000, len(frame), 14 + int(trace.size[i])))
        buf.write(frame)
    data = buf.getvalue()
    if out is not None:
        out.write(data)
    return data


def load_trace(path, *, name: str | None = None) -> Trace:
    """Read a trace file, choosing pcap or CSV by content."""
    from pathlib import Path

    p = Path(path)
    raw = p.read_bytes()
    label = p.stem if name is None else name
    if raw[:4] in (
        struct.pack("<I", PCAP_MAGIC_US),
        struct.pack(">I", PCAP_MAGIC_US),
        struct.pack("<I", PCAP_MAGIC_NS),
        struct.pack(">I", PCAP_MAGIC_NS),
    ):
        return read_pcap(raw, name=label)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise TraceFormatError(f"{p}: neither pcap nor UTF-8 CSV") from None
    return read_csv(text, name=label)
