"""Traffic-trace statistics: throughput skewness, Hurst parameter, per-time-unit
flows, flow-size tails, TTL hop counts, handshake RTTs and a trace-driven
FIFO queue."""

__version__ = "0.1.0"
