"""Throughput series and the statistics computed on it.

Skewness uses population moments.  The Hurst estimate comes from the
low-frequency slope of the periodogram of the linearly detrended series:
a spectrum ``P(f) ~ f**slope`` maps to ``H = (1 - slope) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .trace import Trace, bin_index, n_complete_bins

DEFAULT_BIN_WIDTH = 0.1
DEFAULT_FREQ_FRACTION = 0.10


class AnalysisError(ValueError):
    """An estimator's preconditions are not met by its input."""


class UndefinedSkewnessError(AnalysisError):
    pass


@dataclass(frozen=True)
class ThroughputSeries:
    values: np.ndarray  # bits/s per bin
    bin_width: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def stddev(self) -> float:
        return float(np.std(self.values))

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def from_values(cls, values: Sequence[float], bin_width: float = DEFAULT_BIN_WIDTH) -> ThroughputSeries:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("series must be one-dimensional")
        if np.any(arr < 0):
            raise ValueError("throughput values must be non-negative")
        return cls(arr, float(bin_width))


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    pearson_r: float
    n: int


@dataclass(frozen=True)
class HurstEstimate:
    h: float
    spectral_slope: float
    regression_r: float
    n_points: int
    log10_f: np.ndarray
    log10_p: np.ndarray


def throughput_series(trace: Trace, bin_width: float = DEFAULT_BIN_WIDTH) -> ThroughputSeries:
    """Bits per second in consecutive ``bin_width`` bins; a trailing partial bin is dropped."""
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    n_bins = n_complete_bins(trace.duration, bin_width)
    if n_bins < 2:
        raise AnalysisError(
            f"trace of {trace.duration} s is shorter than two {bin_width} s bins"
        )
    idx = bin_index(trace.timestamp, bin_width)
    keep = idx < n_bins
    byte_sums = np.bincount(idx[keep], weights=trace.size[keep], minlength=n_bins)
    return ThroughputSeries(byte_sums * 8.0 / bin_width, float(bin_width))


def skewness(series: ThroughputSeries | Sequence[float]) -> float:
    x = series.values if isinstance(series, ThroughputSeries) else np.asarray(series, dtype=float)
    if x.size < 3:
        raise AnalysisError("skewness needs at least 3 values")
    d = x - x.mean()
    var = np.mean(d * d)
    # relative test: a constant series leaves only rounding residue in d
    scale = max(np.max(np.abs(x)), 1e-300)
    if var <= (1e-12 * scale) ** 2:
        raise UndefinedSkewnessError("skewness undefined for a constant series")
    return float(np.mean(d**3) / var**1.5)


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> RegressionFit:
    """Ordinary least squares ``y = slope * x + intercept``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size:
        raise ValueError("xs and ys differ in length")
    if x.size < 2:
        raise AnalysisError("regression needs at least 2 points")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise AnalysisError("regression abscissae have zero variance")
    dy = y - y.mean()
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    syy = float(dy @ dy)
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0)) if syy > 0 else 0.0
    return RegressionFit(slope, intercept, r, int(x.size))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size:
        raise ValueError("xs and ys differ in length")
    if x.size < 2:
        raise AnalysisError("correlation needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise AnalysisError("correlation undefined: zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def detrend(values: Sequence[float]) -> np.ndarray:
    """Remove the least-squares line through ``(k, values[k])``."""
    y = np.asarray(values, dtype=float)
    k = np.arange(y.size, dtype=float)
    fit = linear_fit(k, y)
    return y - (fit.slope * k + fit.intercept)


def periodogram(values: Sequence[float], bin_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Positive frequencies ``j / (n * bin_width)`` and ``|DFT_j|^2 / n`` for j = 1..n//2."""
    x = np.asarray(values, dtype=float)
    n = x.size
    coef = np.fft.rfft(x)
    j = np.arange(1, n // 2 + 1)
    return j / (n * bin_width), np.abs(coef[j]) ** 2 / n


def hurst_periodogram(
    series: ThroughputSeries, low_freq_fraction: float = DEFAULT_FREQ_FRACTION
) -> HurstEstimate:
    """Hurst parameter from the log-log periodogram slope over the lowest frequencies."""
    n = len(series)
    if n < 32:
        raise AnalysisError(f"Hurst estimation needs at least 32 values, got {n}")
    if not 0 < low_freq_fraction <= 1:
        raise ValueError("low_freq_fraction must be in (0, 1]")
    resid = detrend(series.values)
    if np.allclose(resid, 0.0, atol=1e-9 * max(1.0, float(np.max(np.abs(series.values))))):
        raise AnalysisError("series is a pure linear trend; spectrum undefined")
    freqs, power = periodogram(resid, series.bin_width)
    m = math.ceil(low_freq_fraction * (n // 2) - 1e-9)
    m = max(m, 2)
    f, p = freqs[:m], power[:m]
    ok = p > 0
    if ok.sum() < 2:
        raise AnalysisError("too few non-zero periodogram ordinates")
    lf, lp = np.log10(f[ok]), np.log10(p[ok])
    fit = linear_fit(lf, lp)
    return HurstEstimate(
        h=(1.0 - fit.slope) / 2.0,
        spectral_slope=fit.slope,
        regression_r=fit.pearson_r,
        n_points=fit.n,
        log10_f=lf,
        log10_p=lp,
    )


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float

    def as_dict(self) -> dict[float, int]:
        return {float(e): int(c) for e, c in zip(self.edges[:-1], self.counts)}


def histogram(
    values: Sequence[float], bin_width: float = 1.0, weights: Sequence[float] | None = None
) -> Histogram:
    """Fixed-width histogram with edges anchored at multiples of ``bin_width``."""
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise AnalysisError("histogram of empty input")
    lo = math.floor(x.min() / bin_width)
    hi = math.floor(x.max() / bin_width) + 1
    edges = np.arange(lo, hi + 1) * bin_width
    idx = np.floor(x / bin_width).astype(np.int64) - lo
    w = None if weights is None else np.asarray(weights, dtype=float)
    counts = np.bincount(idx, weights=w, minlength=hi - lo)
    if w is None:
        counts = counts.astype(np.int64)
        mean = float(x.mean())
    else:
        mean = float(np.average(x, weights=w))
    return Histogram(edges, counts, mean)


def write_series_csv(series: ThroughputSeries, out: IO[str]) -> None:
    out.write("index,value\n")
    for i, v in enumerate(series.values.tolist()):
        out.write(f"{i},{v!r}\n")


def write_spectrum_csv(est: HurstEstimate, out: IO[str]) -> None:
    out.write("log10_f,log10_P\n")
    for f, p in zip(est.log10_f.tolist(), est.log10_p.tolist()):
        out.write(f"{f!r},{p!r}\n")
