"""Coincidence histograms, time traces and intermittence detection.

``correlate`` counts every a/b pair (full pairwise correlation, not
start-stop) with |t_b - t_a| inside the histogram span.  Bins are centred
on integer multiples of the bin width.  Timestamps are integer ticks, so
the width is rounded to an odd number of ticks: every bin, the one at zero
included, then holds the same number of integer differences, no difference
falls on an edge, and the histogram is mirror symmetric under channel
exchange.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numba
import numpy as np

from .emitter_sim import TICKS_PER_NS, TimestampStream
from .errors import DegenerateTrace, EmptyChannel

DEFAULT_THRESHOLD_FRACTION = 0.3
DEFAULT_MIN_DARK_MS = 200.0


@dataclass
class G2Histogram:
    bin_edges: np.ndarray      # ns, length nbins + 1
    counts: np.ndarray         # raw coincidences per bin
    norm_constant: float       # expected coincidences per bin for g2 = 1

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / self.norm_constant

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def max_tau(self) -> float:
        return float(self.bin_edges[-1])


@dataclass
class TimeTrace:
    window: float          # ms
    rates: np.ndarray      # cps per window
    counts: np.ndarray     # events per window

    @property
    def times(self) -> np.ndarray:
        """Window start times in ms."""
        return np.arange(self.rates.size) * self.window


@dataclass
class IntermittenceReport:
    dark_intervals: list          # (start_ms, end_ms) pairs
    threshold: float              # cps
    classification: Literal["stable", "blinking", "bleached"]
    bright_level: float = float("nan")


_BLOCK_BINS = 1 << 15   # histogram slice kept cache resident per sweep


@numba.njit(cache=True)
def _pair_histogram(a, b, width, half_bins):
    """Histogram of b - a with bins centred at k*width, |k| <= half_bins.

    Integer ticks throughout; bin k holds k*width - h <= d <= k*width + h
    with h = (width - 1) / 2, so a pair is accepted when
    2|d| < (2K + 1) * width.  ``width`` is odd, so 2|d| never equals an
    edge.  Long histograms are filled one block of bins at a time, each
    sweep with its own pair of monotone pointers, so the counts being
    incremented stay in cache.
    """
    nbins = 2 * half_bins + 1
    counts = np.zeros(nbins, dtype=np.int64)
    h = (width - 1) // 2
    inv = 1.0 / width
    nb = b.size
    for k0 in range(-half_bins, half_bins + 1, _BLOCK_BINS):
        k1 = min(k0 + _BLOCK_BINS, half_bins + 1)
        d_lo = k0 * width - h          # first lag of bin k0
        d_hi = k1 * width - h          # first lag past bin k1 - 1
        j0 = 0
        for i in range(a.size):
            t = a[i]
            while j0 < nb and b[j0] - t < d_lo:
                j0 += 1
            j = j0
            while j < nb:
                x = b[j] - t + h
                if x >= d_hi + h:
                    break
                # k = floor(x / width): float estimate, exact integer fix-up
                k = np.int64(np.floor(x * inv))
                r = x - k * width
                if r < 0:
                    k -= 1
                elif r >= width:
                    k += 1
                counts[k + half_bins] += 1
                j += 1
    return counts


def correlate(stream: TimestampStream, max_tau: float, bin_width: float) -> G2Histogram:
    """Cross-correlation histogram of channel b relative to channel a.

    ``bin_width`` (ns) is rounded to the nearest odd number of picosecond
    ticks.  The histogram
    has 2K + 1 bins with K = floor(max_tau / bin_width), so the outer edge
    (K + 1/2) * bin_width covers at least ``max_tau``.  Normalization is
    N_a * N_b * bin_width / T, i.e. r_a * r_b * T * bin_width.
    """
    a, b = stream.channels()
    if a.size == 0 or b.size == 0:
        raise EmptyChannel("both channels need at least one event")
    if not bin_width >= 0.5 / TICKS_PER_NS:
        raise ValueError("bin_width must be at least one tick (1 ps)")
    width = 2 * int(np.floor(bin_width * TICKS_PER_NS / 2)) + 1
    if max_tau < 10 * bin_width:
        raise ValueError("max_tau must be at least 10 bin widths")
    half_bins = int(np.floor(max_tau * TICKS_PER_NS / width))
    counts = _pair_histogram(a, b, np.int64(width), np.int64(half_bins))
    w_ns = width / TICKS_PER_NS
    edges = (np.arange(-half_bins, half_bins + 2) - 0.5) * w_ns
    norm = a.size * b.size * w_ns / stream.duration_ns
    return G2Histogram(edges, counts, norm)


@numba.njit(cache=True)
def _gallop_left(b, x, start):
    """First index >= start with b[index] >= x, searching upward from start."""
    n = b.size
    lo, hi, step = start, start, 1
    while hi < n and b[hi] < x:
        lo = hi + 1
        hi = lo + step
        step *= 2
    hi = min(hi, n)
    return lo + np.searchsorted(b[lo:hi], x)


@numba.njit(cache=True)
def _gallop_right(b, y, stop):
    """First index <= stop with b[index] > y, searching downward from stop."""
    lo, hi, step = stop - 1, stop, 1
    while lo >= 0 and b[lo] > y:
        hi = lo
        lo = hi - step
        step *= 2
    lo = max(lo + 1, 0)
    return lo + np.searchsorted(b[lo:hi], y, side="right")


@numba.njit(cache=True)
def _window_counts(sub, b, edges):
    """Sum over t in ``sub`` of #{b : t - e < b < t + e} for each ascending e.

    The answers for one event move outward as e grows, so each search
    gallops from the previous one and stays within a few cache lines.
    """
    cum = np.zeros(edges.size, dtype=np.int64)
    for i in range(sub.size):
        t = sub[i]
        hi = np.searchsorted(b, t)
        lo = np.searchsorted(b, t, side="right")
        for k in range(edges.size):
            hi = _gallop_left(b, t + edges[k], hi)
            lo = _gallop_right(b, t - edges[k], lo)
            cum[k] += max(hi - lo, 0)   # e = 0 with t in b gives -1
    return cum


def log_correlation(stream: TimestampStream, lags, max_events: int = 100_000):
    """Coarse g2 on arbitrary (e.g. log spaced) lag edges, via binary search.

    Uses at most ``max_events`` evenly strided channel-a events and both
    signs of the delay.  Returns (lag_centers_ns, g2, pair_counts); cost is
    independent of the number of pairs, which makes it a cheap first look
    at the time scales before choosing the fine histogram.
    """
    a, b = stream.channels()
    if a.size == 0 or b.size == 0:
        raise EmptyChannel("both channels need at least one event")
    lags = np.asarray(lags, dtype=float)
    stride = max(1, a.size // max_events)
    sub = a[::stride]
    edges = np.round(lags * TICKS_PER_NS).astype(np.int64)
    if np.any(np.diff(edges) < 0) or edges[0] < 0:
        raise ValueError("lags must be non-negative and ascending")
    pairs = np.diff(_window_counts(sub, b, edges)).astype(float)
    widths = 2 * np.diff(edges) / TICKS_PER_NS
    norm = sub.size * b.size / stream.duration_ns * widths
    centers = np.sqrt(lags[1:] * lags[:-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        g2 = pairs / norm
    return centers, g2, pairs


def suggest_binning(stream: TimestampStream, min_width: float = 0.001):
    """Heuristic (max_tau, bin_width, tau1_est, tau2_est) in ns from the data.

    bin width = tau1/10 and span = 6 tau2 (or 60 tau1 when no bunching is
    visible), with tau1 and tau2 read off a coarse log-lag correlation.
    """
    lags = np.geomspace(0.001, 1e6, 91)
    lags = lags[lags < 0.2 * stream.duration_ns]
    centers, g2, pairs = log_correlation(stream, lags)
    ok = pairs >= 30
    centers, g2, pairs = centers[ok], g2[ok], pairs[ok]
    if centers.size < 5:
        raise EmptyChannel("too few coincidences to estimate time scales")
    err = np.maximum(g2, 0.05) / np.sqrt(pairs)
    # most significant excess, not the largest value: early lags are noisy
    peak = int(np.argmax((g2 - 1) / err))
    bunched = g2[peak] - 1 > 5 * err[peak] and g2[peak] > 1.02
    level = g2[peak] if bunched else 1.0
    rise = np.flatnonzero(g2 >= (1 - np.exp(-1)) * level)
    tau1 = centers[rise[0]] if rise.size else centers[0]
    tau2 = np.nan
    if bunched:
        tail = np.flatnonzero((np.arange(centers.size) > peak)
                              & (g2 - 1 <= (g2[peak] - 1) / np.e))
        tau2 = centers[tail[0]] if tail.size else centers[-1]
        tau2 = max(tau2, 3 * tau1)
    span = 6 * tau2 if bunched else 60 * tau1
    width = max(tau1 / 10, min_width)
    span = max(span, 20 * width)
    return float(span), float(width), float(tau1), float(tau2)


def bin_timetrace(stream: TimestampStream, window: float) -> TimeTrace:
    """Count rate of both channels in consecutive windows of ``window`` ms.

    The trailing partial window is dropped.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    w_ticks = int(round(window * 1e-3 * 1e12))
    n_windows = stream.duration_ticks // w_ticks
    counts = np.zeros(n_windows, dtype=np.int64)
    for ch in stream.channels():
        idx = ch // w_ticks
        counts += np.bincount(idx[idx < n_windows], minlength=n_windows)[:n_windows]
    rates = counts / (window * 1e-3)
    return TimeTrace(window=float(window), rates=rates, counts=counts)


def detect_intermittence(trace: TimeTrace,
                         threshold_fraction: float = DEFAULT_THRESHOLD_FRACTION,
                         min_dark: float = DEFAULT_MIN_DARK_MS,
                         floor: float = 0.0) -> IntermittenceReport:
    """Find dark intervals and classify a trace as stable, blinking or bleached.

    The bright level is the median of windows above the threshold, with the
    threshold itself ``threshold_fraction`` times the bright level; two
    refinement passes starting from the 90th percentile settle both.
    """
    if not 0.0 < threshold_fraction < 1.0:
        raise ValueError("threshold_fraction must lie in (0, 1)")
    rates = np.asarray(trace.rates, dtype=float)
    if rates.size == 0 or np.all(rates <= floor):
        raise DegenerateTrace("no window above the absolute floor")
    bright = np.percentile(rates, 90)
    for _ in range(2):
        threshold = threshold_fraction * bright
        above = rates[rates >= threshold]
        bright = float(np.median(above))
    threshold = threshold_fraction * bright

    dark = rates < threshold
    intervals = []
    edges = np.diff(np.concatenate([[0], dark.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    for s, e in zip(starts, stops):
        if (e - s) * trace.window >= min_dark:
            intervals.append((s * trace.window, e * trace.window))

    end = rates.size * trace.window
    if not intervals:
        label = "stable"
    elif intervals[-1][1] == end and intervals[-1][1] - intervals[-1][0] >= 10 * min_dark:
        label = "bleached"
    else:
        label = "blinking"
    return IntermittenceReport(intervals, float(threshold), label, bright)
