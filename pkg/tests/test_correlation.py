import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sivphot.correlation import (TimeTrace, bin_timetrace, correlate, detect_intermittence,
                                 log_correlation, suggest_binning)
from sivphot.emitter_sim import SimConfig, TimestampStream, expected_count_rate, simulate
from sivphot.errors import DegenerateTrace, EmptyChannel
from sivphot.reference import DESHELVING_FITS

import oracles


def _stream(a, b, duration):
    return TimestampStream(np.sort(np.unique(a)), np.sort(np.unique(b)), duration)


def _poisson_stream(rate_cps, seconds, seed):
    rng = np.random.default_rng(seed)
    T = int(seconds * 1e12)
    n = rng.poisson(rate_cps * seconds, 2)
    return _stream(rng.integers(0, T, n[0]), rng.integers(0, T, n[1]), T)


def test_single_pair_bookkeeping():
    s = _stream(np.array([1_000_000]), np.array([1_005_000]), 10**7)
    h = correlate(s, 20.0, 1.0)
    hit = np.flatnonzero(h.counts)
    assert h.counts.sum() == 1
    assert h.bin_edges[hit[0]] <= 5.0 < h.bin_edges[hit[0] + 1]
    # widths are rounded to an odd tick count (1 ns -> 1001 ps)
    assert h.bin_edges[hit[0]] == pytest.approx(4.5, rel=2e-3)
    assert h.bin_edges[hit[0] + 1] == pytest.approx(5.5, rel=2e-3)


def test_independent_channels_flat():
    h = correlate(_poisson_stream(2e5, 2.0, 1), 100.0, 1.0)
    g = h.normalized
    err = 1 / math.sqrt(h.norm_constant)
    assert abs(g.mean() - 1) < 3 * err / math.sqrt(g.size)


def test_empty_channel():
    with pytest.raises(EmptyChannel):
        correlate(_stream(np.array([5]), np.array([], dtype=np.int64), 10), 10.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 200_000), min_size=1, max_size=60),
       st.lists(st.integers(0, 200_000), min_size=1, max_size=60),
       st.integers(1, 4000), st.integers(10, 40))
def test_matches_bruteforce_and_swap_symmetry(a, b, width_ps, half_bins):
    s = _stream(np.array(a), np.array(b), 200_001)
    width_ns = width_ps / 1000
    h = correlate(s, half_bins * width_ns * (1 + 1e-9) + 1e-6, width_ns)
    w = int(round(h.bin_width * 1000))
    assert w % 2 == 1
    K = (h.counts.size - 1) // 2
    np.testing.assert_array_equal(h.counts, oracles.pair_histogram_bruteforce(s.channel_a, s.channel_b, w, K))
    swapped = correlate(TimestampStream(s.channel_b, s.channel_a, s.duration_ticks),
                        half_bins * width_ns * (1 + 1e-9) + 1e-6, width_ns)
    np.testing.assert_array_equal(h.counts, swapped.counts[::-1])


def test_pair_count_conservation():
    a = np.array([0, 10_000, 50_000, 90_000])
    b = np.array([3_000, 12_000, 60_000, 200_000])
    s = _stream(a, b, 300_000)
    h = correlate(s, 40.0, 2.0)         # outer edge 41 ns, no pair has 40 < |d| <= 41
    d = (b[None, :] - a[:, None]).ravel()
    assert h.counts.sum() == np.count_nonzero(np.abs(d) <= 40_000)


def test_normalization_uses_channel_rates():
    s = _poisson_stream(1e5, 1.0, 2)
    h = correlate(s, 50.0, 1.0)
    assert h.norm_constant == pytest.approx(
        s.channel_a.size * s.channel_b.size * h.bin_width / s.duration_ns)


def test_log_correlation_agrees_with_fine_histogram():
    rc = DESHELVING_FITS["ND3"].rates
    s = simulate(SimConfig(rc, 105.0, 0.02, eta_detect=0.25, irf_sigma=0.0, seed=9))
    centers, g, pairs = log_correlation(s, np.array([10.0, 20.0, 40.0]))
    h = correlate(s, 60.0, 0.5)
    sel = (np.abs(h.centers) > 20.0) & (np.abs(h.centers) < 40.0)
    fine = h.counts[sel].sum() / (h.norm_constant * sel.sum())
    assert g[1] == pytest.approx(fine, rel=0.05)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=150),
       st.lists(st.integers(0, 10_000), min_size=1, max_size=150),
       st.lists(st.integers(0, 12_000), min_size=2, max_size=12, unique=True))
def test_log_correlation_pairs_match_brute_force(ta, tb, lag_ticks):
    s = _stream(np.array(ta, dtype=np.int64), np.array(tb, dtype=np.int64), 10_001)
    a, b = s.channels()
    lags = np.sort(np.array(lag_ticks)) / 1000.0
    _, _, pairs = log_correlation(s, lags)
    d = np.abs(b[None, :] - a[:, None])
    edges = np.sort(np.array(lag_ticks))
    within = np.array([np.sum(d < e) for e in edges])
    np.testing.assert_array_equal(pairs, np.diff(within))


def test_log_correlation_rejects_descending_lags():
    s = _stream(np.arange(0, 1000, 7), np.arange(3, 1000, 5), 1000)
    with pytest.raises(ValueError):
        log_correlation(s, np.array([0.5, 0.1, 0.2]))


def test_suggest_binning_brackets_time_scales():
    ref = DESHELVING_FITS["NI7"]
    s = simulate(SimConfig(ref.rates, 0.05 * ref.Psat, 2.0, eta_detect=0.25, irf_sigma=0.0, seed=0))
    span, width, t1, t2 = suggest_binning(s)
    assert width < t1 < t2 < span
    assert span >= 1.5e4     # true tau2 is about 5.5 us


# --- time traces -------------------------------------------------------------

def test_trace_counts_and_partial_window():
    a = np.array([0, 5, 99_999_999_999, 100_000_000_000, 250_000_000_000])
    s = _stream(a, np.array([1, 150_000_000_000]), 250_000_000_001)
    tr = bin_timetrace(s, 100.0)
    assert tr.counts.tolist() == [4, 2]      # third window is partial and dropped
    assert tr.rates.tolist() == [40.0, 20.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10**9 - 1), max_size=200), st.integers(1, 50))
def test_trace_conserves_counts_in_full_windows(times, window_ms):
    t = np.unique(np.array(times, dtype=np.int64))
    s = _stream(t, t + 1, 10**9)
    tr = bin_timetrace(s, window_ms * 1e-3)
    w = int(round(window_ms * 1e-3 * 1e9))
    full = (10**9 // w) * w
    assert tr.counts.sum() == np.count_nonzero(t < full) + np.count_nonzero(t + 1 < full)


def test_trace_empty_and_poisson():
    tr = bin_timetrace(_stream(np.array([], dtype=np.int64), np.array([], dtype=np.int64), 10**12), 100.0)
    assert tr.counts.size == 10 and not tr.counts.any()
    s = _poisson_stream(5e4, 4.0, 3)
    tr = bin_timetrace(s, 100.0)
    assert abs(tr.rates.mean() - 1e5) < 3 * math.sqrt(1e5 * 0.1) / 0.1 / math.sqrt(tr.rates.size)


def test_trace_mean_matches_expected_rate():
    rc = DESHELVING_FITS["ND2"].rates
    cfg = SimConfig(rc, 50.0, 1.0, eta_detect=0.001, background_rate=2e3, seed=4)
    tr = bin_timetrace(simulate(cfg), 50.0)
    se = tr.rates.std(ddof=1) / math.sqrt(tr.rates.size)
    assert abs(tr.rates.mean() - expected_count_rate(cfg)) < 3 * se


# --- intermittence -------------------------------------------------------------

def _trace(rates, window=100.0):
    rates = np.asarray(rates, dtype=float)
    return TimeTrace(window, rates, np.round(rates * window * 1e-3).astype(np.int64))


def test_constant_is_stable():
    rep = detect_intermittence(_trace(np.full(100, 1e5)))
    assert rep.classification == "stable" and rep.dark_intervals == []


def test_single_gap_is_blinking():
    r = np.full(100, 1e5)
    r[40:45] = 0.0
    rep = detect_intermittence(_trace(r), 0.3, 200.0)
    assert rep.dark_intervals == [(4000.0, 4500.0)]
    assert rep.classification == "blinking"


def test_bleached():
    r = np.concatenate([np.full(600, 1e5), np.zeros(600)])
    rep = detect_intermittence(_trace(r))
    assert rep.classification == "bleached"


def test_all_dark_is_degenerate():
    with pytest.raises(DegenerateTrace):
        detect_intermittence(_trace(np.zeros(20)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_subnormal=False), min_size=5, max_size=80),
       st.floats(1e-3, 1e3))
def test_intermittence_scale_invariant(rates, scale):
    r = np.array(rates)
    if not np.any(r > 0):
        return
    rep1 = detect_intermittence(_trace(r))
    rep2 = detect_intermittence(_trace(r * scale))
    assert rep1.classification == rep2.classification
    assert rep1.dark_intervals == rep2.dark_intervals
