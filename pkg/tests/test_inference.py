import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sivphot import inference as inf
from sivphot import rate_model as rm
from sivphot.correlation import G2Histogram, correlate, suggest_binning
from sivphot.emitter_sim import SimConfig, simulate
from sivphot.errors import OutOfRange, StageDivergence
from sivphot.reference import DESHELVING_FITS, POPULATION_SUMMARY


def _noiseless_hist(shape, pe, irf, width, span, norm=1e4):
    K = int(span / width)
    edges = (np.arange(-K, K + 2) - 0.5) * width
    return G2Histogram(edges, norm * rm.g2_irf_binned(shape, pe, irf, edges), norm)


def _series(rc, powers, noise=0.0, seed=0):
    a, t1, t2 = rm.shape_arrays(rc, powers)
    rng = np.random.default_rng(seed)
    out = []
    for name, v in (("a", a), ("tau1", t1), ("tau2", t2)):
        v = v * (1 + noise * rng.standard_normal(v.size))
        out.append(inf.PowerSeries(powers, v, None, name))
    return out


# --- saturation ------------------------------------------------------------------

def test_saturation_exact_recovery():
    P = np.geomspace(5, 2000, 12)
    I = rm.saturation_curve(1.5e6, 105.0, 50.0, P)
    fit = inf.fit_saturation(inf.PowerSeries(P, I, None, "rate"))
    assert fit["I_inf"] == pytest.approx(1.5e6, rel=1e-6)
    assert fit["Psat"] == pytest.approx(105.0, rel=1e-6)
    assert fit["c_backgr"] == pytest.approx(50.0, rel=1e-6)
    assert fit.converged and "KneeOutsideData" not in fit.flags


def test_saturation_without_background_has_unit_pe():
    P = np.geomspace(5, 2000, 12)
    fit = inf.fit_saturation(inf.PowerSeries(P, rm.saturation_curve(1e6, 200.0, 0.0, P)))
    np.testing.assert_allclose(inf.signal_fraction(fit, P), 1.0, atol=1e-6)


def test_saturation_battery_mean():
    """Noisy synthetic curves for the 14 reference emitters: the mean fitted
    saturated rate stays inside the published 1.5 +- 1.4 Mcps band and
    equals the mean of the inputs within 3 %."""
    rng = np.random.default_rng(0)
    fitted, true = [], []
    for i, row in enumerate(POPULATION_SUMMARY.values()):
        I_inf = row.I_inf_mcps * 1e6
        Psat = 50.0 * 1.4 ** i
        P = np.geomspace(Psat / 10, Psat * 10, 15)
        I = rm.saturation_curve(I_inf, Psat, 0.05 * I_inf / Psat, P)
        err = 0.02 * I
        fit = inf.fit_saturation(inf.PowerSeries(P, I + err * rng.standard_normal(P.size), err))
        fitted.append(fit["I_inf"])
        true.append(I_inf)
    mean = np.mean(fitted)
    assert abs(mean - 1.5e6) <= 1.4e6
    assert mean == pytest.approx(np.mean(true), rel=0.03)


def test_saturation_needs_four_points():
    with pytest.raises(ValueError):
        inf.fit_saturation(inf.PowerSeries([1, 2, 3], [1, 2, 3]))


# --- g2 fits ----------------------------------------------------------------------

def test_g2_noiseless_exact():
    shape = rm.G2Shape(0.8, 3.0, 200.0)
    fit = inf.fit_g2(_noiseless_hist(shape, 1.0, 0.0, 0.3, 1200.0))
    assert fit["a"] == pytest.approx(0.8, rel=1e-8)
    assert fit["tau1"] == pytest.approx(3.0, rel=1e-8)
    assert fit["tau2"] == pytest.approx(200.0, rel=1e-8)


def test_g2_deterministic():
    h = _noiseless_hist(rm.G2Shape(0.5, 2.0, 80.0), 0.9, 0.35, 0.2, 500.0)
    h.counts = np.random.default_rng(1).poisson(h.counts).astype(float)
    f1, f2 = inf.fit_g2(h, 0.9, 0.35), inf.fit_g2(h, 0.9, 0.35)
    assert f1.parameters == f2.parameters


def _with_and_without_background(a, tau1):
    h = _noiseless_hist(rm.G2Shape(a, tau1, 200.0), 0.9, 0.35, 0.05, 1200.0)
    return inf.fit_g2(h, pe=0.9, irf_sigma=0.35), inf.fit_g2(h, pe=1.0, irf_sigma=0.35)


def test_background_correction_changes_a_not_times():
    corrected, raw = _with_and_without_background(20.0, 1.0)
    for k in ("tau1", "tau2"):
        assert abs(raw[k] / corrected[k] - 1) < 0.02
    assert abs(raw["a"] / corrected["a"] - 1) > 0.05


def test_uncorrected_tau1_bias_shrinks_with_bunching():
    """Without the correction a drops by 1 - pe^2 and tau2 is unaffected;
    tau1 absorbs the unreachable dip floor, less so for strong bunching."""
    shifts = []
    for a in (0.5, 1.5, 5.0, 20.0):
        corrected, raw = _with_and_without_background(a, 1.0)
        assert raw["a"] / corrected["a"] == pytest.approx(0.81, abs=0.01)
        assert abs(raw["tau2"] / corrected["tau2"] - 1) < 0.005
        shifts.append(abs(raw["tau1"] / corrected["tau1"] - 1))
    assert np.all(np.diff(shifts) < 0)


def _rates_for_shape(a, tau1, tau2, k12):
    """Constant rates (MHz) reproducing (a, tau1, tau2) in ns at pump rate k12."""
    t1, t2 = tau1 * 1e-3, tau2 * 1e-3
    k31 = 1.0 / (t2 + a * (t2 - t1))
    A, B = 1 / t1 + 1 / t2, 1 / (t1 * t2)
    rest = A - k31                       # k12 + k21 + k23
    k23 = (B - k31 * rest) / k12
    k21 = rest - k12 - k23
    return rm.RateCoefficients(k21, k23, k31, 0.0, c=1.0, sigma=k12)


@pytest.mark.slow
def test_g2_round_trip_simulated():
    rc = _rates_for_shape(0.8, 3.0, 200.0, k12=100.0)
    shape = rm.shape_from_rates(rc, 1.0)
    assert (shape.a, shape.tau1, shape.tau2) == pytest.approx((0.8, 3.0, 200.0), rel=1e-9)
    signal = 0.25 * rc.k21 * rm.steady_state(rc, 1.0).n2 * 1e6
    pe = 0.95
    duration = 1e7 / (signal / pe)
    s = simulate(SimConfig(rc, 1.0, duration, eta_detect=0.25,
                           background_rate=signal * (1 / pe - 1), irf_sigma=0.35, seed=2))
    span, width, _, _ = suggest_binning(s)
    fit = inf.fit_g2(correlate(s, span, width), pe=pe, irf_sigma=0.35)
    for k, v in (("a", 0.8), ("tau1", 3.0), ("tau2", 200.0)):
        assert fit[k] == pytest.approx(v, rel=0.05)


def test_two_level_flags_unresolved():
    h = _noiseless_hist(rm.G2Shape(0.0, 2.0, 50.0), 1.0, 0.35, 0.2, 100.0, norm=400)
    h.counts = np.random.default_rng(3).poisson(h.counts).astype(float)
    fit = inf.fit_g2(h, irf_sigma=0.35)
    assert "BunchingUnresolved" in fit.flags
    assert math.isnan(fit["tau2"]) and fit["a"] == 0.0
    assert fit["tau1"] == pytest.approx(2.0, rel=0.1)


def test_delta_g2_zero_diagnostic():
    h = _noiseless_hist(rm.G2Shape(0.6, 2.0, 60.0), 1.0, 0.35, 0.2, 400.0)
    fit = inf.fit_g2(h, irf_sigma=0.35)
    d = fit.diagnostics
    assert d["delta_g2_zero"] == pytest.approx(abs(d["g2_fit_at_zero"] - d["g2_data_at_zero"]))
    assert d["delta_g2_zero"] < 1e-8


# --- power dependence ------------------------------------------------------------

def test_power_fit_recovers_nd2():
    ref = DESHELVING_FITS["ND2"]
    powers = np.geomspace(0.05, 10, 8) * ref.Psat
    res = inf.fit_power_dependence(*_series(ref.rates, powers))
    assert res["sigma"] == pytest.approx(8.9, rel=0.05)
    assert res["c"] == pytest.approx(177, rel=0.05)
    for k in ("k21", "k23", "k31_0", "d"):
        assert getattr(res.rates, k) == pytest.approx(getattr(ref.rates, k), rel=1e-4)
    assert set(res.curves) >= {"power", "a", "tau1", "tau2"}


def test_power_fit_constant_rate_data():
    rc = rm.RateCoefficients(3000.0, 25.0, 5.0, 0.0, c=100.0, sigma=8.0)
    powers = np.geomspace(10, 2000, 8)
    res = inf.fit_power_dependence(*_series(rc, powers))
    assert "CUnidentifiable" in res.flags
    assert res["sigma"] == pytest.approx(8.0, rel=1e-3)


def test_power_fit_user_limits_skip_refinement():
    ref = DESHELVING_FITS["ND3"]
    powers = np.geomspace(0.05, 10, 8) * ref.Psat
    lv = rm.limiting_values(ref.rates)
    res = inf.fit_power_dependence(*_series(ref.rates, powers), lv=lv)
    assert res.limits == lv and res.iterations == 1
    assert res["sigma"] == pytest.approx(ref.rates.sigma, rel=1e-4)
    assert res["c"] == pytest.approx(ref.rates.c, rel=1e-3)


def test_plateau_out_of_range_is_stage_divergence():
    # c of this emitter exceeds the highest power: the plateau is never reached
    ref = DESHELVING_FITS["ND4"]
    powers = np.geomspace(0.05, 10, 8) * ref.Psat
    with pytest.raises(StageDivergence) as exc:
        inf.fit_power_dependence(*_series(ref.rates, powers))
    assert exc.value.stage in ("sigma", "c", "refine")


@settings(max_examples=5, deadline=None)
@given(st.sampled_from(["ND1", "ND2", "ND3", "NI1", "NI7"]), st.integers(0, 1000))
def test_power_fit_stable_under_small_noise(name, seed):
    ref = DESHELVING_FITS[name]
    powers = np.geomspace(0.05, 10, 8) * ref.Psat
    res = inf.fit_power_dependence(*_series(ref.rates, powers, noise=1e-3, seed=seed))
    assert res.rates.k21 == pytest.approx(ref.rates.k21, rel=0.02)
    assert res["sigma"] == pytest.approx(ref.rates.sigma, rel=0.02)


# --- constant-rate model ------------------------------------------------------------

def test_constant_rate_low_power_limit_is_finite():
    out = inf.constant_rate_prediction(3000, 25, 20, 8.0, [1e-6, 1e-3])
    assert np.all(np.isfinite(out["tau2"]))
    assert out["tau2"][0] == pytest.approx(1e3 / 20, rel=1e-4)


def test_nested_models_agree_when_d_is_zero():
    rc = rm.RateCoefficients(3000, 25, 20, 0.0, c=50.0, sigma=8.0)
    P = np.geomspace(1, 1e4, 30)
    const = inf.constant_rate_prediction(3000, 25, 20, 8.0, P)
    a, t1, t2 = rm.shape_arrays(rc, P)
    np.testing.assert_allclose(const["tau2"], t2, rtol=1e-12)
    np.testing.assert_allclose(const["a"], a, rtol=1e-12)


@pytest.mark.parametrize("name", [n for n, f in DESHELVING_FITS.items()
                                  if f.rates.d > 10 * f.rates.k31_0])
def test_models_diverge_at_low_power(name):
    ref = DESHELVING_FITS[name]
    P = np.geomspace(1e-3, 10, 200) * ref.Psat
    k21, k23, k31, sigma = inf.constant_rate_counterpart(ref.rates, ref.Psat)
    const = inf.constant_rate_prediction(k21, k23, k31, sigma, P)["tau2"]
    _, _, desh = rm.shape_arrays(ref.rates, P)
    assert np.max(desh / const) > 10


# --- quantum efficiency ------------------------------------------------------------

def test_qe_examples():
    nd1 = POPULATION_SUMMARY["ND1"].rates
    assert 100 * inf.estimate_quantum_efficiency(0.84e6, nd1, 0.25, 0.78) == pytest.approx(0.8, abs=0.05)
    assert 100 * inf.estimate_quantum_efficiency(0.84e6, nd1, 0.25, 0.28) == pytest.approx(2.2, abs=0.05)
    ni1 = POPULATION_SUMMARY["NI1"].rates
    assert 100 * inf.estimate_quantum_efficiency(6.24e6, ni1, 0.25, 0.78) == pytest.approx(2.8, abs=0.05)


@given(st.floats(1e2, 1e4), st.floats(1.01, 10), st.floats(0.1, 1), st.floats(0.1, 1))
def test_qe_scaling(I, k, eta_d, eta_c):
    """Linear in I_inf, inversely linear in each efficiency factor."""
    rc = POPULATION_SUMMARY["ND1"].rates
    q = inf.estimate_quantum_efficiency
    base = q(I, rc, eta_d, eta_c)
    assert q(k * I, rc, eta_d, eta_c) == pytest.approx(k * base, rel=1e-12)
    assert q(I, rc, eta_d / k, eta_c) == pytest.approx(k * base, rel=1e-12)
    assert q(I, rc, eta_d, eta_c / k) == pytest.approx(k * base, rel=1e-12)


def test_qe_out_of_range():
    rc = POPULATION_SUMMARY["ND1"].rates
    with pytest.raises(OutOfRange):
        inf.estimate_quantum_efficiency(1e12, rc, 0.25, 0.78)
    with pytest.raises(ValueError):
        inf.estimate_quantum_efficiency(1e6, rc, 0.0, 0.78)
