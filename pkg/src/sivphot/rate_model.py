"""Closed-form mathematics of the extended three-level emitter.

Level 1 is the ground state, level 2 the emitting excited state and level 3
a long-lived shelving state.  Transitions and their rate coefficients::

    1 -> 2   k12 = sigma * P          (pump, linear in excitation power)
    2 -> 1   k21                      (radiative, detected photons)
    2 -> 3   k23                      (shelving)
    3 -> 1   k31 = d*P/(P + c) + k31_0  (saturating de-shelving)

Unit convention: rates in MHz, g2 times in ns, powers in uW.  The only unit
conversion (1/MHz = 1 us = 1000 ns) happens inside :func:`shape_arrays` and
:func:`limiting_values`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf, erfc, erfcx

from .errors import ComplexEigenvalue, InvalidLimits, UnknownCalibration

NS_PER_INV_MHZ = 1.0e3

# photons s^-1 cm^-2 per uW at the focus, keyed by excitation wavelength (nm)
PHOTON_FLUX_PER_UW = {671: 2.87e20, 695: 2.97e20}


@dataclass(frozen=True)
class RateCoefficients:
    """Extended three-level model parameters.

    ``sigma`` and ``c`` may be NaN while they are still undetermined (the
    output of :func:`rates_from_limits`); every power-dependent function
    requires them to be finite.
    """

    k21: float
    k23: float
    k31_0: float
    d: float
    c: float = math.nan
    sigma: float = math.nan

    def __post_init__(self):
        for name in ("k21", "k23", "k31_0", "d"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.k21 <= 0:
            raise ValueError("k21 must be > 0")
        if self.k31_0 <= 0:
            # the expression for `a` is singular at P = 0 when k31_0 = 0
            raise ValueError("k31_0 must be > 0")
        for name in ("c", "sigma"):
            value = getattr(self, name)
            if not math.isnan(value) and value < 0:
                raise ValueError(f"{name} must be >= 0 or NaN, got {value}")

    @property
    def valid_for_inversion(self) -> bool:
        """True when k21 + k23 > k31_0, the assumption behind the limit inversion."""
        return self.k21 + self.k23 > self.k31_0

    @property
    def k31_inf(self) -> float:
        return self.k31_0 + self.d

    @property
    def complete(self) -> bool:
        return not (math.isnan(self.c) or math.isnan(self.sigma))

    def with_pump(self, sigma: float, c: float) -> "RateCoefficients":
        return replace(self, sigma=float(sigma), c=float(c))

    def as_dict(self) -> dict:
        return {"k21": self.k21, "k23": self.k23, "k31_0": self.k31_0,
                "d": self.d, "c": self.c, "sigma": self.sigma}


@dataclass(frozen=True)
class PumpState:
    power: float
    k12: float
    k31: float


@dataclass(frozen=True)
class RateAggregates:
    A: float
    B: float

    @property
    def discriminant(self) -> float:
        return self.A * self.A - 4.0 * self.B


@dataclass(frozen=True)
class G2Shape:
    """Observable g2 parameters at one excitation power (times in ns).

    ``degenerate`` is set when k23 = 0: the shelving state is decoupled,
    a = 0 and tau2 carries no information.
    """

    a: float
    tau1: float
    tau2: float
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError(f"tau1 and tau2 must be > 0, got {self.tau1}, {self.tau2}")


@dataclass(frozen=True)
class LimitingValues:
    """Vanishing- and high-power limits of the g2 parameters (times in ns)."""

    tau1_0: float
    tau2_0: float
    tau2_inf: float
    a_inf: float

    def __post_init__(self):
        for name in ("tau1_0", "tau2_0", "tau2_inf"):
            if not getattr(self, name) > 0:
                raise InvalidLimits(f"{name} must be > 0")
        if not self.a_inf >= 0:
            raise InvalidLimits("a_inf must be >= 0")


@dataclass(frozen=True)
class SteadyState:
    n1: float
    n2: float
    n3: float


def _check_pump(rc: RateCoefficients):
    if not rc.complete:
        raise ValueError("sigma and c must be set for power-dependent quantities")


def deshelving_rate(rc: RateCoefficients, P):
    """Saturating de-shelving rate k31(P) = d*P/(P + c) + k31_0 in MHz.

    Accepts scalars or arrays; ``P = inf`` gives k31_0 + d and ``P = 0``
    gives k31_0 even when c = 0.
    """
    P = np.asarray(P, dtype=float)
    if np.any(P < 0):
        raise ValueError("power must be >= 0")
    c = 0.0 if math.isnan(rc.c) else rc.c
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(np.isinf(P), 1.0, np.where(P > 0, P / (P + c), 0.0))
    out = rc.d * frac + rc.k31_0
    return float(out) if out.ndim == 0 else out


def pump_state(rc: RateCoefficients, P: float) -> PumpState:
    _check_pump(rc)
    return PumpState(power=float(P), k12=rc.sigma * float(P), k31=deshelving_rate(rc, P))


def rate_aggregates(k12, k21, k23, k31):
    """Sum rate A and pairwise-product rate B (MHz, MHz^2)."""
    A = k12 + k21 + k23 + k31
    B = k12 * k23 + k12 * k31 + k21 * k31 + k23 * k31
    return A, B


def generator_matrix(k12: float, k21: float, k23: float, k31: float) -> np.ndarray:
    """Rate-equation generator Q with dN/dt = Q @ N, N = (N1, N2, N3)."""
    return np.array([
        [-k12, k21, k31],
        [k12, -(k21 + k23), 0.0],
        [0.0, k23, -k31],
    ])


def shape_from_k(k12, k21, k23, k31):
    """Vectorized (a, tau1, tau2) in ns from explicit rate coefficients in MHz.

    tau2 uses the product form (A + sqrt(A^2 - 4B)) / (2B), algebraically
    identical to 2/(A - sqrt(A^2 - 4B)) but free of cancellation when
    B << A^2.
    """
    k12, k21, k23, k31 = np.broadcast_arrays(*(np.asarray(x, dtype=float)
                                               for x in (k12, k21, k23, k31)))
    A, B = rate_aggregates(k12, k21, k23, k31)
    disc = A * A - 4.0 * B
    if np.any(disc < 0):
        raise ComplexEigenvalue("A^2 < 4B: rate matrix has complex eigenvalues")
    root = np.sqrt(disc)
    lam1 = 0.5 * (A + root)
    tau1 = 1.0 / lam1
    tau2 = lam1 / B
    # a = (1 - tau2 k31) / (k31 (tau2 - tau1)) cancels for weak bunching;
    # the characteristic polynomial at k31 gives (lam1 - k31)(lam2 - k31) = -k12 k23,
    # hence this form with only positive factors
    with np.errstate(invalid="ignore", divide="ignore"):
        a = k12 * k23 * lam1 / (k31 * (lam1 - k31) * root)
    decoupled = k23 == 0
    if np.any(decoupled):
        a = np.where(decoupled, 0.0, a)
        tau1 = np.where(decoupled, 1.0 / (k12 + k21), tau1)
        tau2 = np.where(decoupled, 1.0 / k31, tau2)
    return a, tau1 * NS_PER_INV_MHZ, tau2 * NS_PER_INV_MHZ


def shape_arrays(rc: RateCoefficients, powers):
    """(a, tau1, tau2) arrays over a power grid for the de-shelving model."""
    _check_pump(rc)
    powers = np.asarray(powers, dtype=float)
    return shape_from_k(rc.sigma * powers, rc.k21, rc.k23, deshelving_rate(rc, powers))


def shape_from_rates(rc: RateCoefficients, P: float) -> G2Shape:
    """g2 shape parameters at excitation power ``P``.

    Raises :class:`ComplexEigenvalue` if the parameter set is unphysical.
    """
    if not np.isfinite(P) or P < 0:
        raise ValueError("P must be finite and >= 0; use limiting_values for P -> inf")
    a, t1, t2 = shape_arrays(rc, P)
    return G2Shape(a=float(a), tau1=float(t1), tau2=float(t2), degenerate=rc.k23 == 0)


def limiting_values(rc: RateCoefficients) -> LimitingValues:
    """Exact P -> 0 and P -> inf limits of the g2 parameters."""
    k31_inf = rc.k31_inf
    return LimitingValues(
        tau1_0=NS_PER_INV_MHZ / (rc.k21 + rc.k23),
        tau2_0=NS_PER_INV_MHZ / rc.k31_0,
        tau2_inf=NS_PER_INV_MHZ / (rc.k23 + k31_inf),
        a_inf=rc.k23 / k31_inf,
    )


def rates_from_limits(lv: LimitingValues) -> RateCoefficients:
    """Invert limiting g2 parameters into k21, k23, k31_0 and d.

    ``sigma`` and ``c`` of the result are NaN.  Raises
    :class:`InvalidLimits` if any derived rate is not positive (d may be
    exactly zero) or if k21 + k23 > k31_0 fails.
    """
    inv_t2_0 = NS_PER_INV_MHZ / lv.tau2_0
    inv_t2_inf = NS_PER_INV_MHZ / lv.tau2_inf
    k31_0 = inv_t2_0
    d = (inv_t2_inf - (1.0 + lv.a_inf) * inv_t2_0) / (lv.a_inf + 1.0)
    k23 = inv_t2_inf - k31_0 - d
    k21 = NS_PER_INV_MHZ / lv.tau1_0 - k23
    # rounding noise around d = 0 (constant-rate limit)
    if abs(d) <= 1e-12 * inv_t2_inf:
        d = 0.0
    if abs(k23) <= 1e-12 * inv_t2_inf:
        k23 = 0.0
    if d < 0:
        raise InvalidLimits(f"derived d = {d:.6g} MHz < 0 (1/tau2_inf < (1+a_inf)/tau2_0)")
    if k23 < 0:
        raise InvalidLimits(f"derived k23 = {k23:.6g} MHz < 0")
    if k21 <= 0:
        raise InvalidLimits(f"derived k21 = {k21:.6g} MHz <= 0")
    if not k21 + k23 > k31_0:
        raise InvalidLimits("assumption k21 + k23 > k31_0 violated")
    return RateCoefficients(k21=k21, k23=k23, k31_0=k31_0, d=d)


def sigma_constant_rate_model(k21: float, k23: float, k31: float, Psat: float) -> float:
    """Pump slope (MHz/uW) implied by a saturation power when all rates are constant."""
    return (k23 * k31 + k21 * k31) / ((k23 + k31) * Psat)


def steady_state(rc: RateCoefficients, P: float) -> SteadyState:
    """Stationary level occupations; ``P = inf`` gives the saturated limit."""
    k31 = deshelving_rate(rc, P)
    if np.isinf(P):
        n2 = k31 / (k31 + rc.k23)
        return SteadyState(0.0, n2, 1.0 - n2)
    _check_pump(rc)
    k12 = rc.sigma * P
    # unnormalized, relative to n1 = 1
    w2 = k12 / (rc.k21 + rc.k23)
    w3 = rc.k23 * w2 / k31
    total = 1.0 + w2 + w3
    return SteadyState(1.0 / total, w2 / total, w3 / total)


def g2_analytic(shape: G2Shape, tau):
    """Three-level g2(tau) = 1 - (1+a) exp(-|tau|/tau1) + a exp(-|tau|/tau2)."""
    t = np.abs(np.asarray(tau, dtype=float))
    e1, e2 = np.exp(-t / shape.tau1), np.exp(-t / shape.tau2)
    # grouped so that tau = 0 gives exactly 0
    out = (1.0 - e1) - shape.a * (e1 - e2)
    return float(out) if out.ndim == 0 else out


def g2_with_background(g2, pe):
    """Measured g2 when a fraction 1 - pe of detections is uncorrelated background."""
    if not 0.0 <= pe <= 1.0:
        raise ValueError("pe must lie in [0, 1]")
    return 1.0 + (np.asarray(g2, dtype=float) - 1.0) * pe * pe


def exp_gauss_conv(tau, decay, width):
    """exp(-|tau|/decay) convolved with a unit-area Gaussian of std ``width``.

    Closed form from two exponentially modified Gaussians.  Evaluated via
    erfcx where its argument is non-negative and erfc otherwise, so that no
    intermediate overflows.
    """
    tau = np.asarray(tau, dtype=float)
    if width == 0:
        return np.exp(-np.abs(tau) / decay)
    qp, qm = _one_sided(tau, decay, width)
    return qp + qm


def _one_sided(tau, decay, width):
    """(q(tau), q(-tau)) with q(t) = int_0^inf exp(-y/decay) N(t - y; width) dy."""
    r = width / decay
    out = []
    for sign in (1.0, -1.0):
        t = sign * tau
        x = (r - t / width) / math.sqrt(2.0)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            safe = np.exp(-0.5 * (t / width) ** 2) * erfcx(np.maximum(x, 0.0))
            direct = np.exp(0.5 * r * r - t / decay) * erfc(np.minimum(x, 0.0))
        out.append(0.5 * np.where(x >= 0, safe, direct))
    return out


def _exp_gauss_antiderivative(x, decay, width):
    """int_0^x of :func:`exp_gauss_conv` (odd in x)."""
    if width == 0:
        return np.sign(x) * decay * -np.expm1(-np.abs(x) / decay)
    qp, qm = _one_sided(x, decay, width)
    return decay * (erf(x / (width * math.sqrt(2.0))) - (qp - qm))


def exp_gauss_bin_average(lo, hi, decay, width):
    """Mean of :func:`exp_gauss_conv` over each bin [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    F = _exp_gauss_antiderivative
    return (F(hi, decay, width) - F(lo, decay, width)) / (hi - lo)


def exp_gauss_edge_average(edges, decay, width):
    """Bin means of :func:`exp_gauss_conv` for contiguous ``edges``.

    The antiderivative is evaluated once per edge, and only on the upper
    half when the edges are mirror symmetric (it is odd).
    """
    edges = np.asarray(edges, dtype=float)
    n = edges.size
    half = n // 2
    if n > 2 and n % 2 == 0 and np.array_equal(edges[:half], -edges[:half - 1:-1]):
        up = _exp_gauss_antiderivative(edges[half:], decay, width)
        F = np.concatenate([-up[::-1], up])
    else:
        F = _exp_gauss_antiderivative(edges, decay, width)
    return np.diff(F) / np.diff(edges)


def g2_irf_binned(shape: G2Shape, pe: float, irf_sigma: float, edges):
    """Bin averages of :func:`g2_irf_convolved` for histogram ``edges``."""
    if irf_sigma < 0:
        raise ValueError("irf_sigma must be >= 0")
    e1 = exp_gauss_edge_average(edges, shape.tau1, irf_sigma)
    e2 = exp_gauss_edge_average(edges, shape.tau2, irf_sigma)
    return g2_with_background((1.0 - e1) - shape.a * (e1 - e2), pe)


def g2_irf_convolved(shape: G2Shape, pe: float, irf_sigma: float, tau):
    """Background-corrected g2 smeared by a Gaussian instrument response."""
    if irf_sigma < 0:
        raise ValueError("irf_sigma must be >= 0")
    e1 = exp_gauss_conv(tau, shape.tau1, irf_sigma)
    e2 = exp_gauss_conv(tau, shape.tau2, irf_sigma)
    g2 = (1.0 - e1) - shape.a * (e1 - e2)
    out = g2_with_background(g2, pe)
    return float(out) if out.ndim == 0 else out


def saturation_curve(I_inf: float, Psat: float, c_backgr: float, P):
    """Detected count rate I(P) = I_inf*P/(P + Psat) + c_backgr*P."""
    P = np.asarray(P, dtype=float)
    out = I_inf * P / (P + Psat) + c_backgr * P
    return float(out) if out.ndim == 0 else out


def _flux_per_uw(wavelength_nm, flux_per_uW):
    if flux_per_uW is not None:
        return float(flux_per_uW)
    key = int(round(wavelength_nm))
    if key not in PHOTON_FLUX_PER_UW or abs(wavelength_nm - key) > 1e-9:
        raise UnknownCalibration(
            f"no calibration stored for {wavelength_nm} nm; pass flux_per_uW explicitly")
    return PHOTON_FLUX_PER_UW[key]


def power_to_photon_flux(P, wavelength_nm: float, flux_per_uW: float | None = None):
    """Photon flux density (photons s^-1 cm^-2) at the focus for power P in uW."""
    return np.asarray(P, dtype=float) * _flux_per_uw(wavelength_nm, flux_per_uW) + 0.0


def absorption_cross_section(sigma: float, wavelength_nm: float,
                             flux_per_uW: float | None = None) -> float:
    """Absorption cross section in cm^2 from the pump slope sigma (MHz/uW)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return sigma * 1e6 / _flux_per_uw(wavelength_nm, flux_per_uW)
